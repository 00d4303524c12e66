//! Deterministic Cortex-M-style core: registers, sparse memory, the DWT and
//! DEMCR mapped into the system region, and a fixed cycle model.

mod exec;
mod instr;
mod memory;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::asm::{self, AsmError, AsmProgram, Category, Layout, Phase, PlacedInstr, Tag};
use crate::dwt::{AccessKind, ComparatorId, DwtRegister, DwtUnit};
use crate::exceptions::ExcId;

pub use instr::{
    Cond, Imm16, Instruction, Operand, Reg, RegList, Size, EXCEPTION_ENTRY_CYCLES, EXCEPTION_RETURN_CYCLES,
    PIPELINE_REFILL_CYCLES,
};
pub use memory::Memory;

/// Debug exception and monitor control register.
pub const DEMCR: u32 = 0xE000_EDFC;
pub const DEMCR_MON_EN: u32 = 1 << 16;
pub const DEMCR_TRCENA: u32 = 1 << 24;
/// Accesses at or above this address need privilege.
pub const SYSTEM_BASE: u32 = 0xE000_0000;
/// Reset value of SP.
pub const INITIAL_SP: u32 = 0x2002_0000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[default]
    Thread,
    Handler,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HaltReason {
    /// `bkpt` reached.
    Normal,
    /// Protection violation under the reset policy.
    Reset,
    Report,
    Fault,
    /// Shadow stack pointer left its region.
    StackOverflow,
}

impl fmt::Display for HaltReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// One data access as seen by the memory hooks, before it commits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemAccess {
    pub address: u32,
    pub size: Size,
    pub kind: AccessKind,
    /// Value being written; 0 for reads.
    pub value: u32,
}

/// Observer of every data access. `hit` is the comparator the DWT matched,
/// already gated on DEMCR.MON_EN; the return value is what the core acts on.
pub trait MemoryHooks {
    fn before_access(&mut self, access: &MemAccess, hit: Option<ComparatorId>) -> Option<ComparatorId> {
        let _ = access;
        hit
    }
}

/// Hooks that accept the DWT verdict unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoHooks;

impl MemoryHooks for NoHooks {}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatchpointHit {
    pub comparator: ComparatorId,
    pub address: u32,
    pub access: AccessKind,
    pub size: u32,
    /// Value of a suppressed write.
    pub value: u32,
    pub pc: u32,
    pub step_index: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    Stepped,
    WatchpointHit { comparator: ComparatorId, address: u32, access: AccessKind },
    ExceptionEntered(ExcId),
    ExceptionReturned,
    Halted(HaltReason),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExecutionEvent {
    pub kind: EventKind,
    pub at_pc: u32,
}

/// Backward-edge relevant control transfer performed by the last step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ControlTransfer {
    Call { return_address: u32 },
    Return { target: u32 },
    ExceptionEntry { return_address: u32 },
    ExceptionReturn { target: u32 },
}

/// Cycles split by instruction provenance.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleAccounting {
    pub original: u64,
    pub inserted: BTreeMap<Phase, BTreeMap<Category, u64>>,
    pub converted: u64,
    /// Baseline cost of the instructions the converted ones stand in for.
    pub replaced: u64,
    /// Asynchronous exception entries and all exception returns.
    pub exception: u64,
}

impl CycleAccounting {
    pub fn inserted_total(&self) -> u64 {
        self.inserted.values().flat_map(|m| m.values()).sum()
    }

    pub fn phase_total(&self, phase: Phase) -> u64 {
        self.inserted.get(&phase).map_or(0, |m| m.values().sum())
    }

    pub fn category(&self, phase: Phase, category: Category) -> u64 {
        self.inserted.get(&phase).and_then(|m| m.get(&category)).copied().unwrap_or(0)
    }

    /// Cycles attributable to instrumentation: inserted code plus the net
    /// cost of conversions.
    pub fn overhead(&self) -> i64 {
        self.inserted_total() as i64 + self.converted as i64 - self.replaced as i64
    }

    fn charge(&mut self, tag: Tag, cycles: u32) {
        let c = cycles as u64;
        match tag {
            Tag::Original => self.original += c,
            Tag::Inserted { phase, category } => {
                *self.inserted.entry(phase).or_default().entry(category).or_default() += c
            }
            Tag::Converted { replaced_cycles } => {
                self.converted += c;
                self.replaced += replaced_cycles as u64;
            }
        }
    }
}

/// Immutable decoded program shared between machines.
#[derive(Debug)]
pub struct CodeImage {
    pub layout: Layout,
    by_address: HashMap<u32, usize>,
}

impl CodeImage {
    pub fn new(layout: Layout) -> Self {
        let by_address = layout.instrs.iter().enumerate().map(|(i, p)| (p.address, i)).collect();
        CodeImage { layout, by_address }
    }

    pub fn fetch(&self, address: u32) -> Option<&PlacedInstr> {
        self.by_address.get(&address).map(|&i| &self.layout.instrs[i])
    }

    pub fn label(&self, name: &str) -> Option<u32> {
        self.layout.labels.get(name).copied()
    }
}

/// The whole emulated world.
#[derive(Clone, Debug)]
pub struct Machine {
    /// R0..R12, SP, LR, PC.
    pub r: [u32; 16],
    pub xpsr: u32,
    /// Bit 0 set means unprivileged thread mode.
    pub control: u32,
    pub mode: Mode,
    pub memory: Memory,
    pub cycles: u64,
    pub halted: bool,
    pub halt_reason: Option<HaltReason>,
    pub fault: Option<String>,
    pub dwt: DwtUnit,
    pub demcr: u32,
    pub active_exception: Option<ExcId>,
    /// Inclusive bounds a COMP1 write must stay within.
    pub ssp_guard: Option<(u32, u32)>,
    pub handlers: BTreeMap<ExcId, u32>,
    /// Watchpoint hits not yet consumed by the runner.
    pub pending_hits: VecDeque<WatchpointHit>,
    pub last_control: Option<ControlTransfer>,
    pub accounting: CycleAccounting,
    /// Instructions executed.
    pub step_index: u64,
    pub code: Arc<CodeImage>,
}

impl Machine {
    /// Lay out `program`, load its data words and point PC at the entry:
    /// `_start`, else `main`, else the first function.
    pub fn load(program: &AsmProgram) -> Result<Machine, AsmError> {
        let layout = asm::layout(program)?;
        let mut memory = Memory::new();
        for (a, v) in &layout.words {
            memory.write_u32(*a, *v);
        }
        let entry = ["_start", "main"]
            .iter()
            .find_map(|n| layout.labels.get(*n).copied())
            .or_else(|| layout.functions.first().map(|f| f.start))
            .unwrap_or(program.origin());
        let handlers = ExcId::ALL
            .iter()
            .filter_map(|e| layout.labels.get(e.handler_name()).map(|a| (*e, *a)))
            .collect();
        let mut r = [0; 16];
        r[Reg::SP.index()] = INITIAL_SP;
        r[Reg::PC.index()] = entry;
        Ok(Machine {
            r,
            xpsr: 0x0100_0000,
            control: 0,
            mode: Mode::Thread,
            memory,
            cycles: 0,
            halted: false,
            halt_reason: None,
            fault: None,
            dwt: DwtUnit::new(),
            demcr: 0,
            active_exception: None,
            ssp_guard: None,
            handlers,
            pending_hits: VecDeque::new(),
            last_control: None,
            accounting: CycleAccounting::default(),
            step_index: 0,
            code: Arc::new(CodeImage::new(layout)),
        })
    }

    pub fn reg(&self, r: Reg) -> u32 {
        self.r[r.index()]
    }

    pub fn set_reg(&mut self, r: Reg, v: u32) {
        self.r[r.index()] = v;
    }

    pub fn pc(&self) -> u32 {
        self.r[15]
    }

    pub fn sp(&self) -> u32 {
        self.r[13]
    }

    pub fn is_privileged(&self) -> bool {
        self.mode == Mode::Handler || self.control & 1 == 0
    }

    pub fn mon_enabled(&self) -> bool {
        self.demcr & DEMCR_MON_EN != 0
    }

    pub fn label(&self, name: &str) -> Option<u32> {
        self.code.label(name)
    }

    pub fn halt(&mut self, reason: HaltReason) {
        if !self.halted {
            self.halted = true;
            self.halt_reason = Some(reason);
        }
    }

    pub fn halt_fault(&mut self, msg: impl Into<String>) {
        if !self.halted {
            self.fault = Some(msg.into());
            self.halt(HaltReason::Fault);
        }
    }

    /// Current shadow stack pointer as held in COMP1.
    pub fn ssp(&self) -> u32 {
        self.dwt.groups[1].comp
    }

    /// Side-effect free read for inspection: MMIO registers included, no
    /// hooks, no watchpoints, no privilege check.
    pub fn peek_u32(&self, address: u32) -> u32 {
        if DwtUnit::in_window(address) {
            self.dwt.mmio_read(address, self.cycles)
        } else if address == DEMCR {
            self.demcr
        } else {
            self.memory.read_u32(address)
        }
    }

    /// Perform a data access through the DWT, hooks and MMIO dispatch.
    /// Returns `None` if the access faulted (the machine is then halted).
    pub fn access(
        &mut self,
        hooks: &mut dyn MemoryHooks,
        kind: AccessKind,
        address: u32,
        size: Size,
        value: u32,
    ) -> Option<u32> {
        let n = size.bytes();
        if address % n != 0 {
            self.halt_fault(format!("unaligned {n}-byte access at {address:#010x}"));
            return None;
        }
        if address >= SYSTEM_BASE && !self.is_privileged() {
            self.halt_fault(format!("unprivileged access to system address {address:#010x}"));
            return None;
        }
        let system_reg = DwtUnit::in_window(address) || (DEMCR..DEMCR + 4).contains(&address);
        if system_reg && size != Size::Word {
            self.halt_fault(format!("sub-word access to system register at {address:#010x}"));
            return None;
        }
        let access = MemAccess { address, size, kind, value: if kind == AccessKind::Write { value } else { 0 } };
        let dwt_hit = if self.mon_enabled() { self.dwt.match_access(address, kind, n) } else { None };
        let hit = hooks.before_access(&access, dwt_hit);
        if let Some(comparator) = hit {
            self.pending_hits.push_back(WatchpointHit {
                comparator,
                address,
                access: kind,
                size: n,
                value: access.value,
                pc: self.pc(),
                step_index: self.step_index,
            });
            if kind == AccessKind::Write {
                return Some(0);
            }
        }
        match kind {
            AccessKind::Read => Some(if DwtUnit::in_window(address) {
                self.dwt.mmio_read(address, self.cycles)
            } else if address == DEMCR {
                self.demcr
            } else {
                self.memory.read(address, size)
            }),
            AccessKind::Write => {
                if DwtUnit::in_window(address) {
                    let outcome = self.dwt.mmio_write(address, value);
                    if outcome == crate::dwt::WriteOutcome::Updated(DwtRegister::Comp(1)) {
                        if let Some((lo, hi)) = self.ssp_guard {
                            if !(lo..=hi).contains(&value) {
                                self.fault = Some(format!("shadow stack pointer {value:#010x} outside [{lo:#010x}, {hi:#010x}]"));
                                self.halt(HaltReason::StackOverflow);
                            }
                        }
                    }
                } else if address == DEMCR {
                    self.demcr = value;
                } else {
                    self.memory.write(address, size, value);
                }
                Some(0)
            }
        }
    }

    pub fn read(&mut self, hooks: &mut dyn MemoryHooks, address: u32, size: Size) -> Option<u32> {
        self.access(hooks, AccessKind::Read, address, size, 0)
    }

    pub fn write(&mut self, hooks: &mut dyn MemoryHooks, address: u32, size: Size, value: u32) -> Option<()> {
        self.access(hooks, AccessKind::Write, address, size, value).map(|_| ())
    }

    /// Execute one instruction.
    pub fn step(&mut self, hooks: &mut dyn MemoryHooks) -> ExecutionEvent {
        exec::step(self, hooks)
    }

    /// Take an asynchronous exception between steps; the interrupted PC is
    /// stacked as the return address.
    pub fn raise(&mut self, exc: ExcId, hooks: &mut dyn MemoryHooks) -> ExecutionEvent {
        let pc = self.pc();
        self.last_control = None;
        let ev = crate::exceptions::exception_entry(self, exc, pc, hooks);
        if !self.halted {
            self.cycles += EXCEPTION_ENTRY_CYCLES as u64;
            self.accounting.exception += EXCEPTION_ENTRY_CYCLES as u64;
        }
        ev
    }

    fn event(&self, kind: EventKind, at_pc: u32) -> ExecutionEvent {
        ExecutionEvent { kind, at_pc }
    }
}
