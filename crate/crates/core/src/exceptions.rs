//! Hardware exception entry and return: ESF stacking, `EXC_RETURN`, and
//! the Thread/Handler mode switch. Nesting is not modeled.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::machine::{ControlTransfer, EventKind, ExecutionEvent, Machine, Memory, MemoryHooks, Mode, Reg, Size};

/// Return to Thread mode on the main stack.
pub const EXC_RETURN: u32 = 0xFFFF_FFF9;
pub const ESF_WORDS: u32 = 8;
pub const ESF_BYTES: u32 = ESF_WORDS * 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExcId {
    UsageFault,
    Svc,
    DebugMon,
    SysTick,
}

impl ExcId {
    pub const ALL: [ExcId; 4] = [ExcId::UsageFault, ExcId::Svc, ExcId::DebugMon, ExcId::SysTick];

    /// Exception number as written to the IPSR field.
    pub fn number(self) -> u32 {
        match self {
            ExcId::UsageFault => 6,
            ExcId::Svc => 11,
            ExcId::DebugMon => 12,
            ExcId::SysTick => 15,
        }
    }

    /// Function name that registers a handler for this exception.
    pub fn handler_name(self) -> &'static str {
        match self {
            ExcId::UsageFault => "UsageFault_Handler",
            ExcId::Svc => "SVC_Handler",
            ExcId::DebugMon => "DebugMon_Handler",
            ExcId::SysTick => "SysTick_Handler",
        }
    }
}

impl fmt::Display for ExcId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for ExcId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if let Ok(n) = t.parse::<u32>() {
            return ExcId::ALL.into_iter().find(|e| e.number() == n).ok_or_else(|| format!("no exception {n}"));
        }
        match t.to_ascii_lowercase().as_str() {
            "usagefault" => Ok(ExcId::UsageFault),
            "svc" | "svcall" => Ok(ExcId::Svc),
            "debugmon" => Ok(ExcId::DebugMon),
            "systick" => Ok(ExcId::SysTick),
            _ => Err(format!("unknown exception `{t}`")),
        }
    }
}

/// The eight words hardware pushes, lowest address first.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExceptionStackFrame {
    pub r0: u32,
    pub r1: u32,
    pub r2: u32,
    pub r3: u32,
    pub r12: u32,
    pub lr: u32,
    pub return_address: u32,
    pub xpsr: u32,
}

impl ExceptionStackFrame {
    pub const R12_OFFSET: u32 = 16;
    pub const LR_OFFSET: u32 = 20;
    pub const RETURN_ADDRESS_OFFSET: u32 = 24;
    pub const XPSR_OFFSET: u32 = 28;

    pub fn words(&self) -> [u32; 8] {
        [self.r0, self.r1, self.r2, self.r3, self.r12, self.lr, self.return_address, self.xpsr]
    }

    pub fn from_words(w: [u32; 8]) -> Self {
        ExceptionStackFrame {
            r0: w[0],
            r1: w[1],
            r2: w[2],
            r3: w[3],
            r12: w[4],
            lr: w[5],
            return_address: w[6],
            xpsr: w[7],
        }
    }

    /// Read a frame at `sp` without side effects.
    pub fn read(memory: &Memory, sp: u32) -> Self {
        let mut w = [0; 8];
        for (i, slot) in w.iter_mut().enumerate() {
            *slot = memory.read_u32(sp + 4 * i as u32);
        }
        Self::from_words(w)
    }
}

fn event(kind: EventKind, at_pc: u32) -> ExecutionEvent {
    ExecutionEvent { kind, at_pc }
}

/// Stack the ESF and enter the handler for `exc`. Cycle charging is left to
/// the caller, since `svc`/`udf` include entry in their own cost.
pub fn exception_entry(
    m: &mut Machine,
    exc: ExcId,
    return_address: u32,
    hooks: &mut dyn MemoryHooks,
) -> ExecutionEvent {
    let at = m.pc();
    if let Some(active) = m.active_exception {
        m.halt_fault(format!("{exc} raised while {active} is active"));
        return event(EventKind::Halted(crate::machine::HaltReason::Fault), at);
    }
    let Some(&handler) = m.handlers.get(&exc) else {
        m.halt_fault(format!("no handler for {exc}"));
        return event(EventKind::Halted(crate::machine::HaltReason::Fault), at);
    };
    let frame = ExceptionStackFrame {
        r0: m.reg(Reg::R0),
        r1: m.reg(Reg::R1),
        r2: m.reg(Reg::R2),
        r3: m.reg(Reg::R3),
        r12: m.reg(Reg::R12),
        lr: m.reg(Reg::LR),
        return_address,
        xpsr: m.xpsr,
    };
    let base = m.sp().wrapping_sub(ESF_BYTES);
    for (i, w) in frame.words().into_iter().enumerate() {
        if m.write(hooks, base + 4 * i as u32, Size::Word, w).is_none() {
            return event(EventKind::Halted(crate::machine::HaltReason::Fault), at);
        }
    }
    m.set_reg(Reg::SP, base);
    m.set_reg(Reg::LR, EXC_RETURN);
    m.xpsr = (m.xpsr & !0x1FF) | exc.number();
    m.mode = Mode::Handler;
    m.active_exception = Some(exc);
    m.r[15] = handler;
    m.last_control = Some(ControlTransfer::ExceptionEntry { return_address });
    event(EventKind::ExceptionEntered(exc), at)
}

/// Unstack the ESF at SP and resume Thread mode.
pub fn exception_return(m: &mut Machine, hooks: &mut dyn MemoryHooks) -> ExecutionEvent {
    let at = m.pc();
    let sp = m.sp();
    let mut w = [0; 8];
    for (i, slot) in w.iter_mut().enumerate() {
        match m.read(hooks, sp + 4 * i as u32, Size::Word) {
            Some(v) => *slot = v,
            None => return event(EventKind::Halted(crate::machine::HaltReason::Fault), at),
        }
    }
    let f = ExceptionStackFrame::from_words(w);
    m.set_reg(Reg::R0, f.r0);
    m.set_reg(Reg::R1, f.r1);
    m.set_reg(Reg::R2, f.r2);
    m.set_reg(Reg::R3, f.r3);
    m.set_reg(Reg::R12, f.r12);
    m.set_reg(Reg::LR, f.lr);
    m.xpsr = f.xpsr;
    m.set_reg(Reg::SP, sp + ESF_BYTES);
    m.mode = Mode::Thread;
    m.active_exception = None;
    m.r[15] = f.return_address & !1;
    m.last_control = Some(ControlTransfer::ExceptionReturn { target: f.return_address & !1 });
    event(EventKind::ExceptionReturned, at)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::parse;
    use crate::machine::NoHooks;

    fn machine() -> Machine {
        let src = ".org 0x08000100\n.func main\nnop\nnop\nbkpt #0\n.endfunc\n.func SysTick_Handler handler\nbx lr\n.endfunc";
        Machine::load(&parse(src).unwrap()).unwrap()
    }

    #[test]
    fn frame_layout_and_lr() {
        let mut m = machine();
        for (i, r) in [Reg::R0, Reg::R1, Reg::R2, Reg::R3, Reg::R12, Reg::LR].into_iter().enumerate() {
            m.set_reg(r, 0x100 + i as u32);
        }
        let sp = m.sp();
        let ev = m.raise(ExcId::SysTick, &mut NoHooks);
        assert_eq!(ev.kind, EventKind::ExceptionEntered(ExcId::SysTick));
        assert_eq!(m.sp(), sp - 32);
        assert_eq!(m.memory.read_u32(m.sp() + 24), 0x0800_0100);
        assert_eq!(m.memory.read_u32(m.sp() + 16), 0x104);
        assert_eq!(m.memory.read_u32(m.sp() + 20), 0x105);
        assert_eq!(m.memory.read_u32(m.sp() + 28), 0x0100_0000);
        assert_eq!(m.reg(Reg::LR), EXC_RETURN);
        assert_eq!(m.mode, Mode::Handler);
        assert_eq!(m.cycles, 12);
    }

    #[test]
    fn round_trip_restores_state() {
        let mut m = machine();
        m.xpsr = 0x8100_0000;
        m.set_reg(Reg::R12, 77);
        let before = (m.r, m.xpsr);
        m.raise(ExcId::SysTick, &mut NoHooks);
        assert_eq!(m.step(&mut NoHooks).kind, EventKind::ExceptionReturned);
        assert_eq!((m.r, m.xpsr), before);
        assert_eq!(m.mode, Mode::Thread);
        assert_eq!(m.cycles, 12 + 2 + 12);
    }

    #[test]
    fn tampered_return_address_redirects() {
        let mut m = machine();
        m.raise(ExcId::SysTick, &mut NoHooks);
        let sp = m.sp();
        m.memory.write_u32(sp + 24, 0x0800_0102);
        m.step(&mut NoHooks);
        assert_eq!(m.pc(), 0x0800_0102);
    }

    #[test]
    fn bad_sentinel_faults() {
        let src = ".func main\nnop\n.endfunc\n.func SysTick_Handler handler\nmov lr, r0\nbx lr\n.endfunc";
        let mut m = Machine::load(&parse(src).unwrap()).unwrap();
        m.raise(ExcId::SysTick, &mut NoHooks);
        m.set_reg(Reg::R0, 0xFFFF_FFF1);
        for _ in 0..2 {
            m.step(&mut NoHooks);
        }
        assert_eq!(m.halt_reason, Some(crate::machine::HaltReason::Fault));
    }

    #[test]
    fn no_nesting() {
        let mut m = machine();
        m.raise(ExcId::SysTick, &mut NoHooks);
        m.raise(ExcId::SysTick, &mut NoHooks);
        assert!(m.halted);
    }

    #[test]
    fn parse_names() {
        assert_eq!("UsageFault".parse::<ExcId>(), Ok(ExcId::UsageFault));
        assert_eq!("15".parse::<ExcId>(), Ok(ExcId::SysTick));
        assert!("Bogus".parse::<ExcId>().is_err());
    }
}
