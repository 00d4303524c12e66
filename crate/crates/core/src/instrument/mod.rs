//! The shadow stack rewriting pass.
//!
//! Normal functions get an LR push onto the shadow stack at entry and an LR
//! reload before every return. Exception handlers additionally copy the
//! hardware-stacked xPSR, return address, LR and R12 and write them back
//! before returning. Trusted HAL functions are left alone.
//!
//! The shadow stack is an upward-growing array of words. Its pointer lives
//! in the DWT COMP1 register; comparator 0 write-protects the region and is
//! switched off only around the LR store.

mod analysis;
mod sequences;

use std::collections::HashSet;

use serde::Serialize;
use thiserror::Error;

use crate::asm::{self, AsmFunction, AsmProgram, BodyItem, FunctionKind, Line, Tag};
use crate::dwt::DwtUnit;
use crate::machine::{Instruction, Reg, DEMCR, INITIAL_SP, SYSTEM_BASE};

pub use analysis::{analyze_free_gprs, assign_scratch, free_gpr_stats, usable_scratch, FreeGprStats, ScratchAssignment};
pub use sequences::{ssp_access_block, HANDLER_FRAME_BYTES};

pub const DEFAULT_SS_START: u32 = 0x00E0_0000;
pub const DEFAULT_SS_SIZE_LOG2: u32 = 15;
/// Span below the initial SP treated as main stack when validating a config.
pub const MAIN_STACK_RESERVE: u32 = 0x1_0000;
pub const ENTRY_BYTES: u32 = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum SequenceKind {
    Naive,
    #[default]
    Optimal,
}

impl SequenceKind {
    /// Scratch registers a normal prologue/epilogue needs.
    pub fn scratch_needed(self) -> usize {
        match self {
            SequenceKind::Optimal => 2,
            SequenceKind::Naive => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ShadowStackConfig {
    pub ss_start: u32,
    /// Region size as a power of two; also the MASK0 value.
    pub ss_size_log2: u32,
}

impl Default for ShadowStackConfig {
    fn default() -> Self {
        ShadowStackConfig { ss_start: DEFAULT_SS_START, ss_size_log2: DEFAULT_SS_SIZE_LOG2 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("shadow stack size 2^{0} is outside 2^2..=2^24")]
    SizeOutOfRange(u32),
    #[error("shadow stack start {start:#010x} is not aligned to its size {size:#x}")]
    Misaligned { start: u32, size: u32 },
    #[error("shadow stack [{start:#010x}, {end:#010x}) overlaps {what}")]
    Overlap { start: u32, end: u32, what: &'static str },
}

impl ShadowStackConfig {
    pub fn new(ss_start: u32, ss_size_log2: u32) -> Result<Self, ConfigError> {
        let c = ShadowStackConfig { ss_start, ss_size_log2 };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(2..=24).contains(&self.ss_size_log2) {
            return Err(ConfigError::SizeOutOfRange(self.ss_size_log2));
        }
        let (start, size) = (self.ss_start, self.ss_size());
        if start % size != 0 {
            return Err(ConfigError::Misaligned { start, size });
        }
        let end = self.ss_end();
        let overlaps = |lo: u32, hi: u32| start < hi && lo < end;
        if end > SYSTEM_BASE || start >= SYSTEM_BASE || overlaps(DwtUnit::comp_address(0), DEMCR + 4) {
            return Err(ConfigError::Overlap { start, end, what: "the system region" });
        }
        if overlaps(INITIAL_SP - MAIN_STACK_RESERVE, INITIAL_SP) {
            return Err(ConfigError::Overlap { start, end, what: "the main stack" });
        }
        Ok(())
    }

    pub fn ss_size(&self) -> u32 {
        1 << self.ss_size_log2
    }

    /// One past the last shadow byte.
    pub fn ss_end(&self) -> u32 {
        self.ss_start + self.ss_size()
    }

    /// Return addresses the region can hold.
    pub fn capacity(&self) -> u32 {
        self.ss_size() / ENTRY_BYTES
    }

    pub fn contains(&self, address: u32) -> bool {
        (self.ss_start..self.ss_end()).contains(&address)
    }

    /// COMP1 holds the shadow stack pointer.
    pub fn ssp_register_address(&self) -> u32 {
        DwtUnit::comp_address(1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum InstrumentErrorKind {
    #[error("no scratch register can be freed: every GPR is live and SP is rewritten in the body")]
    NoUsableScratch,
    #[error("computed return `bx {0}` is not supported")]
    ComputedReturn(Reg),
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("function `{function}`: {kind}")]
pub struct InstrumentError {
    pub function: String,
    pub kind: InstrumentErrorKind,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InstrumentationPlan {
    pub function: String,
    pub kind: FunctionKind,
    pub sequence_kind: SequenceKind,
    pub free_gprs: Vec<Reg>,
    pub free_gpr_count: usize,
    pub scratch: Vec<Reg>,
    pub reserved_gprs: Vec<Reg>,
    pub return_sites: usize,
    pub inserted_prologue: Vec<String>,
    pub inserted_epilogue: Vec<String>,
    pub size_before: u32,
    pub size_after: u32,
    pub size_delta_bytes: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SizeReport {
    pub baseline_bytes: u32,
    pub instrumented_bytes: u32,
    pub delta_bytes: i64,
    pub overhead_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Instrumented {
    #[serde(skip)]
    pub program: AsmProgram,
    pub config: ShadowStackConfig,
    pub plans: Vec<InstrumentationPlan>,
    pub size: SizeReport,
}

/// Percentage rounded to two decimals.
pub fn overhead_pct(baseline: f64, instrumented: f64) -> f64 {
    if baseline == 0.0 {
        return 0.0;
    }
    ((instrumented - baseline) / baseline * 10_000.0).round() / 100.0
}

struct Rewriter<'a> {
    kind: SequenceKind,
    labels: &'a mut HashSet<String>,
}

impl Rewriter<'_> {
    fn fresh_label(&mut self, function: &str) -> String {
        let mut n = 0;
        loop {
            let l = format!("__ws_{function}_{n}");
            if self.labels.insert(l.clone()) {
                return l;
            }
            n += 1;
        }
    }

    fn check_returns(f: &AsmFunction) -> Result<(), InstrumentError> {
        for i in f.instructions() {
            if let Instruction::Bx { rm } = i {
                if *rm != Reg::LR {
                    return Err(InstrumentError {
                        function: f.name.clone(),
                        kind: InstrumentErrorKind::ComputedReturn(*rm),
                    });
                }
            }
        }
        Ok(())
    }

    fn normal(&mut self, f: &AsmFunction) -> Result<(AsmFunction, InstrumentationPlan), InstrumentError> {
        Self::check_returns(f)?;
        let assignment = assign_scratch(f, self.kind.scratch_needed()).ok_or_else(|| InstrumentError {
            function: f.name.clone(),
            kind: InstrumentErrorKind::NoUsableScratch,
        })?;
        let pro = sequences::prologue(self.kind, &assignment.roles, assignment.reserved);
        let epi = sequences::epilogue(self.kind, &assignment.roles, assignment.reserved);

        let mut body: Vec<BodyItem> = pro.iter().cloned().map(BodyItem::Instr).collect();
        let mut return_sites = 0;
        for item in &f.body {
            let BodyItem::Instr(line) = item else {
                body.push(item.clone());
                continue;
            };
            match &line.instr {
                Instruction::Pop { regs } if regs.contains(Reg::PC) => {
                    return_sites += 1;
                    let rest = regs.without(Reg::PC);
                    if !rest.is_empty() {
                        body.push(BodyItem::Instr(Line {
                            instr: Instruction::Pop { regs: rest },
                            line: line.line,
                            tag: Tag::Converted { replaced_cycles: 0 },
                        }));
                    }
                    // Drop the stacked LR slot; the value itself is untrusted.
                    body.push(BodyItem::Instr(Line::inserted(
                        Instruction::AddSp { imm: 4 },
                        asm::Phase::Epilogue,
                        asm::Category::Other,
                    )));
                    body.extend(epi.iter().cloned().map(BodyItem::Instr));
                    body.push(BodyItem::Instr(Line {
                        instr: Instruction::Bx { rm: Reg::LR },
                        line: line.line,
                        tag: Tag::Converted { replaced_cycles: line.instr.cycles() },
                    }));
                }
                Instruction::Bx { .. } => {
                    return_sites += 1;
                    body.extend(epi.iter().cloned().map(BodyItem::Instr));
                    body.push(item.clone());
                }
                _ => body.push(item.clone()),
            }
        }
        let out = AsmFunction { name: f.name.clone(), kind: f.kind, body, line: f.line };
        let plan = self.plan(f, &out, &assignment, return_sites, &pro, &epi);
        Ok((out, plan))
    }

    fn handler(&mut self, f: &AsmFunction) -> Result<(AsmFunction, InstrumentationPlan), InstrumentError> {
        Self::check_returns(f)?;
        let assignment = assign_scratch(f, 3).ok_or_else(|| InstrumentError {
            function: f.name.clone(),
            kind: InstrumentErrorKind::NoUsableScratch,
        })?;
        let skip = self.fresh_label(&f.name);
        let (pro, at) = sequences::handler_prologue(&assignment.roles, assignment.reserved, &skip);
        let mut body: Vec<BodyItem> = Vec::new();
        splice(&mut body, &pro, at, skip);

        let mut return_sites = 0;
        let mut epi_shape = Vec::new();
        for item in &f.body {
            let BodyItem::Instr(line) = item else {
                body.push(item.clone());
                continue;
            };
            let is_pop_pc = matches!(&line.instr, Instruction::Pop { regs } if regs.contains(Reg::PC));
            if !is_pop_pc && !matches!(line.instr, Instruction::Bx { .. }) {
                body.push(item.clone());
                continue;
            }
            return_sites += 1;
            let mut replaced = 0;
            if let Instruction::Pop { regs } = &line.instr {
                // Keep the stacked EXC_RETURN in LR so the skip path still
                // returns correctly before initialization.
                body.push(BodyItem::Instr(Line {
                    instr: Instruction::Pop { regs: regs.without(Reg::PC).with(Reg::LR) },
                    line: line.line,
                    tag: Tag::Converted { replaced_cycles: 0 },
                }));
                replaced = line.instr.cycles();
            }
            let skip = self.fresh_label(&f.name);
            let (epi, at) = sequences::handler_epilogue(&assignment.roles, assignment.reserved, &skip);
            splice(&mut body, &epi, at, skip);
            epi_shape = epi;
            body.push(BodyItem::Instr(Line {
                instr: Instruction::Bx { rm: Reg::LR },
                line: line.line,
                tag: if is_pop_pc { Tag::Converted { replaced_cycles: replaced } } else { Tag::Original },
            }));
        }
        let out = AsmFunction { name: f.name.clone(), kind: f.kind, body, line: f.line };
        let plan = self.plan(f, &out, &assignment, return_sites, &pro, &epi_shape);
        Ok((out, plan))
    }

    fn plan(
        &self,
        before: &AsmFunction,
        after: &AsmFunction,
        assignment: &ScratchAssignment,
        return_sites: usize,
        pro: &[Line],
        epi: &[Line],
    ) -> InstrumentationPlan {
        let free: Vec<Reg> = analyze_free_gprs(before).iter().collect();
        let text = |v: &[Line]| v.iter().map(|l| l.instr.to_string()).collect();
        let (size_before, size_after) = (before.code_size(), after.code_size());
        InstrumentationPlan {
            function: before.name.clone(),
            kind: before.kind,
            sequence_kind: self.kind,
            free_gpr_count: free.len(),
            free_gprs: free,
            scratch: assignment.roles.clone(),
            reserved_gprs: assignment.reserved.iter().collect(),
            return_sites,
            inserted_prologue: text(pro),
            inserted_epilogue: text(epi),
            size_before,
            size_after,
            size_delta_bytes: size_after as i64 - size_before as i64,
        }
    }
}

fn splice(body: &mut Vec<BodyItem>, lines: &[Line], label_at: usize, label: String) {
    for (i, l) in lines.iter().enumerate() {
        if i == label_at {
            body.push(BodyItem::Label(label.clone()));
        }
        body.push(BodyItem::Instr(l.clone()));
    }
    if label_at == lines.len() {
        body.push(BodyItem::Label(label));
    }
}

fn program_labels(program: &AsmProgram) -> HashSet<String> {
    let mut labels = HashSet::new();
    for item in &program.items {
        match item {
            asm::TopItem::Label(l) => {
                labels.insert(l.clone());
            }
            asm::TopItem::Function(f) => {
                labels.insert(f.name.clone());
                for b in &f.body {
                    if let BodyItem::Label(l) = b {
                        labels.insert(l.clone());
                    }
                }
            }
            _ => {}
        }
    }
    labels
}

/// Rewrite every Normal and ExceptionHandler function. Fails as a whole on
/// the first per-function error.
pub fn instrument_program(
    program: &AsmProgram,
    config: &ShadowStackConfig,
    kind: SequenceKind,
) -> Result<Instrumented, InstrumentError> {
    let mut labels = program_labels(program);
    let mut rw = Rewriter { kind, labels: &mut labels };
    let mut out = program.clone();
    let mut plans = Vec::new();
    for f in out.functions_mut() {
        let (new, plan) = match f.kind {
            FunctionKind::TrustedHal => continue,
            FunctionKind::Normal => rw.normal(f)?,
            FunctionKind::ExceptionHandler => rw.handler(f)?,
        };
        log::debug!("instrumented {} (+{} bytes)", plan.function, plan.size_delta_bytes);
        *f = new;
        plans.push(plan);
    }
    let baseline_bytes: u32 = program.functions().map(AsmFunction::code_size).sum();
    let instrumented_bytes: u32 = out.functions().map(AsmFunction::code_size).sum();
    let size = SizeReport {
        baseline_bytes,
        instrumented_bytes,
        delta_bytes: instrumented_bytes as i64 - baseline_bytes as i64,
        overhead_pct: overhead_pct(baseline_bytes as f64, instrumented_bytes as f64),
    };
    Ok(Instrumented { program: out, config: *config, plans, size })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::parse;

    const FIG: &str = ".func f\npush {r6, r7, lr}\nmov r0, #0\nmov r1, r0\nmov r2, r0\nmov r3, r0\nmov r5, r0\nmov r8, r0\nmov r9, r0\nmov r10, r0\nmov r11, r0\nbl f\npop {r6, r7, pc}\n.endfunc";

    #[test]
    fn config_defaults() {
        let c = ShadowStackConfig::default();
        assert_eq!(c.capacity(), 8192);
        assert_eq!(c.ssp_register_address(), 0xE000_1030);
        assert!(c.validate().is_ok());
        assert!(ShadowStackConfig::new(0x00E0_0004, 15).is_err());
        assert!(ShadowStackConfig::new(0x2001_0000, 15).is_err());
        assert!(ShadowStackConfig::new(0xE000_0000, 12).is_err());
        assert_eq!(ShadowStackConfig::new(0x00E0_0000, 3).unwrap().capacity(), 2);
    }

    #[test]
    fn pop_pc_split() {
        let p = parse(FIG).unwrap();
        let out = instrument_program(&p, &ShadowStackConfig::default(), SequenceKind::Optimal).unwrap();
        let f = out.program.functions().next().unwrap();
        let text: Vec<String> = f.instructions().map(|i| i.to_string()).collect();
        let tail = &text[text.len() - 11..];
        assert_eq!(
            tail,
            [
                "pop {r6, r7}",
                "add sp, #4",
                "push {r4}",
                "movw r12, #4144",
                "movt r12, #57344",
                "ldr.w r4, [r12]",
                "subw r4, r4, #4",
                "ldr.w lr, [r4]",
                "str.w r4, [r12]",
                "pop {r4}",
                "bx lr",
            ]
        );
        assert_eq!(out.plans[0].reserved_gprs, vec![Reg::R4]);
        assert_eq!(out.plans[0].return_sites, 1);
    }

    #[test]
    fn hal_untouched_and_additive_sizes() {
        let src = ".func a\nbx lr\n.endfunc\n.func b\npush {lr}\npop {pc}\n.endfunc\n.func c\nbx lr\n.endfunc\n.func h hal\nbx lr\n.endfunc";
        let p = parse(src).unwrap();
        let out = instrument_program(&p, &ShadowStackConfig::default(), SequenceKind::Optimal).unwrap();
        assert_eq!(out.plans.len(), 3);
        assert_eq!(out.program.function("h"), p.function("h"));
        let sum: i64 = out.plans.iter().map(|p| p.size_delta_bytes).sum();
        assert_eq!(sum, out.size.delta_bytes);
        // A bare `pop {pc}` leaves no pop behind.
        let b: Vec<String> = out.program.function("b").unwrap().instructions().map(|i| i.to_string()).collect();
        assert!(!b.iter().any(|t| t.starts_with("pop {}")));
    }

    #[test]
    fn computed_return_rejected() {
        let p = parse(".func a\nbx r3\n.endfunc").unwrap();
        let e = instrument_program(&p, &ShadowStackConfig::default(), SequenceKind::Optimal).unwrap_err();
        assert_eq!(e.kind, InstrumentErrorKind::ComputedReturn(Reg::R3));
    }

    #[test]
    fn handler_labels_unique_and_reparse() {
        let src = ".func UsageFault_Handler handler\npush {r7, lr}\ncmp r7, #0\nbeq x\npop {r7, pc}\nx:\npop {r7, pc}\n.endfunc";
        let p = parse(src).unwrap();
        let out = instrument_program(&p, &ShadowStackConfig::default(), SequenceKind::Optimal).unwrap();
        let text = asm::print(&out.program);
        let again = parse(&text).unwrap();
        assert_eq!(again.functions().next().unwrap().instructions().count(), out.program.functions().next().unwrap().instructions().count());
        assert_eq!(out.plans[0].return_sites, 2);
    }
}
