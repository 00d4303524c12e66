use std::collections::BTreeMap;

use serde::Serialize;

use super::programs::{exception_program, microbench_program, recursion_program, scenario_program, EsfWord, Payload};
use super::{run_program, HarnessError, InitMode, Outcome, Raise, RunConfig, RunResult};
use crate::asm::{parse, Category, Phase};
use crate::exceptions::ExcId;
use crate::machine::Reg;
use crate::protect::{ViolationPolicy, ViolationRecord};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScenarioResult {
    pub outcome: Outcome,
    pub final_pc: u32,
    pub cycle_total: u64,
    /// Inserted cycles per category; sums to the instrumentation total.
    pub cycle_breakdown: BTreeMap<Category, u64>,
    pub violations: Vec<ViolationRecord>,
    pub reached_baz: bool,
    pub console: Vec<u32>,
}

impl From<&RunResult> for ScenarioResult {
    fn from(r: &RunResult) -> Self {
        ScenarioResult {
            outcome: r.outcome,
            final_pc: r.final_pc,
            cycle_total: r.cycles,
            cycle_breakdown: r.cycle_breakdown(),
            violations: r.violations.clone(),
            reached_baz: r.visited("baz"),
            console: r.console.clone(),
        }
    }
}

fn run_source(src: &str, config: &RunConfig) -> Result<RunResult, HarnessError> {
    run_program(&parse(src)?, config)
}

pub fn run_scenario_1(protected: bool) -> Result<ScenarioResult, HarnessError> {
    run_scenario_1_with(&Payload::Overflow { offset: 3 }, protected).map(|r| ScenarioResult::from(&r))
}

pub fn run_scenario_1_with(payload: &Payload, protected: bool) -> Result<RunResult, HarnessError> {
    let config = RunConfig { protected, ..RunConfig::default() };
    run_source(&scenario_program(payload, 0), &config)
}

/// Aim `bar`'s store at `bar`'s own live shadow entry: `main`, `foo` and
/// `bar` each hold one, so that is the third slot.
pub fn run_scenario_2(policy: ViolationPolicy) -> Result<ScenarioResult, HarnessError> {
    let target = crate::instrument::DEFAULT_SS_START + 8;
    run_scenario_2_at(target, policy).map(|r| ScenarioResult::from(&r))
}

pub fn run_scenario_2_at(target: u32, policy: ViolationPolicy) -> Result<RunResult, HarnessError> {
    let config = RunConfig { protected: true, policy, ..RunConfig::default() };
    run_source(&scenario_program(&Payload::BazWord, target), &config)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PhaseBreakdown {
    pub total: u64,
    pub cycles: BTreeMap<Category, u64>,
}

impl PhaseBreakdown {
    fn of(r: &RunResult, phase: Phase) -> Self {
        let cycles: BTreeMap<Category, u64> =
            Category::ALL.iter().map(|c| (*c, r.accounting.category(phase, *c))).collect();
        PhaseBreakdown { total: cycles.values().sum(), cycles }
    }

    /// Share of `category` in percent.
    pub fn share(&self, category: Category) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        100.0 * self.cycles[&category] as f64 / self.total as f64
    }

    /// Strictly largest category, if there is one.
    pub fn largest(&self) -> Option<Category> {
        let max = *self.cycles.values().max()?;
        let mut top = self.cycles.iter().filter(|(_, v)| **v == max);
        let first = top.next().map(|(c, _)| *c);
        if top.next().is_some() {
            None
        } else {
            first
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MicrobenchResult {
    pub prologue: PhaseBreakdown,
    pub epilogue: PhaseBreakdown,
    pub scenario: ScenarioResult,
}

/// Cycle attribution of one prologue and one epilogue.
pub fn run_microbenchmark(protected: bool) -> Result<MicrobenchResult, HarnessError> {
    let config = RunConfig { protected, ..RunConfig::default() };
    let r = run_source(&microbench_program(), &config)?;
    Ok(MicrobenchResult {
        prologue: PhaseBreakdown::of(&r, Phase::Prologue),
        epilogue: PhaseBreakdown::of(&r, Phase::Epilogue),
        scenario: ScenarioResult::from(&r),
    })
}

/// Registers as seen at the fault site and right after the handler
/// returned.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ExceptionTestResult {
    pub outcome: Outcome,
    pub resumed_at: Option<u32>,
    pub expected_resume: u32,
    pub before: [u32; 3],
    pub after: Option<[u32; 3]>,
}

impl ExceptionTestResult {
    /// Resumed at the instruction after the fault site with xPSR, LR and
    /// R12 as they were.
    pub fn intact(&self) -> bool {
        self.outcome == Outcome::SafeReturn
            && self.resumed_at == Some(self.expected_resume)
            && self.after == Some(self.before)
    }
}

/// UsageFault round trip with an optional tampering handler.
pub fn run_exception_test(tamper: Option<EsfWord>, protected: bool) -> Result<ExceptionTestResult, HarnessError> {
    let program = parse(&exception_program(tamper))?;
    let config = RunConfig { protected, ..RunConfig::default() };
    let full = run_program(&program, &config)?;
    // Replay step by step to capture state around the handler. The run is
    // deterministic, so this sees exactly what `full` saw.
    let r = trace_exception(&program, &config)?;
    Ok(ExceptionTestResult { outcome: full.outcome, ..r })
}

fn snapshot(m: &crate::machine::Machine) -> [u32; 3] {
    [m.xpsr & 0xFFFF_FE00, m.reg(Reg::LR), m.reg(Reg::R12)]
}

fn trace_exception(
    program: &crate::asm::AsmProgram,
    config: &RunConfig,
) -> Result<ExceptionTestResult, HarnessError> {
    use crate::instrument::instrument_program;
    use crate::machine::{EventKind, Machine, NoHooks};
    let image = if config.protected {
        instrument_program(program, &config.shadow, config.sequence)?.program
    } else {
        program.clone()
    };
    let mut m = Machine::load(&image)?;
    if config.protected {
        crate::protect::init_write_protection(&mut m, &config.shadow);
    }
    let site = m.label("fault_site").expect("fault_site label");
    let expected_resume = m.label("resume").expect("resume label");
    let mut before = None;
    let mut result = ExceptionTestResult {
        outcome: Outcome::Fault,
        resumed_at: None,
        expected_resume,
        before: [0; 3],
        after: None,
    };
    while !m.halted && m.step_index < config.max_steps {
        if m.pc() == site && before.is_none() {
            before = Some(snapshot(&m));
        }
        let ev = m.step(&mut NoHooks);
        m.pending_hits.clear();
        if ev.kind == EventKind::ExceptionReturned {
            result.resumed_at = Some(m.pc());
            result.after = Some(snapshot(&m));
            break;
        }
    }
    result.before = before.unwrap_or_default();
    Ok(result)
}

/// SysTick taken before protection is armed: the handler's guard skips
/// every shadow access.
pub fn run_preinit_handler_test() -> Result<RunResult, HarnessError> {
    let config = RunConfig {
        protected: true,
        init: InitMode::AtStep(1),
        raises: vec![Raise { exc: ExcId::SysTick, at_step: 0 }],
        ..RunConfig::default()
    };
    let r = run_source(&exception_program(None), &config)?;
    Ok(r)
}

/// Recursion `depth` frames deep under protection.
pub fn run_recursion(depth: u32, config: &RunConfig) -> Result<RunResult, HarnessError> {
    run_source(&recursion_program(depth), config)
}
