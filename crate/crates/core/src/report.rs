use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::asm::{AsmFunction, Category};
use crate::harness::{Outcome, RunResult};
use crate::instrument::overhead_pct;
use crate::machine::HaltReason;
use crate::protect::ViolationRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Baseline,
    Protected,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub program: String,
    pub mode: RunMode,
    pub outcome: Outcome,
    pub halt_reason: Option<HaltReason>,
    pub fault: Option<String>,
    pub final_pc: u32,
    pub steps: u64,
    pub cycles: u64,
    pub code_size_bytes: u32,
    pub size_overhead_pct: f64,
    pub violations: Vec<ViolationRecord>,
    pub cycle_breakdown: BTreeMap<Category, u64>,
    pub events: Vec<String>,
}

impl RunReport {
    pub fn new(program: &str, r: &RunResult) -> Self {
        let (mode, code_size_bytes, size_overhead_pct) = match &r.instrumented {
            Some(i) => (RunMode::Protected, i.size.instrumented_bytes, i.size.overhead_pct),
            None => {
                let bytes = r.machine.code.layout.code_size;
                (RunMode::Baseline, bytes, 0.0)
            }
        };
        RunReport {
            program: program.to_string(),
            mode,
            outcome: r.outcome,
            halt_reason: r.halt_reason,
            fault: r.fault.clone(),
            final_pc: r.final_pc,
            steps: r.steps,
            cycles: r.cycles,
            code_size_bytes,
            size_overhead_pct,
            violations: r.violations.clone(),
            cycle_breakdown: r.cycle_breakdown(),
            events: r.events.clone(),
        }
    }

    /// `key=value` lines, one per field; lists repeat their key.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mode = match self.mode {
            RunMode::Baseline => "baseline",
            RunMode::Protected => "protected",
        };
        let _ = writeln!(s, "program={}", self.program);
        let _ = writeln!(s, "mode={mode}");
        let _ = writeln!(s, "outcome={}", self.outcome);
        if let Some(h) = self.halt_reason {
            let _ = writeln!(s, "halt_reason={h}");
        }
        if let Some(f) = &self.fault {
            let _ = writeln!(s, "fault={f}");
        }
        let _ = writeln!(s, "final_pc={:#010x}", self.final_pc);
        let _ = writeln!(s, "steps={}", self.steps);
        let _ = writeln!(s, "cycles={}", self.cycles);
        let _ = writeln!(s, "code_size_bytes={}", self.code_size_bytes);
        let _ = writeln!(s, "size_overhead_pct={:.2}", self.size_overhead_pct);
        for (c, v) in &self.cycle_breakdown {
            let _ = writeln!(s, "cycles_{}={v}", c.name());
        }
        for v in &self.violations {
            let _ = writeln!(
                s,
                "violation=step:{} pc:{:#010x} addr:{:#010x} comp:{} value:{:#010x}",
                v.step_index, v.pc, v.data_address, v.comparator_id, v.suppressed_value
            );
        }
        for e in &self.events {
            let _ = writeln!(s, "event={e}");
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// One row of the overhead table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub program: String,
    pub baseline_cycles: u64,
    pub protected_cycles: u64,
    pub runtime_overhead_pct: f64,
    pub baseline_bytes: u32,
    pub protected_bytes: u32,
    pub size_overhead_pct: f64,
}

impl BenchRow {
    pub fn new(program: &str, baseline: &RunResult, protected: &RunResult) -> Self {
        let baseline_bytes = baseline.machine.code.layout.functions.iter().map(|f| f.end - f.start).sum();
        let protected_bytes = protected
            .instrumented
            .as_ref()
            .map(|i| i.program.functions().map(AsmFunction::code_size).sum())
            .unwrap_or(baseline_bytes);
        BenchRow {
            program: program.to_string(),
            baseline_cycles: baseline.cycles,
            protected_cycles: protected.cycles,
            runtime_overhead_pct: overhead_pct(baseline.cycles as f64, protected.cycles as f64),
            baseline_bytes,
            protected_bytes,
            size_overhead_pct: overhead_pct(baseline_bytes as f64, protected_bytes as f64),
        }
    }

    pub const HEADER: &'static str = "program\ttime\tprotected\toverhead_%\tbytes\tprotected_bytes\toverhead_%";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.2}\t{}\t{}\t{:.2}",
            self.program,
            self.baseline_cycles,
            self.protected_cycles,
            self.runtime_overhead_pct,
            self.baseline_bytes,
            self.protected_bytes,
            self.size_overhead_pct
        )
    }
}
