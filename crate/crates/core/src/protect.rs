//! Runtime side of the protection: comparator setup, the DEMCR lock and the
//! DebugMon violation policy.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dwt::{AccessKind, DwtUnit, FUNCTION_WRITE};
use crate::exceptions::ExcId;
use crate::instrument::ShadowStackConfig;
use crate::machine::{EventKind, ExecutionEvent, HaltReason, Machine, WatchpointHit, DEMCR, DEMCR_MON_EN, DEMCR_TRCENA};

/// MASK2: two bytes starting at DEMCR.
pub const DEMCR_MASK: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationPolicy {
    #[default]
    Reset,
    /// Log, suppress the write, keep running.
    Report,
}

impl FromStr for ViolationPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "reset" => Ok(ViolationPolicy::Reset),
            "report" => Ok(ViolationPolicy::Report),
            other => Err(format!("unknown policy `{other}` (expected reset or report)")),
        }
    }
}

impl fmt::Display for ViolationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationPolicy::Reset => "reset",
            ViolationPolicy::Report => "report",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationRecord {
    pub step_index: u64,
    pub pc: u32,
    pub data_address: u32,
    pub comparator_id: u8,
    pub suppressed_value: u32,
}

impl From<&WatchpointHit> for ViolationRecord {
    fn from(h: &WatchpointHit) -> Self {
        ViolationRecord {
            step_index: h.step_index,
            pc: h.pc,
            data_address: h.address,
            comparator_id: h.comparator,
            suppressed_value: h.value,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitOutcome {
    Initialized,
    /// Protection was already armed; nothing changed.
    AlreadyInitialized,
}

/// Arm the comparators the way the reset path does:
///
/// | group | COMP          | MASK | FUNCTION |
/// |-------|---------------|------|----------|
/// | 0     | ss_start      | log2 | write    |
/// | 1     | ss_start (ssp)| -    | -        |
/// | 2     | DEMCR         | 1    | write    |
///
/// then set DEMCR.MON_EN. Runs as trusted code, so it bypasses the
/// watchpoints it is setting up.
pub fn init_write_protection(m: &mut Machine, config: &ShadowStackConfig) -> InitOutcome {
    if is_protection_initialized(m) {
        log::warn!("write protection already initialized; ignoring");
        return InitOutcome::AlreadyInitialized;
    }
    let w = |m: &mut Machine, addr, v| {
        m.dwt.mmio_write(addr, v);
    };
    w(m, DwtUnit::comp_address(0), config.ss_start);
    w(m, DwtUnit::mask_address(0), config.ss_size_log2);
    w(m, DwtUnit::function_address(0), FUNCTION_WRITE);
    w(m, DwtUnit::comp_address(1), config.ss_start);
    w(m, DwtUnit::comp_address(2), DEMCR);
    w(m, DwtUnit::mask_address(2), DEMCR_MASK);
    w(m, DwtUnit::function_address(2), FUNCTION_WRITE);
    m.ssp_guard = Some((config.ss_start, config.ss_end()));
    m.demcr |= DEMCR_MON_EN | DEMCR_TRCENA;
    InitOutcome::Initialized
}

/// Initialization is keyed on DEMCR.MON_EN alone: FUNCTION0 is legitimately
/// zero inside every prologue.
pub fn is_protection_initialized(m: &Machine) -> bool {
    m.mon_enabled()
}

/// Internal DebugMon: the write has already been suppressed by the core;
/// apply the policy and record it.
pub fn debugmon_dispatch(
    m: &mut Machine,
    hit: &WatchpointHit,
    policy: ViolationPolicy,
    log: &mut Vec<ViolationRecord>,
) -> ExecutionEvent {
    let at_pc = hit.pc;
    if hit.access != AccessKind::Write {
        return ExecutionEvent {
            kind: EventKind::WatchpointHit { comparator: hit.comparator, address: hit.address, access: hit.access },
            at_pc,
        };
    }
    log.push(ViolationRecord::from(hit));
    log::info!(
        "write to {:#010x} blocked by comparator {} at pc {:#010x}",
        hit.address,
        hit.comparator,
        hit.pc
    );
    match policy {
        ViolationPolicy::Reset => {
            m.halt(HaltReason::Reset);
            ExecutionEvent { kind: EventKind::Halted(HaltReason::Reset), at_pc }
        }
        ViolationPolicy::Report => ExecutionEvent {
            kind: EventKind::WatchpointHit { comparator: hit.comparator, address: hit.address, access: hit.access },
            at_pc,
        },
    }
}

/// The exception the core would vector to on a hit.
pub const DEBUGMON: ExcId = ExcId::DebugMon;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::parse;
    use crate::machine::{NoHooks, Size};

    fn machine() -> Machine {
        Machine::load(&parse(".func main\nnop\n.endfunc").unwrap()).unwrap()
    }

    #[test]
    fn init_values() {
        let mut m = machine();
        assert!(!is_protection_initialized(&m));
        assert_eq!(init_write_protection(&mut m, &ShadowStackConfig::default()), InitOutcome::Initialized);
        assert!(is_protection_initialized(&m));
        assert_eq!(m.peek_u32(0xE000_1020), 0x00E0_0000);
        assert_eq!(m.peek_u32(0xE000_1024), 15);
        assert_eq!(m.peek_u32(0xE000_1028), 6);
        assert_eq!(m.peek_u32(0xE000_1030), 0x00E0_0000);
        assert_eq!(m.peek_u32(0xE000_1040), DEMCR);
        assert_eq!(m.peek_u32(0xE000_1044), 1);
        assert_eq!(m.peek_u32(0xE000_1048), 6);
        assert_eq!(init_write_protection(&mut m, &ShadowStackConfig::default()), InitOutcome::AlreadyInitialized);
    }

    #[test]
    fn demcr_write_traps_and_is_suppressed() {
        let mut m = machine();
        init_write_protection(&mut m, &ShadowStackConfig::default());
        m.write(&mut NoHooks, DEMCR, Size::Word, 0).unwrap();
        assert!(m.mon_enabled());
        let hit = m.pending_hits.pop_front().unwrap();
        assert_eq!((hit.comparator, hit.address), (2, DEMCR));
        let mut log = Vec::new();
        let ev = debugmon_dispatch(&mut m, &hit, ViolationPolicy::Reset, &mut log);
        assert_eq!(ev.kind, EventKind::Halted(HaltReason::Reset));
        assert_eq!(log.len(), 1);
    }

    #[test]
    fn shadow_writes_silent_before_init() {
        let mut m = machine();
        m.write(&mut NoHooks, 0x00E0_0008, Size::Word, 5).unwrap();
        assert!(m.pending_hits.is_empty());
        assert_eq!(m.memory.read_u32(0x00E0_0008), 5);
    }

    #[test]
    fn report_continues() {
        let mut m = machine();
        init_write_protection(&mut m, &ShadowStackConfig::default());
        m.write(&mut NoHooks, 0x00E0_0008, Size::Word, 5).unwrap();
        assert_eq!(m.memory.read_u32(0x00E0_0008), 0);
        let hit = m.pending_hits.pop_front().unwrap();
        let mut log = Vec::new();
        debugmon_dispatch(&mut m, &hit, ViolationPolicy::Report, &mut log);
        assert!(!m.halted);
        assert_eq!(log[0].suppressed_value, 5);
    }
}
