//! Data watchpoint unit: four comparator groups with address matching.
//!
//! The register window covers `DWT_CTRL` through comparator group 3:
//!
//! ```text
//! 0xE0001000  CTRL
//! 0xE0001004  CYCCNT (alias of the machine cycle counter)
//! 0xE0001020  COMP0   +4 MASK0   +8 FUNCTION0   +12 reserved
//! 0xE0001030  COMP1   ...                                (group 1)
//! ...                                                    (groups 2, 3)
//! ```

use serde::{Deserialize, Serialize};

/// Address of COMP0.
pub const DWT_BASE: u32 = 0xE000_1020;
pub const DWT_CTRL: u32 = 0xE000_1000;
pub const DWT_CYCCNT: u32 = 0xE000_1004;
pub const WINDOW_START: u32 = DWT_BASE - 0x20;
pub const WINDOW_END: u32 = DWT_BASE + 0x40;
pub const GROUP_STRIDE: u32 = 16;
pub const NUM_GROUPS: usize = 4;

pub const FUNCTION_DISABLED: u32 = 0x0;
pub const FUNCTION_READ: u32 = 0x5;
pub const FUNCTION_WRITE: u32 = 0x6;
pub const FUNCTION_READ_WRITE: u32 = 0x7;

pub type ComparatorId = u8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccessKind {
    Read,
    Write,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchingMode {
    /// ARMv7-M: COMP plus a count of ignored low address bits.
    #[default]
    V7Mask,
    /// ARMv8-M: group `g` holds the lower bound, group `g + 1` the upper bound.
    V8Range,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ComparatorGroup {
    pub comp: u32,
    /// Ignored low address bits; only the low 5 bits are implemented.
    pub mask: u32,
    pub function: u32,
}

impl ComparatorGroup {
    /// Whether FUNCTION enables matching for this access kind. Unknown
    /// function encodings are kept but behave as disabled.
    pub fn enables(&self, kind: AccessKind) -> bool {
        match (self.function & 0xF, kind) {
            (FUNCTION_READ, AccessKind::Read) | (FUNCTION_WRITE, AccessKind::Write) => true,
            (FUNCTION_READ_WRITE, _) => true,
            _ => false,
        }
    }

    fn covers_v7(&self, byte: u32) -> bool {
        let m = self.mask & 0x1F;
        (byte >> m) == (self.comp >> m)
    }
}

/// A decoded register slot in the DWT window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DwtRegister {
    Ctrl,
    Cyccnt,
    Comp(usize),
    Mask(usize),
    Function(usize),
    Reserved,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WriteOutcome {
    Updated(DwtRegister),
    Ignored,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DwtUnit {
    pub groups: [ComparatorGroup; NUM_GROUPS],
    pub mode: MatchingMode,
    pub ctrl: u32,
}

impl DwtUnit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_mode(mode: MatchingMode) -> Self {
        DwtUnit { mode, ..Self::default() }
    }

    pub fn in_window(address: u32) -> bool {
        (WINDOW_START..WINDOW_END).contains(&address)
    }

    pub fn decode(address: u32) -> Option<DwtRegister> {
        if !Self::in_window(address) {
            return None;
        }
        Some(match address {
            DWT_CTRL => DwtRegister::Ctrl,
            DWT_CYCCNT => DwtRegister::Cyccnt,
            a if a >= DWT_BASE && a % 4 == 0 => {
                let off = a - DWT_BASE;
                let g = (off / GROUP_STRIDE) as usize;
                match off % GROUP_STRIDE {
                    0 => DwtRegister::Comp(g),
                    4 => DwtRegister::Mask(g),
                    8 => DwtRegister::Function(g),
                    _ => DwtRegister::Reserved,
                }
            }
            _ => DwtRegister::Reserved,
        })
    }

    /// Lowest comparator id matching the access, if any. A multi-byte access
    /// matches when any byte it covers matches.
    pub fn match_access(&self, address: u32, access: AccessKind, size_bytes: u32) -> Option<ComparatorId> {
        debug_assert!(matches!(size_bytes, 1 | 2 | 4));
        let bytes = || (0..size_bytes).map(move |i| address.wrapping_add(i));
        match self.mode {
            MatchingMode::V7Mask => self
                .groups
                .iter()
                .position(|g| g.enables(access) && bytes().any(|b| g.covers_v7(b)))
                .map(|i| i as ComparatorId),
            MatchingMode::V8Range => (0..NUM_GROUPS - 1).step_by(2).find_map(|g| {
                let (lo, hi) = (self.groups[g].comp, self.groups[g + 1].comp);
                let hit = self.groups[g].enables(access) && bytes().any(|b| lo <= b && b < hi);
                hit.then_some(g as ComparatorId)
            }),
        }
    }

    /// Read a register in the window; `cycles` backs CYCCNT.
    pub fn mmio_read(&self, address: u32, cycles: u64) -> u32 {
        match Self::decode(address) {
            Some(DwtRegister::Ctrl) => self.ctrl,
            Some(DwtRegister::Cyccnt) => cycles as u32,
            Some(DwtRegister::Comp(g)) => self.groups[g].comp,
            Some(DwtRegister::Mask(g)) => self.groups[g].mask,
            Some(DwtRegister::Function(g)) => self.groups[g].function,
            Some(DwtRegister::Reserved) | None => 0,
        }
    }

    /// Write a register. Takes effect for the next access check only.
    pub fn mmio_write(&mut self, address: u32, value: u32) -> WriteOutcome {
        let reg = match Self::decode(address) {
            Some(r) => r,
            None => return WriteOutcome::Ignored,
        };
        match reg {
            DwtRegister::Ctrl => self.ctrl = value,
            DwtRegister::Comp(g) => self.groups[g].comp = value,
            DwtRegister::Mask(g) => self.groups[g].mask = value & 0x1F,
            DwtRegister::Function(g) => self.groups[g].function = value,
            // The cycle counter is owned by the machine.
            DwtRegister::Cyccnt | DwtRegister::Reserved => return WriteOutcome::Ignored,
        }
        WriteOutcome::Updated(reg)
    }

    pub fn comp_address(group: usize) -> u32 {
        DWT_BASE + GROUP_STRIDE * group as u32
    }

    pub fn mask_address(group: usize) -> u32 {
        Self::comp_address(group) + 4
    }

    pub fn function_address(group: usize) -> u32 {
        Self::comp_address(group) + 8
    }
}
