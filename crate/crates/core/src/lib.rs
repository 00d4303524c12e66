//! Watchpoint-protected shadow stack for Cortex-M class cores, modeled on a
//! deterministic emulator.

pub mod asm;
pub mod dwt;
pub mod exceptions;
pub mod machine;
pub mod instrument;
pub mod protect;
pub mod harness;
pub mod report;
pub mod cli;
