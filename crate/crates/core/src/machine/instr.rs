//! The supported Thumb-2 subset.
//!
//! Instructions are kept in symbolic form: branch targets and `movw`/`movt`
//! label halves stay as names until the program is loaded. Encoding widths
//! exist only for code-size accounting; no binary encoding is produced.

use std::fmt;

use serde::{Deserialize, Serialize};

/// A core register number, 0..=15.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Reg(u8);

impl Reg {
    pub const R0: Reg = Reg(0);
    pub const R1: Reg = Reg(1);
    pub const R2: Reg = Reg(2);
    pub const R3: Reg = Reg(3);
    pub const R4: Reg = Reg(4);
    pub const R5: Reg = Reg(5);
    pub const R6: Reg = Reg(6);
    pub const R7: Reg = Reg(7);
    pub const R8: Reg = Reg(8);
    pub const R9: Reg = Reg(9);
    pub const R10: Reg = Reg(10);
    pub const R11: Reg = Reg(11);
    pub const R12: Reg = Reg(12);
    pub const SP: Reg = Reg(13);
    pub const LR: Reg = Reg(14);
    pub const PC: Reg = Reg(15);

    pub fn new(n: u8) -> Option<Reg> {
        (n < 16).then_some(Reg(n))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// R0..=R12.
    pub fn is_gpr(self) -> bool {
        self.0 <= 12
    }

    /// R0..=R7, the registers reachable from most 16-bit encodings.
    pub fn is_low(self) -> bool {
        self.0 <= 7
    }

    /// Iterate R0..=R12.
    pub fn gprs() -> impl Iterator<Item = Reg> {
        (0..13).map(Reg)
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            13 => f.write_str("sp"),
            14 => f.write_str("lr"),
            15 => f.write_str("pc"),
            n => write!(f, "r{n}"),
        }
    }
}

/// Register set for `push`/`pop`, one bit per register.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct RegList(u16);

impl RegList {
    pub const fn empty() -> Self {
        RegList(0)
    }

    pub fn from_bits(bits: u16) -> Self {
        RegList(bits)
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn contains(self, r: Reg) -> bool {
        self.0 & (1 << r.0) != 0
    }

    pub fn with(self, r: Reg) -> Self {
        RegList(self.0 | (1 << r.0))
    }

    pub fn without(self, r: Reg) -> Self {
        RegList(self.0 & !(1 << r.0))
    }

    pub fn len(self) -> u32 {
        self.0.count_ones()
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Registers in ascending order, which is also the order they sit in memory.
    pub fn iter(self) -> impl Iterator<Item = Reg> {
        (0u8..16).filter(move |i| self.0 & (1 << i) != 0).map(Reg)
    }
}

impl FromIterator<Reg> for RegList {
    fn from_iter<I: IntoIterator<Item = Reg>>(iter: I) -> Self {
        iter.into_iter().fold(RegList::empty(), RegList::with)
    }
}

impl fmt::Display for RegList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, r) in self.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{r}")?;
        }
        f.write_str("}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Size {
    Byte,
    Half,
    Word,
}

impl Size {
    pub fn bytes(self) -> u32 {
        match self {
            Size::Byte => 1,
            Size::Half => 2,
            Size::Word => 4,
        }
    }

    fn suffix(self) -> &'static str {
        match self {
            Size::Byte => "b",
            Size::Half => "h",
            Size::Word => "",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cond {
    Eq,
    Ne,
    Lt,
    Ge,
}

impl Cond {
    pub fn mnemonic(self) -> &'static str {
        match self {
            Cond::Eq => "eq",
            Cond::Ne => "ne",
            Cond::Lt => "lt",
            Cond::Ge => "ge",
        }
    }
}

/// 16-bit immediate of `movw`/`movt`: a literal or one half of a label address.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Imm16 {
    Value(u16),
    Lower(String),
    Upper(String),
}

impl fmt::Display for Imm16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Imm16::Value(v) => write!(f, "#{v}"),
            Imm16::Lower(l) => write!(f, "#:lower16:{l}"),
            Imm16::Upper(l) => write!(f, "#:upper16:{l}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Operand {
    Imm(u32),
    Reg(Reg),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Instruction {
    MovImm { rd: Reg, imm: u32, wide: bool },
    MovReg { rd: Reg, rm: Reg, wide: bool },
    Movw { rd: Reg, imm: Imm16 },
    Movt { rd: Reg, imm: Imm16 },
    Ldr { size: Size, rt: Reg, rn: Reg, offset: u32, wide: bool },
    Str { size: Size, rt: Reg, rn: Reg, offset: u32, wide: bool },
    Push { regs: RegList },
    Pop { regs: RegList },
    AddSp { imm: u32 },
    SubSp { imm: u32 },
    Addw { rd: Reg, rn: Reg, imm: u32 },
    Subw { rd: Reg, rn: Reg, imm: u32 },
    Add { rd: Reg, rn: Reg, rm: Reg },
    Sub { rd: Reg, rn: Reg, rm: Reg },
    Cmp { rn: Reg, op: Operand },
    Tst { rn: Reg, imm: u32 },
    B { target: String },
    BCond { cond: Cond, target: String },
    Bl { target: String },
    Bx { rm: Reg },
    Blx { rm: Reg },
    Svc { imm: u8 },
    /// `msr control, rn`; CONTROL is the only special register modeled.
    Msr { rn: Reg },
    /// `mrs rd, control`.
    Mrs { rd: Reg },
    Nop,
    /// Terminates the run normally.
    Bkpt { imm: u8 },
    /// Permanently undefined; raises UsageFault.
    Udf { imm: u8 },
}

/// Cycles charged for exception entry (hardware stacking).
pub const EXCEPTION_ENTRY_CYCLES: u32 = 12;
/// Cycles charged for exception return (hardware unstacking), on top of the
/// branch that triggered it.
pub const EXCEPTION_RETURN_CYCLES: u32 = 12;
/// Extra cycles when `pop` writes the PC.
pub const PIPELINE_REFILL_CYCLES: u32 = 3;

impl Instruction {
    /// Encoding width in bytes.
    pub fn width(&self) -> u32 {
        use Instruction::*;
        let narrow = match self {
            MovImm { rd, imm, wide } => !wide && rd.is_low() && *imm <= 0xFF,
            MovReg { wide, .. } => !wide,
            Movw { .. } | Movt { .. } | Addw { .. } | Subw { .. } | Bl { .. } => false,
            Ldr { size, rt, rn, offset, wide } | Str { size, rt, rn, offset, wide } => {
                !wide && narrow_mem_form(*size, *rt, *rn, *offset)
            }
            Push { regs } => regs.without(Reg::LR).bits() & !0xFF == 0,
            Pop { regs } => regs.without(Reg::PC).bits() & !0xFF == 0,
            AddSp { imm } | SubSp { imm } => *imm <= 508 && imm % 4 == 0,
            Add { rd, rn, rm } | Sub { rd, rn, rm } => rd.is_low() && rn.is_low() && rm.is_low(),
            Cmp { rn, op } => match op {
                Operand::Imm(i) => rn.is_low() && *i <= 0xFF,
                Operand::Reg(_) => true,
            },
            Tst { .. } | Msr { .. } | Mrs { .. } => false,
            B { .. } | BCond { .. } | Bx { .. } | Blx { .. } => true,
            Svc { .. } | Nop | Bkpt { .. } | Udf { .. } => true,
        };
        if narrow {
            2
        } else {
            4
        }
    }

    /// Cycle cost under the fixed model. Conditional branches report their
    /// taken cost; see [`Instruction::cycles_not_taken`].
    pub fn cycles(&self) -> u32 {
        use Instruction::*;
        match self {
            Ldr { .. } | Str { .. } => 2,
            Push { regs } => 1 + regs.len(),
            Pop { regs } => {
                1 + regs.len() + if regs.contains(Reg::PC) { PIPELINE_REFILL_CYCLES } else { 0 }
            }
            B { .. } | BCond { .. } | Bx { .. } | Blx { .. } => 2,
            Bl { .. } => 3,
            Svc { .. } | Udf { .. } => EXCEPTION_ENTRY_CYCLES,
            _ => 1,
        }
    }

    pub fn cycles_not_taken(&self) -> u32 {
        match self {
            Instruction::BCond { .. } => 1,
            other => other.cycles(),
        }
    }

    /// Label referenced by this instruction, if any.
    pub fn label_ref(&self) -> Option<&str> {
        match self {
            Instruction::B { target } | Instruction::BCond { target, .. } | Instruction::Bl { target } => {
                Some(target)
            }
            Instruction::Movw { imm: Imm16::Lower(l) | Imm16::Upper(l), .. }
            | Instruction::Movt { imm: Imm16::Lower(l) | Imm16::Upper(l), .. } => Some(l),
            _ => None,
        }
    }

    /// Every register named by the instruction, including reglist members.
    pub fn registers(&self) -> Vec<Reg> {
        use Instruction::*;
        match self {
            MovImm { rd, .. } | Movw { rd, .. } | Movt { rd, .. } | Mrs { rd } => vec![*rd],
            MovReg { rd, rm, .. } => vec![*rd, *rm],
            Ldr { rt, rn, .. } | Str { rt, rn, .. } => vec![*rt, *rn],
            Push { regs } | Pop { regs } => regs.iter().collect(),
            AddSp { .. } | SubSp { .. } => vec![Reg::SP],
            Addw { rd, rn, .. } | Subw { rd, rn, .. } => vec![*rd, *rn],
            Add { rd, rn, rm } | Sub { rd, rn, rm } => vec![*rd, *rn, *rm],
            Cmp { rn, op } => match op {
                Operand::Imm(_) => vec![*rn],
                Operand::Reg(rm) => vec![*rn, *rm],
            },
            Tst { rn, .. } | Msr { rn } => vec![*rn],
            Bx { rm } | Blx { rm } => vec![*rm],
            B { .. } | BCond { .. } | Bl { .. } | Svc { .. } | Nop | Bkpt { .. } | Udf { .. } => {
                vec![]
            }
        }
    }

    /// Function return: `bx lr` or a `pop` that loads the PC.
    pub fn is_return(&self) -> bool {
        match self {
            Instruction::Bx { rm } => *rm == Reg::LR,
            Instruction::Pop { regs } => regs.contains(Reg::PC),
            _ => false,
        }
    }

    pub fn is_call(&self) -> bool {
        matches!(self, Instruction::Bl { .. } | Instruction::Blx { .. })
    }

    pub fn mnemonic(&self) -> String {
        self.to_string().split_whitespace().next().unwrap_or_default().to_string()
    }
}

fn narrow_mem_form(size: Size, rt: Reg, rn: Reg, offset: u32) -> bool {
    if !rt.is_low() {
        return false;
    }
    if rn == Reg::SP {
        return size == Size::Word && offset <= 1020 && offset % 4 == 0;
    }
    if !rn.is_low() {
        return false;
    }
    let scale = size.bytes();
    offset % scale == 0 && offset / scale <= 31
}

fn imm(f: &mut fmt::Formatter<'_>, v: u32) -> fmt::Result {
    if v <= 0xFFFF {
        write!(f, "#{v}")
    } else {
        write!(f, "#{v:#x}")
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Instruction::*;
        let w = |wide: bool| if wide { ".w" } else { "" };
        match self {
            MovImm { rd, imm: v, wide } => {
                write!(f, "mov{} {rd}, ", w(*wide))?;
                imm(f, *v)
            }
            MovReg { rd, rm, wide } => write!(f, "mov{} {rd}, {rm}", w(*wide)),
            Movw { rd, imm } => write!(f, "movw {rd}, {imm}"),
            Movt { rd, imm } => write!(f, "movt {rd}, {imm}"),
            Ldr { size, rt, rn, offset, wide } | Str { size, rt, rn, offset, wide } => {
                let op = if matches!(self, Ldr { .. }) { "ldr" } else { "str" };
                write!(f, "{op}{}{} {rt}, [{rn}", size.suffix(), w(*wide))?;
                if *offset != 0 {
                    f.write_str(", ")?;
                    imm(f, *offset)?;
                }
                f.write_str("]")
            }
            Push { regs } => write!(f, "push {regs}"),
            Pop { regs } => write!(f, "pop {regs}"),
            AddSp { imm: v } => {
                f.write_str("add sp, ")?;
                imm(f, *v)
            }
            SubSp { imm: v } => {
                f.write_str("sub sp, ")?;
                imm(f, *v)
            }
            Addw { rd, rn, imm: v } => {
                write!(f, "addw {rd}, {rn}, ")?;
                imm(f, *v)
            }
            Subw { rd, rn, imm: v } => {
                write!(f, "subw {rd}, {rn}, ")?;
                imm(f, *v)
            }
            Add { rd, rn, rm } => write!(f, "add {rd}, {rn}, {rm}"),
            Sub { rd, rn, rm } => write!(f, "sub {rd}, {rn}, {rm}"),
            Cmp { rn, op } => match op {
                Operand::Imm(v) => {
                    write!(f, "cmp {rn}, ")?;
                    imm(f, *v)
                }
                Operand::Reg(rm) => write!(f, "cmp {rn}, {rm}"),
            },
            Tst { rn, imm: v } => {
                write!(f, "tst {rn}, ")?;
                imm(f, *v)
            }
            B { target } => write!(f, "b {target}"),
            BCond { cond, target } => write!(f, "b{} {target}", cond.mnemonic()),
            Bl { target } => write!(f, "bl {target}"),
            Bx { rm } => write!(f, "bx {rm}"),
            Blx { rm } => write!(f, "blx {rm}"),
            Svc { imm } => write!(f, "svc #{imm}"),
            Msr { rn } => write!(f, "msr control, {rn}"),
            Mrs { rd } => write!(f, "mrs {rd}, control"),
            Nop => f.write_str("nop"),
            Bkpt { imm } => write!(f, "bkpt #{imm}"),
            Udf { imm } => write!(f, "udf #{imm}"),
        }
    }
}
