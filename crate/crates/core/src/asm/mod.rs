//! Two-pass mini-assembler for the `.ws` text format.
//!
//! Grammar, one statement per line, `;` starts a comment:
//!
//! ```text
//! .org 0x08000000
//! .func main              ; or `.func NAME handler` / `.func NAME hal`
//!     push {r7, lr}
//! loop:                   ; same as `.label loop`
//!     bl helper
//!     pop {r7, pc}
//! .endfunc
//! .label user_input
//! .word 0x41414141
//! .word baz               ; address of a label
//! ```

mod layout;
mod parse;
mod print;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::machine::Instruction;

pub use layout::{layout, Layout, PlacedInstr};
pub use parse::parse;
pub(crate) use parse::parse_number;
pub use print::{listing, print};

/// Load address used when a program has no leading `.org`.
pub const DEFAULT_ORIGIN: u32 = 0x0800_0000;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum AsmErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("unknown mnemonic `{0}`")]
    UnknownMnemonic(String),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("unresolved label `{0}`")]
    UnresolvedLabel(String),
    #[error(".org {0:#010x} would move the location counter backwards")]
    OrgBackwards(u32),
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct AsmError {
    pub line: usize,
    pub kind: AsmErrorKind,
}

impl AsmError {
    pub fn new(line: usize, kind: AsmErrorKind) -> Self {
        AsmError { line, kind }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FunctionKind {
    Normal,
    ExceptionHandler,
    /// Trusted hardware-abstraction code; never instrumented.
    TrustedHal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReturnStyle {
    PopPc,
    BxLr,
    Mixed,
    NoReturn,
}

/// Cycle attribution bucket for inserted instructions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    /// Altering the write protection.
    #[serde(rename = "AW")]
    Aw,
    /// Updating the shadow stack.
    #[serde(rename = "USS")]
    Uss,
    /// Adjusting the shadow stack pointer.
    #[serde(rename = "ASSP")]
    Assp,
    Other,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Aw, Category::Uss, Category::Assp, Category::Other];

    pub fn name(self) -> &'static str {
        match self {
            Category::Aw => "AW",
            Category::Uss => "USS",
            Category::Assp => "ASSP",
            Category::Other => "Other",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Prologue,
    Epilogue,
}

/// Provenance of an instruction, carried from the instrumenter to the
/// emulator for cycle attribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Tag {
    #[default]
    Original,
    Inserted { phase: Phase, category: Category },
    /// Rewritten form of an original instruction. `replaced_cycles` is the
    /// cost of the instruction it stands in for (0 for the remainder of a
    /// split).
    Converted { replaced_cycles: u32 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Line {
    pub instr: Instruction,
    /// 1-based source line, 0 for synthesized instructions.
    pub line: usize,
    pub tag: Tag,
}

impl Line {
    pub fn new(instr: Instruction, line: usize) -> Self {
        Line { instr, line, tag: Tag::Original }
    }

    pub fn inserted(instr: Instruction, phase: Phase, category: Category) -> Self {
        Line { instr, line: 0, tag: Tag::Inserted { phase, category } }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BodyItem {
    Label(String),
    Instr(Line),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AsmFunction {
    pub name: String,
    pub kind: FunctionKind,
    pub body: Vec<BodyItem>,
    pub line: usize,
}

impl AsmFunction {
    pub fn new(name: impl Into<String>, kind: FunctionKind) -> Self {
        AsmFunction { name: name.into(), kind, body: Vec::new(), line: 0 }
    }

    pub fn instructions(&self) -> impl Iterator<Item = &Instruction> {
        self.lines().map(|l| &l.instr)
    }

    pub fn lines(&self) -> impl Iterator<Item = &Line> {
        self.body.iter().filter_map(|item| match item {
            BodyItem::Instr(l) => Some(l),
            BodyItem::Label(_) => None,
        })
    }

    pub fn returns_via(&self) -> ReturnStyle {
        let (mut pop, mut bx) = (false, false);
        for i in self.instructions() {
            match i {
                Instruction::Pop { regs } if regs.contains(crate::machine::Reg::PC) => pop = true,
                Instruction::Bx { rm } if *rm == crate::machine::Reg::LR => bx = true,
                _ => {}
            }
        }
        match (pop, bx) {
            (true, true) => ReturnStyle::Mixed,
            (true, false) => ReturnStyle::PopPc,
            (false, true) => ReturnStyle::BxLr,
            (false, false) => ReturnStyle::NoReturn,
        }
    }

    /// Sum of encoding widths.
    pub fn code_size(&self) -> u32 {
        self.instructions().map(Instruction::width).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WordValue {
    Literal(u32),
    Label(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TopItem {
    Org(u32),
    Label(String),
    Word(WordValue),
    Function(AsmFunction),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AsmProgram {
    pub items: Vec<TopItem>,
}

impl AsmProgram {
    /// Load address of the first emitted item.
    pub fn origin(&self) -> u32 {
        match self.items.first() {
            Some(TopItem::Org(a)) => *a,
            _ => DEFAULT_ORIGIN,
        }
    }

    pub fn functions(&self) -> impl Iterator<Item = &AsmFunction> {
        self.items.iter().filter_map(|i| match i {
            TopItem::Function(f) => Some(f),
            _ => None,
        })
    }

    pub fn functions_mut(&mut self) -> impl Iterator<Item = &mut AsmFunction> {
        self.items.iter_mut().filter_map(|i| match i {
            TopItem::Function(f) => Some(f),
            _ => None,
        })
    }

    pub fn function(&self, name: &str) -> Option<&AsmFunction> {
        self.functions().find(|f| f.name == name)
    }

    /// Initialized data words in program order.
    pub fn data_words(&self) -> impl Iterator<Item = &WordValue> {
        self.items.iter().filter_map(|i| match i {
            TopItem::Word(w) => Some(w),
            _ => None,
        })
    }
}
