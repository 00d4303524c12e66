use std::collections::BTreeMap;

use super::{AsmError, AsmErrorKind, AsmProgram, BodyItem, FunctionKind, Line, TopItem, WordValue};
use crate::machine::{Imm16, Instruction};

/// An instruction with its final address and resolved label operand.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlacedInstr {
    pub address: u32,
    pub line: Line,
    /// Address of the referenced label, for branches and `movw`/`movt`
    /// label halves.
    pub target: Option<u32>,
    /// Index into [`Layout::functions`].
    pub function: usize,
}

impl PlacedInstr {
    pub fn width(&self) -> u32 {
        self.line.instr.width()
    }

    /// The 16-bit immediate a `movw`/`movt` actually loads.
    pub fn imm16(&self) -> Option<u16> {
        let imm = match &self.line.instr {
            Instruction::Movw { imm, .. } | Instruction::Movt { imm, .. } => imm,
            _ => return None,
        };
        Some(match imm {
            Imm16::Value(v) => *v,
            Imm16::Lower(_) => self.target? as u16,
            Imm16::Upper(_) => (self.target? >> 16) as u16,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FunctionRange {
    pub name: String,
    pub kind: FunctionKind,
    pub start: u32,
    /// One past the last instruction byte.
    pub end: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Layout {
    pub labels: BTreeMap<String, u32>,
    pub functions: Vec<FunctionRange>,
    pub instrs: Vec<PlacedInstr>,
    /// `(address, value)` of every `.word`.
    pub words: Vec<(u32, u32)>,
    /// Sum of instruction encoding widths.
    pub code_size: u32,
    pub data_size: u32,
}

impl Layout {
    pub fn total_size(&self) -> u32 {
        self.code_size + self.data_size
    }

    pub fn function_named(&self, name: &str) -> Option<&FunctionRange> {
        self.functions.iter().find(|f| f.name == name)
    }

    /// Function containing `address`, if any.
    pub fn function_at(&self, address: u32) -> Option<&FunctionRange> {
        self.functions.iter().find(|f| (f.start..f.end).contains(&address))
    }
}

/// Assign addresses (pass 1) and resolve label references (pass 2).
pub fn layout(program: &AsmProgram) -> Result<Layout, AsmError> {
    let mut out = Layout::default();
    let mut lc = program.origin();
    let define = |labels: &mut BTreeMap<String, u32>, name: &str, at: u32, line: usize| {
        if labels.insert(name.to_string(), at).is_some() {
            return Err(AsmError::new(line, AsmErrorKind::DuplicateLabel(name.to_string())));
        }
        Ok(())
    };

    // Pass 1.
    let mut pending_words = Vec::new();
    for (i, item) in program.items.iter().enumerate() {
        match item {
            TopItem::Org(a) => {
                if *a < lc && i != 0 {
                    return Err(AsmError::new(0, AsmErrorKind::OrgBackwards(*a)));
                }
                lc = *a;
            }
            TopItem::Label(name) => define(&mut out.labels, name, lc, 0)?,
            TopItem::Word(w) => {
                pending_words.push((lc, w));
                lc = lc.wrapping_add(4);
                out.data_size += 4;
            }
            TopItem::Function(f) => {
                define(&mut out.labels, &f.name, lc, f.line)?;
                let start = lc;
                let index = out.functions.len();
                let mut last_line = f.line;
                for body in &f.body {
                    match body {
                        BodyItem::Label(name) => define(&mut out.labels, name, lc, last_line + 1)?,
                        BodyItem::Instr(l) => {
                            if l.line != 0 {
                                last_line = l.line;
                            }
                            out.instrs.push(PlacedInstr { address: lc, line: l.clone(), target: None, function: index });
                            let w = l.instr.width();
                            lc = lc.wrapping_add(w);
                            out.code_size += w;
                        }
                    }
                }
                out.functions.push(FunctionRange { name: f.name.clone(), kind: f.kind, start, end: lc });
            }
        }
    }

    // Pass 2.
    for p in &mut out.instrs {
        if let Some(name) = p.line.instr.label_ref() {
            match out.labels.get(name) {
                Some(a) => p.target = Some(*a),
                None => return Err(AsmError::new(p.line.line, AsmErrorKind::UnresolvedLabel(name.to_string()))),
            }
        }
    }
    for (addr, w) in pending_words {
        let value = match w {
            WordValue::Literal(v) => *v,
            WordValue::Label(name) => *out
                .labels
                .get(name)
                .ok_or_else(|| AsmError::new(0, AsmErrorKind::UnresolvedLabel(name.clone())))?,
        };
        out.words.push((addr, value));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::parse;

    #[test]
    fn widths_and_addresses() {
        let p = parse(".org 0x100\n.func f\npush {r4}\nstr.w r4, [r12, #8]\nbx lr\n.endfunc\n.word f").unwrap();
        let l = layout(&p).unwrap();
        let addrs: Vec<u32> = l.instrs.iter().map(|i| i.address).collect();
        assert_eq!(addrs, vec![0x100, 0x102, 0x106]);
        assert_eq!(l.code_size, 8);
        assert_eq!(l.words, vec![(0x108, 0x100)]);
        assert_eq!(l.total_size(), 12);
    }

    #[test]
    fn prologue_block_size() {
        // Hand count: narrow push and pop, eight wide ops in between.
        let src = ".func f
push {r4}
mov.w r4, #0
str.w r4, [r12, #8]
ldr.w r4, [r12, #16]
str.w lr, [r4]
addw r4, r4, #4
str.w r4, [r12, #16]
mov.w r4, #6
str.w r4, [r12, #8]
pop {r4}
.endfunc";
        assert_eq!(layout(&parse(src).unwrap()).unwrap().code_size, 2 + 8 * 4 + 2);
    }

    #[test]
    fn bare_return_is_two_bytes() {
        let p = parse(".func f\nbx lr\n.endfunc").unwrap();
        assert_eq!(layout(&p).unwrap().code_size, 2);
    }

    #[test]
    fn insertion_shifts_downstream_only() {
        let a = parse(".func f\nnop\nnop\nb f\n.endfunc\n.func g\nbx lr\n.endfunc").unwrap();
        let b = parse(".func f\nnop\nmovw r0, #1\nnop\nb f\n.endfunc\n.func g\nbx lr\n.endfunc").unwrap();
        let (la, lb) = (layout(&a).unwrap(), layout(&b).unwrap());
        assert_eq!(la.labels["f"], lb.labels["f"]);
        assert_eq!(la.labels["g"] + 4, lb.labels["g"]);
        assert_eq!(la.instrs[1].address + 4, lb.instrs[2].address);
    }

    #[test]
    fn org_backwards_rejected() {
        let p = parse(".org 0x200\n.word 1\n.org 0x100\n.word 2");
        assert!(matches!(p.unwrap_err().kind, AsmErrorKind::OrgBackwards(0x100)));
    }

    #[test]
    fn label_halves() {
        let p = parse(".func f\nmovw r0, #:lower16:data\nmovt r0, #:upper16:data\n.endfunc\n.org 0x20001234\n.label data\n.word 0").unwrap();
        let l = layout(&p).unwrap();
        assert_eq!(l.instrs[0].imm16(), Some(0x1234));
        assert_eq!(l.instrs[1].imm16(), Some(0x2000));
    }
}
