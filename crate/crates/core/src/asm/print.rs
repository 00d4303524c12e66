use std::fmt::Write;

use super::{AsmProgram, BodyItem, FunctionKind, Layout, Tag, TopItem, WordValue};

fn tag_comment(tag: Tag) -> Option<String> {
    match tag {
        Tag::Original => None,
        Tag::Inserted { phase, category } => {
            Some(format!("{} {}", format!("{phase:?}").to_ascii_lowercase(), category.name()))
        }
        Tag::Converted { .. } => Some("converted".to_string()),
    }
}

/// Render a program back to `.ws` source. Instrumentation tags become
/// trailing comments, so the text reparses to the same instruction stream.
pub fn print(program: &AsmProgram) -> String {
    let mut out = String::new();
    for item in &program.items {
        match item {
            TopItem::Org(a) => writeln!(out, ".org {a:#010x}").unwrap(),
            TopItem::Label(l) => writeln!(out, ".label {l}").unwrap(),
            TopItem::Word(WordValue::Literal(v)) => writeln!(out, ".word {v:#010x}").unwrap(),
            TopItem::Word(WordValue::Label(l)) => writeln!(out, ".word {l}").unwrap(),
            TopItem::Function(f) => {
                match f.kind {
                    FunctionKind::Normal => writeln!(out, ".func {}", f.name),
                    FunctionKind::ExceptionHandler => writeln!(out, ".func {} handler", f.name),
                    FunctionKind::TrustedHal => writeln!(out, ".func {} hal", f.name),
                }
                .unwrap();
                for b in &f.body {
                    match b {
                        BodyItem::Label(l) => writeln!(out, "{l}:").unwrap(),
                        BodyItem::Instr(line) => {
                            let text = line.instr.to_string();
                            match tag_comment(line.tag) {
                                Some(c) => writeln!(out, "    {text:<28}; {c}").unwrap(),
                                None => writeln!(out, "    {text}").unwrap(),
                            }
                        }
                    }
                }
                writeln!(out, ".endfunc").unwrap();
            }
        }
    }
    out
}

/// Resolved listing: one line per instruction or data word with its
/// address and width, label operands shown with their values.
pub fn listing(program: &AsmProgram, layout: &Layout) -> String {
    let mut out = String::new();
    let mut instrs = layout.instrs.iter();
    let mut words = layout.words.iter();
    for item in &program.items {
        match item {
            TopItem::Org(_) => {}
            TopItem::Label(l) => writeln!(out, "{:#010x} <{l}>:", layout.labels[l]).unwrap(),
            TopItem::Word(_) => {
                let (a, v) = words.next().expect("layout matches program");
                writeln!(out, "{a:#010x}  4  .word {v:#010x}").unwrap();
            }
            TopItem::Function(f) => {
                writeln!(out, "{:#010x} <{}>:", layout.labels[&f.name], f.name).unwrap();
                for b in &f.body {
                    match b {
                        BodyItem::Label(l) => writeln!(out, "{:#010x} <{l}>:", layout.labels[l]).unwrap(),
                        BodyItem::Instr(_) => {
                            let p = instrs.next().expect("layout matches program");
                            write!(out, "{:#010x}  {}  {}", p.address, p.width(), p.line.instr).unwrap();
                            if let Some(t) = p.target {
                                write!(out, "  ; {t:#010x}").unwrap();
                            }
                            out.push('\n');
                        }
                    }
                }
            }
        }
    }
    writeln!(out, "; code {} bytes, data {} bytes", layout.code_size, layout.data_size).unwrap();
    out
}

#[cfg(test)]
mod tests {
    use crate::asm::{layout, parse, print};

    #[test]
    fn round_trip() {
        let src = ".org 0x08000000\n.func main\n  push {r7, lr}\nl1:\n  MOV.W r4, #0\n  str.w r4, [ip, #8]\n  beq l1\n  pop {r7, pc}\n.endfunc\n.func h handler\n  bx lr\n.endfunc\n.org 0x20000000\n.label d\n.word 0x41414141\n.word main\n";
        let p = parse(src).unwrap();
        let again = parse(&print(&p)).unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn listing_shows_addresses() {
        let p = parse(".func main\nbl main\n.endfunc").unwrap();
        let l = layout(&p).unwrap();
        let text = super::listing(&p, &l);
        assert!(text.contains("0x08000000  4  bl main  ; 0x08000000"), "{text}");
    }
}
