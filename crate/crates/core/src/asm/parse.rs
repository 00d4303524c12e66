use super::{AsmError, AsmErrorKind, AsmFunction, AsmProgram, BodyItem, FunctionKind, Line, TopItem, WordValue};
use crate::machine::{Cond, Imm16, Instruction, Operand, Reg, RegList, Size};

type PResult<T> = Result<T, AsmErrorKind>;

fn syntax<T>(msg: impl Into<String>) -> PResult<T> {
    Err(AsmErrorKind::Syntax(msg.into()))
}

/// Parse `.ws` source text. Labels are checked for uniqueness and resolution
/// by running the layout pass before returning.
pub fn parse(source: &str) -> Result<AsmProgram, AsmError> {
    let mut items = Vec::new();
    let mut current: Option<AsmFunction> = None;
    let mut defined = std::collections::HashSet::new();
    let mut word_refs = Vec::new();

    for (idx, raw) in source.lines().enumerate() {
        let lineno = idx + 1;
        let err = |kind| AsmError::new(lineno, kind);
        let mut text = strip_comment(raw).trim();
        if text.is_empty() {
            continue;
        }

        // `name:` label prefix, optionally followed by a statement.
        if let Some((head, rest)) = split_label_prefix(text) {
            if !defined.insert(head.to_string()) {
                return Err(err(AsmErrorKind::DuplicateLabel(head.to_string())));
            }
            push_label(&mut items, &mut current, head.to_string());
            text = rest.trim();
            if text.is_empty() {
                continue;
            }
        }

        if text.starts_with('.') {
            let mut parts = text.split_whitespace();
            let directive = parts.next().unwrap_or_default().to_ascii_lowercase();
            let args: Vec<&str> = parts.collect();
            match directive.as_str() {
                ".org" => {
                    if current.is_some() {
                        return Err(err(AsmErrorKind::Syntax(".org inside .func".into())));
                    }
                    let [a] = args[..] else {
                        return Err(err(AsmErrorKind::Syntax(".org takes one address".into())));
                    };
                    items.push(TopItem::Org(parse_number(a).map_err(err)?));
                }
                ".func" => {
                    if current.is_some() {
                        return Err(err(AsmErrorKind::Syntax("nested .func".into())));
                    }
                    let (name, kind) = match args[..] {
                        [n] => (n, FunctionKind::Normal),
                        [n, k] => match k.to_ascii_lowercase().as_str() {
                            "handler" => (n, FunctionKind::ExceptionHandler),
                            "hal" => (n, FunctionKind::TrustedHal),
                            other => {
                                return Err(err(AsmErrorKind::Syntax(format!("unknown function kind `{other}`"))))
                            }
                        },
                        _ => return Err(err(AsmErrorKind::Syntax(".func NAME [handler|hal]".into()))),
                    };
                    check_ident(name).map_err(err)?;
                    if !defined.insert(name.to_string()) {
                        return Err(err(AsmErrorKind::DuplicateLabel(name.to_string())));
                    }
                    let mut f = AsmFunction::new(name, kind);
                    f.line = lineno;
                    current = Some(f);
                }
                ".endfunc" => match current.take() {
                    Some(f) => items.push(TopItem::Function(f)),
                    None => return Err(err(AsmErrorKind::Syntax(".endfunc without .func".into()))),
                },
                ".word" => {
                    if current.is_some() {
                        return Err(err(AsmErrorKind::Syntax(".word inside .func".into())));
                    }
                    let [v] = args[..] else {
                        return Err(err(AsmErrorKind::Syntax(".word takes one value".into())));
                    };
                    let value = if v.starts_with(|c: char| c.is_ascii_digit()) {
                        WordValue::Literal(parse_number(v).map_err(err)?)
                    } else {
                        check_ident(v).map_err(err)?;
                        word_refs.push((v.to_string(), lineno));
                        WordValue::Label(v.to_string())
                    };
                    items.push(TopItem::Word(value));
                }
                ".label" => {
                    let [n] = args[..] else {
                        return Err(err(AsmErrorKind::Syntax(".label takes one name".into())));
                    };
                    check_ident(n).map_err(err)?;
                    if !defined.insert(n.to_string()) {
                        return Err(err(AsmErrorKind::DuplicateLabel(n.to_string())));
                    }
                    push_label(&mut items, &mut current, n.to_string());
                }
                other => return Err(err(AsmErrorKind::Syntax(format!("unknown directive `{other}`")))),
            }
            continue;
        }

        let instr = parse_instruction(text).map_err(err)?;
        match current.as_mut() {
            Some(f) => f.body.push(BodyItem::Instr(Line::new(instr, lineno))),
            None => return Err(err(AsmErrorKind::Syntax("instruction outside .func".into()))),
        }
    }

    if let Some(f) = current {
        return Err(AsmError::new(f.line, AsmErrorKind::Syntax(format!("missing .endfunc for `{}`", f.name))));
    }
    if let Some((name, line)) = word_refs.into_iter().find(|(n, _)| !defined.contains(n)) {
        return Err(AsmError::new(line, AsmErrorKind::UnresolvedLabel(name)));
    }
    let program = AsmProgram { items };
    super::layout(&program)?;
    Ok(program)
}

fn push_label(items: &mut Vec<TopItem>, current: &mut Option<AsmFunction>, name: String) {
    match current {
        Some(f) => f.body.push(BodyItem::Label(name)),
        None => items.push(TopItem::Label(name)),
    }
}

fn strip_comment(line: &str) -> &str {
    line.split(';').next().unwrap_or_default()
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_' || c == '.' || c == '$'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '$'
}

fn check_ident(s: &str) -> PResult<()> {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if is_ident_start(c) && chars.all(is_ident_char) => Ok(()),
        _ => syntax(format!("invalid name `{s}`")),
    }
}

fn split_label_prefix(text: &str) -> Option<(&str, &str)> {
    let colon = text.find(':')?;
    let head = &text[..colon];
    (check_ident(head).is_ok() && !head.starts_with('.')).then(|| (head, &text[colon + 1..]))
}

pub(crate) fn parse_number(s: &str) -> PResult<u32> {
    let t = s.trim();
    let parsed = if let Some(hex) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        u32::from_str_radix(&hex.replace('_', ""), 16)
    } else {
        t.replace('_', "").parse::<u32>()
    };
    parsed.or_else(|_| syntax(format!("invalid number `{t}`")))
}

fn parse_imm(s: &str) -> PResult<u32> {
    match s.trim().strip_prefix('#') {
        Some(rest) => parse_number(rest),
        None => syntax(format!("expected immediate `#...`, found `{}`", s.trim())),
    }
}

pub(crate) fn parse_reg(s: &str) -> PResult<Reg> {
    let t = s.trim().to_ascii_lowercase();
    let r = match t.as_str() {
        "sp" => Some(Reg::SP),
        "lr" => Some(Reg::LR),
        "pc" => Some(Reg::PC),
        "ip" => Some(Reg::R12),
        _ => t.strip_prefix('r').and_then(|n| n.parse::<u8>().ok()).and_then(Reg::new),
    };
    r.map_or_else(|| syntax(format!("invalid register `{}`", s.trim())), Ok)
}

fn parse_gpr(s: &str) -> PResult<Reg> {
    let r = parse_reg(s)?;
    if r.is_gpr() {
        Ok(r)
    } else {
        syntax(format!("`{r}` not allowed here"))
    }
}

fn parse_reglist(s: &str) -> PResult<RegList> {
    let inner = s
        .trim()
        .strip_prefix('{')
        .and_then(|r| r.strip_suffix('}'))
        .map_or_else(|| syntax("expected register list `{...}`"), Ok)?;
    let mut list = RegList::empty();
    for part in inner.split(',') {
        let part = part.trim();
        if let Some((a, b)) = part.split_once('-') {
            let (a, b) = (parse_reg(a)?, parse_reg(b)?);
            if a.index() > b.index() {
                return syntax(format!("bad register range `{part}`"));
            }
            for n in a.index()..=b.index() {
                list = list.with(Reg::new(n as u8).expect("in range"));
            }
        } else {
            list = list.with(parse_reg(part)?);
        }
    }
    if list.is_empty() {
        return syntax("empty register list");
    }
    Ok(list)
}

/// Split operands on top-level commas (not inside `{}` or `[]`).
fn split_operands(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for c in s.chars() {
        match c {
            '{' | '[' => depth += 1,
            '}' | ']' => depth -= 1,
            _ => {}
        }
        if c == ',' && depth == 0 {
            out.push(cur.trim().to_string());
            cur.clear();
        } else {
            cur.push(c);
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

fn parse_mem(s: &str) -> PResult<(Reg, u32)> {
    let inner = s
        .trim()
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .map_or_else(|| syntax(format!("expected memory operand, found `{s}`")), Ok)?;
    let parts: Vec<&str> = inner.split(',').collect();
    match parts[..] {
        [rn] => Ok((parse_reg(rn)?, 0)),
        [rn, off] => Ok((parse_reg(rn)?, parse_imm(off)?)),
        _ => syntax(format!("bad memory operand `{s}`")),
    }
}

fn parse_imm16(s: &str) -> PResult<Imm16> {
    let t = s.trim();
    let body = t.strip_prefix('#').map_or_else(|| syntax("expected `#`"), Ok)?;
    if let Some(l) = body.strip_prefix(":lower16:") {
        check_ident(l)?;
        return Ok(Imm16::Lower(l.to_string()));
    }
    if let Some(l) = body.strip_prefix(":upper16:") {
        check_ident(l)?;
        return Ok(Imm16::Upper(l.to_string()));
    }
    let v = parse_number(body)?;
    u16::try_from(v).map(Imm16::Value).or_else(|_| syntax(format!("immediate {v} exceeds 16 bits")))
}

fn arity(ops: &[String], n: usize, mnemonic: &str) -> PResult<()> {
    if ops.len() == n {
        Ok(())
    } else {
        syntax(format!("`{mnemonic}` expects {n} operand(s), found {}", ops.len()))
    }
}

fn label_operand(s: &str) -> PResult<String> {
    check_ident(s.trim())?;
    Ok(s.trim().to_string())
}

fn small_imm(s: &str, max: u32) -> PResult<u32> {
    let v = parse_imm(s)?;
    if v > max {
        return syntax(format!("immediate {v} out of range (max {max})"));
    }
    Ok(v)
}

fn parse_instruction(text: &str) -> PResult<Instruction> {
    let (mn, rest) = match text.find(char::is_whitespace) {
        Some(i) => (&text[..i], text[i..].trim()),
        None => (text, ""),
    };
    let mnemonic = mn.to_ascii_lowercase();
    let (base, wide) = match mnemonic.strip_suffix(".w") {
        Some(b) => (b, true),
        None => (mnemonic.as_str(), false),
    };
    let ops = split_operands(rest);

    let mem_op = |size: Size, load: bool| -> PResult<Instruction> {
        arity(&ops, 2, base)?;
        let rt = parse_reg(&ops[0])?;
        let (rn, offset) = parse_mem(&ops[1])?;
        if rt == Reg::SP || rt == Reg::PC || rn == Reg::PC {
            return syntax("sp/pc not allowed as transfer register or pc as base");
        }
        if offset > 4095 {
            return syntax(format!("offset {offset} out of range"));
        }
        if size != Size::Word && !rt.is_gpr() {
            return syntax("byte/halfword transfers need r0-r12");
        }
        Ok(if load {
            Instruction::Ldr { size, rt, rn, offset, wide }
        } else {
            Instruction::Str { size, rt, rn, offset, wide }
        })
    };

    let instr = match base {
        "mov" | "movs" => {
            arity(&ops, 2, base)?;
            let rd = parse_reg(&ops[0])?;
            if rd == Reg::PC {
                return syntax("mov to pc is not supported");
            }
            if ops[1].starts_with('#') {
                Instruction::MovImm { rd, imm: parse_imm(&ops[1])?, wide }
            } else {
                Instruction::MovReg { rd, rm: parse_reg(&ops[1])?, wide }
            }
        }
        "movw" | "movt" => {
            arity(&ops, 2, base)?;
            let rd = parse_gpr(&ops[0])?;
            let imm = parse_imm16(&ops[1])?;
            if base == "movw" {
                Instruction::Movw { rd, imm }
            } else {
                Instruction::Movt { rd, imm }
            }
        }
        "ldr" => mem_op(Size::Word, true)?,
        "ldrb" => mem_op(Size::Byte, true)?,
        "ldrh" => mem_op(Size::Half, true)?,
        "str" => mem_op(Size::Word, false)?,
        "strb" => mem_op(Size::Byte, false)?,
        "strh" => mem_op(Size::Half, false)?,
        "push" => {
            arity(&ops, 1, base)?;
            let regs = parse_reglist(&ops[0])?;
            if regs.contains(Reg::SP) || regs.contains(Reg::PC) {
                return syntax("push list may not contain sp or pc");
            }
            Instruction::Push { regs }
        }
        "pop" => {
            arity(&ops, 1, base)?;
            let regs = parse_reglist(&ops[0])?;
            if regs.contains(Reg::SP) {
                return syntax("pop list may not contain sp");
            }
            if regs.contains(Reg::LR) && regs.contains(Reg::PC) {
                return syntax("pop list may not contain both lr and pc");
            }
            Instruction::Pop { regs }
        }
        "add" | "sub" | "addw" | "subw" => {
            let is_add = base.starts_with("add");
            let rd = parse_reg(ops.first().map_or("", String::as_str))?;
            match ops.len() {
                // add sp, #imm
                2 if rd == Reg::SP && (base == "add" || base == "sub") => {
                    let imm = small_imm(&ops[1], 4092)?;
                    if imm % 4 != 0 {
                        return syntax("sp adjustment must be a multiple of 4");
                    }
                    if is_add {
                        Instruction::AddSp { imm }
                    } else {
                        Instruction::SubSp { imm }
                    }
                }
                3 => {
                    let rn = parse_reg(&ops[1])?;
                    if ops[2].starts_with('#') {
                        if rd == Reg::SP && rn == Reg::SP && (base == "add" || base == "sub") {
                            let imm = small_imm(&ops[2], 4092)?;
                            if imm % 4 != 0 {
                                return syntax("sp adjustment must be a multiple of 4");
                            }
                            if is_add {
                                Instruction::AddSp { imm }
                            } else {
                                Instruction::SubSp { imm }
                            }
                        } else {
                            if !rd.is_gpr() || rn == Reg::PC || rn == Reg::LR {
                                return syntax("addw/subw need a general destination and base");
                            }
                            let imm = small_imm(&ops[2], 4095)?;
                            if is_add {
                                Instruction::Addw { rd, rn, imm }
                            } else {
                                Instruction::Subw { rd, rn, imm }
                            }
                        }
                    } else {
                        if base.ends_with('w') {
                            return syntax(format!("`{base}` takes an immediate"));
                        }
                        let (rd, rn, rm) = (parse_gpr(&ops[0])?, parse_gpr(&ops[1])?, parse_gpr(&ops[2])?);
                        if is_add {
                            Instruction::Add { rd, rn, rm }
                        } else {
                            Instruction::Sub { rd, rn, rm }
                        }
                    }
                }
                n => return syntax(format!("`{base}` expects 2 or 3 operands, found {n}")),
            }
        }
        "cmp" => {
            arity(&ops, 2, base)?;
            let rn = parse_gpr(&ops[0])?;
            let op = if ops[1].starts_with('#') {
                Operand::Imm(parse_imm(&ops[1])?)
            } else {
                Operand::Reg(parse_gpr(&ops[1])?)
            };
            Instruction::Cmp { rn, op }
        }
        "tst" => {
            arity(&ops, 2, base)?;
            Instruction::Tst { rn: parse_gpr(&ops[0])?, imm: parse_imm(&ops[1])? }
        }
        "b" => {
            arity(&ops, 1, base)?;
            Instruction::B { target: label_operand(&ops[0])? }
        }
        "beq" | "bne" | "blt" | "bge" => {
            arity(&ops, 1, base)?;
            let cond = match &base[1..] {
                "eq" => Cond::Eq,
                "ne" => Cond::Ne,
                "lt" => Cond::Lt,
                _ => Cond::Ge,
            };
            Instruction::BCond { cond, target: label_operand(&ops[0])? }
        }
        "bl" => {
            arity(&ops, 1, base)?;
            Instruction::Bl { target: label_operand(&ops[0])? }
        }
        "bx" | "blx" => {
            arity(&ops, 1, base)?;
            let rm = parse_reg(&ops[0])?;
            if rm == Reg::PC || rm == Reg::SP {
                return syntax("branch register may not be sp or pc");
            }
            if base == "bx" {
                Instruction::Bx { rm }
            } else {
                Instruction::Blx { rm }
            }
        }
        "svc" | "bkpt" | "udf" => {
            arity(&ops, 1, base)?;
            let imm = small_imm(&ops[0], 255)? as u8;
            match base {
                "svc" => Instruction::Svc { imm },
                "bkpt" => Instruction::Bkpt { imm },
                _ => Instruction::Udf { imm },
            }
        }
        "msr" => {
            arity(&ops, 2, base)?;
            if !ops[0].eq_ignore_ascii_case("control") {
                return syntax("only CONTROL is supported by msr");
            }
            Instruction::Msr { rn: parse_gpr(&ops[1])? }
        }
        "mrs" => {
            arity(&ops, 2, base)?;
            if !ops[1].eq_ignore_ascii_case("control") {
                return syntax("only CONTROL is supported by mrs");
            }
            Instruction::Mrs { rd: parse_gpr(&ops[0])? }
        }
        "nop" => {
            arity(&ops, 0, base)?;
            Instruction::Nop
        }
        _ => return Err(AsmErrorKind::UnknownMnemonic(mn.to_string())),
    };
    Ok(instr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::ReturnStyle;

    #[test]
    fn minimal_function() {
        let p = parse(".func foo\npush {r7, lr}\npop {r7, pc}\n.endfunc\n").unwrap();
        let fs: Vec<_> = p.functions().collect();
        assert_eq!(fs.len(), 1);
        assert_eq!(fs[0].returns_via(), ReturnStyle::PopPc);
        assert_eq!(fs[0].kind, FunctionKind::Normal);
    }

    #[test]
    fn unresolved_label_reports_branch_line() {
        let src = ".func foo\nnop\nb baz2\n.endfunc\n";
        let e = parse(src).unwrap_err();
        assert_eq!(e.line, 3);
        assert_eq!(e.kind, AsmErrorKind::UnresolvedLabel("baz2".into()));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = parse(".func f\n  frob r0\n.endfunc").unwrap_err();
        assert_eq!((e.line, e.kind), (2, AsmErrorKind::UnknownMnemonic("frob".into())));
        let e = parse(".func f\nx:\nx:\nnop\n.endfunc").unwrap_err();
        assert_eq!((e.line, e.kind), (3, AsmErrorKind::DuplicateLabel("x".into())));
        let e = parse(".func f\nmov r0\n.endfunc").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(matches!(e.kind, AsmErrorKind::Syntax(_)));
        assert!(parse("nop").is_err());
        assert!(parse(".func f\nnop").is_err());
        assert!(parse(".func f\npush {sp}\n.endfunc").is_err());
        assert!(parse(".func f\npop {lr, pc}\n.endfunc").is_err());
    }

    #[test]
    fn register_aliases_and_case() {
        let p = parse(".func f\nSTR.W R5, [IP, #16]\nLDR.W LR, [R4]\n.endfunc").unwrap();
        let f = p.functions().next().unwrap();
        let v: Vec<_> = f.instructions().cloned().collect();
        assert_eq!(v[0], Instruction::Str { size: Size::Word, rt: Reg::R5, rn: Reg::R12, offset: 16, wide: true });
        assert_eq!(v[1], Instruction::Ldr { size: Size::Word, rt: Reg::LR, rn: Reg::R4, offset: 0, wide: true });
    }

    #[test]
    fn label_forms_and_data() {
        let src = ".org 0x08000000\n.func main\nloop: b loop\n.endfunc\n.org 0x20000000\n.label input\n.word 0x41414141\n.word main\n";
        let p = parse(src).unwrap();
        assert_eq!(p.data_words().count(), 2);
        assert_eq!(p.origin(), 0x0800_0000);
    }

    #[test]
    fn reglist_ranges() {
        let p = parse(".func f\npush {r4-r6, lr}\n.endfunc").unwrap();
        let i = p.functions().next().unwrap().instructions().next().unwrap().clone();
        assert_eq!(i.to_string(), "push {r4, r5, r6, lr}");
    }
}
