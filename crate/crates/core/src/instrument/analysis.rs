use serde::Serialize;

use crate::asm::{AsmFunction, AsmProgram, FunctionKind};
use crate::machine::{Instruction, Reg, RegList};

/// GPRs the body never names, as operand or reglist member.
pub fn analyze_free_gprs(function: &AsmFunction) -> RegList {
    let used: RegList = function.instructions().flat_map(|i| i.registers()).collect();
    Reg::gprs().filter(|r| !used.contains(*r)).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FreeGprStats {
    pub functions: usize,
    pub with_two_or_more: usize,
    pub fraction: f64,
}

/// Share of instrumentable functions with at least two free GPRs.
pub fn free_gpr_stats(program: &AsmProgram) -> FreeGprStats {
    let counts: Vec<u32> = program
        .functions()
        .filter(|f| f.kind != FunctionKind::TrustedHal)
        .map(|f| analyze_free_gprs(f).len())
        .collect();
    let with_two_or_more = counts.iter().filter(|&&c| c >= 2).count();
    let functions = counts.len();
    let fraction = if functions == 0 { 0.0 } else { with_two_or_more as f64 / functions as f64 };
    FreeGprStats { functions, with_two_or_more, fraction }
}

fn has_call(function: &AsmFunction) -> bool {
    function.instructions().any(|i| i.is_call() || matches!(i, Instruction::Svc { .. }))
}

/// Registers the inserted code may clobber without saving.
///
/// R12 is always call-clobbered. R0-R3 are only taken in leaf functions:
/// with a call in the body they may carry a callee's results through to
/// the return site. In a handler, hardware unstacking restores R0-R3 and
/// R12 whatever the handler did with them.
pub fn usable_scratch(function: &AsmFunction) -> RegList {
    let free = analyze_free_gprs(function);
    let candidates: RegList = match function.kind {
        FunctionKind::ExceptionHandler => [Reg::R0, Reg::R1, Reg::R2, Reg::R3, Reg::R12].into_iter().collect(),
        _ if has_call(function) => RegList::empty().with(Reg::R12),
        _ => [Reg::R0, Reg::R1, Reg::R2, Reg::R3, Reg::R12].into_iter().collect(),
    };
    RegList::from_bits(free.bits() & candidates.bits())
}

/// Chosen scratch registers in role order plus those that must be saved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScratchAssignment {
    pub roles: Vec<Reg>,
    pub reserved: RegList,
}

/// Pick `needed` scratch registers: usable ones first (ascending), then
/// R4..R11, then R0..R3, the latter two groups saved around each sequence.
pub fn assign_scratch(function: &AsmFunction, needed: usize) -> Option<ScratchAssignment> {
    let usable = usable_scratch(function);
    let mut roles: Vec<Reg> = usable.iter().take(needed).collect();
    let mut reserved = RegList::empty();
    let fallback = (4..=11).chain(0..=3).map(|n| Reg::new(n).expect("gpr"));
    for r in fallback {
        if roles.len() == needed {
            break;
        }
        if !roles.contains(&r) {
            roles.push(r);
            reserved = reserved.with(r);
        }
    }
    if reserved.is_empty() {
        return Some(ScratchAssignment { roles, reserved });
    }
    // Saving registers needs a usable stack. A body that names every GPR
    // and also repoints SP by hand leaves nothing we can rely on.
    let all_used = analyze_free_gprs(function).is_empty();
    let writes_sp = function.instructions().any(writes_sp_directly);
    if all_used && writes_sp {
        return None;
    }
    Some(ScratchAssignment { roles, reserved })
}

fn writes_sp_directly(i: &Instruction) -> bool {
    use Instruction::*;
    match i {
        MovImm { rd, .. } | MovReg { rd, .. } | Addw { rd, .. } | Subw { rd, .. } => *rd == Reg::SP,
        Ldr { rt, .. } => *rt == Reg::SP,
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::parse;

    fn func(body: &str) -> AsmFunction {
        let p = parse(&format!(".func f\n{body}\n.endfunc")).unwrap();
        let f = p.functions().next().unwrap().clone();
        f
    }

    #[test]
    fn leaf_mov() {
        let free = analyze_free_gprs(&func("mov r0, #1\nbx lr"));
        assert_eq!(free.bits(), 0x1FFE);
    }

    #[test]
    fn r0_to_r11_used() {
        let body = (0..12).map(|i| format!("mov r{i}, #0")).collect::<Vec<_>>().join("\n");
        let f = func(&(body + "\nbx lr"));
        assert_eq!(analyze_free_gprs(&f), RegList::empty().with(Reg::R12));
        let a = assign_scratch(&f, 2).unwrap();
        assert_eq!(a.roles, vec![Reg::R12, Reg::R4]);
        assert_eq!(a.reserved, RegList::empty().with(Reg::R4));
    }

    #[test]
    fn prologue_figure_function() {
        let f = func("push {r6, r7, lr}\nbl f\npop {r6, r7, pc}");
        let free = analyze_free_gprs(&f);
        assert!(free.contains(Reg::R4) && free.contains(Reg::R12));
        assert_eq!(usable_scratch(&f), RegList::empty().with(Reg::R12));
        let a = assign_scratch(&f, 2).unwrap();
        assert_eq!(a.roles, vec![Reg::R12, Reg::R4]);
    }

    #[test]
    fn fully_pinned_with_sp_writes_refused() {
        let body = (0..13).map(|i| format!("mov r{i}, #0")).collect::<Vec<_>>().join("\n");
        let f = func(&(body + "\nmov sp, r0\nbx lr"));
        assert!(assign_scratch(&f, 2).is_none());
        let f = func(&((0..13).map(|i| format!("mov r{i}, #0")).collect::<Vec<_>>().join("\n") + "\nbx lr"));
        assert!(assign_scratch(&f, 2).is_some());
    }

    #[test]
    fn handler_scratch() {
        let p = parse(".func h handler\nmov r0, #1\nbx lr\n.endfunc").unwrap();
        let f = p.functions().next().unwrap();
        let a = assign_scratch(f, 3).unwrap();
        assert_eq!(a.roles, vec![Reg::R1, Reg::R2, Reg::R3]);
        assert!(a.reserved.is_empty());
    }
}
