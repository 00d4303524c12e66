use std::sync::Arc;

use super::{
    ControlTransfer, EventKind, ExecutionEvent, HaltReason, Instruction, Machine, MemoryHooks, Mode, Operand, Reg,
    Size, EXCEPTION_RETURN_CYCLES,
};
use crate::exceptions::{self, ExcId, EXC_RETURN};
use crate::machine::Cond;

const N: u32 = 1 << 31;
const Z: u32 = 1 << 30;
const C: u32 = 1 << 29;
const V: u32 = 1 << 28;

fn operand_value(m: &Machine, r: Reg, pc: u32) -> u32 {
    if r == Reg::PC {
        pc.wrapping_add(4)
    } else {
        m.reg(r)
    }
}

fn set_nzcv(m: &mut Machine, a: u32, b: u32) {
    let res = a.wrapping_sub(b);
    let mut flags = 0;
    if res & N != 0 {
        flags |= N;
    }
    if res == 0 {
        flags |= Z;
    }
    if a >= b {
        flags |= C;
    }
    if ((a ^ b) & (a ^ res)) >> 31 != 0 {
        flags |= V;
    }
    m.xpsr = (m.xpsr & !(N | Z | C | V)) | flags;
}

fn cond_holds(xpsr: u32, cond: Cond) -> bool {
    let n = xpsr & N != 0;
    let z = xpsr & Z != 0;
    let v = xpsr & V != 0;
    match cond {
        Cond::Eq => z,
        Cond::Ne => !z,
        Cond::Lt => n != v,
        Cond::Ge => n == v,
    }
}

/// Load PC from a return-style branch. In Handler mode an `EXC_RETURN`
/// value starts unstacking; any other magic value is a fault.
fn branch_return(m: &mut Machine, value: u32, hooks: &mut dyn MemoryHooks) -> Option<EventKind> {
    if m.mode == Mode::Handler && value >= 0xF000_0000 {
        if value != EXC_RETURN {
            m.halt_fault(format!("invalid EXC_RETURN {value:#010x}"));
            return None;
        }
        let ev = exceptions::exception_return(m, hooks);
        if !m.halted {
            m.cycles += EXCEPTION_RETURN_CYCLES as u64;
            m.accounting.exception += EXCEPTION_RETURN_CYCLES as u64;
        }
        return Some(ev.kind);
    }
    m.r[15] = value & !1;
    m.last_control = Some(ControlTransfer::Return { target: value & !1 });
    None
}

pub(super) fn step(m: &mut Machine, hooks: &mut dyn MemoryHooks) -> ExecutionEvent {
    let pc = m.pc();
    if m.halted {
        return m.event(EventKind::Halted(m.halt_reason.unwrap_or(HaltReason::Fault)), pc);
    }
    m.last_control = None;
    let code = Arc::clone(&m.code);
    let Some(placed) = code.fetch(pc) else {
        m.halt_fault(format!("no instruction at {pc:#010x}"));
        return m.event(EventKind::Halted(HaltReason::Fault), pc);
    };
    let hits_before = m.pending_hits.len();
    let next = pc.wrapping_add(placed.width());
    let instr = &placed.line.instr;
    let mut cost = instr.cycles();
    let mut special = None;
    m.r[15] = next;

    use Instruction::*;
    match instr {
        MovImm { rd, imm, .. } => m.set_reg(*rd, *imm),
        MovReg { rd, rm, .. } => {
            let v = operand_value(m, *rm, pc);
            m.set_reg(*rd, v)
        }
        Movw { rd, .. } => m.set_reg(*rd, placed.imm16().expect("resolved") as u32),
        Movt { rd, .. } => {
            let v = (m.reg(*rd) & 0xFFFF) | ((placed.imm16().expect("resolved") as u32) << 16);
            m.set_reg(*rd, v)
        }
        Ldr { size, rt, rn, offset, .. } => {
            let addr = operand_value(m, *rn, pc).wrapping_add(*offset);
            if let Some(v) = m.read(hooks, addr, *size) {
                m.set_reg(*rt, v);
            }
        }
        Str { size, rt, rn, offset, .. } => {
            let addr = operand_value(m, *rn, pc).wrapping_add(*offset);
            let v = m.reg(*rt);
            let _ = m.write(hooks, addr, *size, v);
        }
        Push { regs } => {
            let sp = m.sp();
            if sp % 4 != 0 {
                m.halt_fault(format!("misaligned sp {sp:#010x}"));
            } else {
                let base = sp.wrapping_sub(4 * regs.len());
                for (i, r) in regs.iter().enumerate() {
                    let v = m.reg(r);
                    if m.write(hooks, base + 4 * i as u32, Size::Word, v).is_none() {
                        break;
                    }
                }
                if !m.halted {
                    m.set_reg(Reg::SP, base);
                }
            }
        }
        Pop { regs } => {
            let sp = m.sp();
            if sp % 4 != 0 {
                m.halt_fault(format!("misaligned sp {sp:#010x}"));
            } else {
                let mut vals = Vec::with_capacity(regs.len() as usize);
                for i in 0..regs.len() {
                    match m.read(hooks, sp + 4 * i, Size::Word) {
                        Some(v) => vals.push(v),
                        None => break,
                    }
                }
                if !m.halted {
                    m.set_reg(Reg::SP, sp + 4 * regs.len());
                    let mut new_pc = None;
                    for (r, v) in regs.iter().zip(vals) {
                        if r == Reg::PC {
                            new_pc = Some(v);
                        } else {
                            m.set_reg(r, v);
                        }
                    }
                    if let Some(v) = new_pc {
                        special = branch_return(m, v, hooks);
                    }
                }
            }
        }
        AddSp { imm } => m.set_reg(Reg::SP, m.sp().wrapping_add(*imm)),
        SubSp { imm } => m.set_reg(Reg::SP, m.sp().wrapping_sub(*imm)),
        Addw { rd, rn, imm } => m.set_reg(*rd, operand_value(m, *rn, pc).wrapping_add(*imm)),
        Subw { rd, rn, imm } => m.set_reg(*rd, operand_value(m, *rn, pc).wrapping_sub(*imm)),
        Add { rd, rn, rm } => m.set_reg(*rd, m.reg(*rn).wrapping_add(m.reg(*rm))),
        Sub { rd, rn, rm } => m.set_reg(*rd, m.reg(*rn).wrapping_sub(m.reg(*rm))),
        Cmp { rn, op } => {
            let b = match op {
                Operand::Imm(i) => *i,
                Operand::Reg(r) => m.reg(*r),
            };
            set_nzcv(m, m.reg(*rn), b);
        }
        Tst { rn, imm } => {
            let res = m.reg(*rn) & imm;
            let mut flags = m.xpsr & !(N | Z);
            if res & N != 0 {
                flags |= N;
            }
            if res == 0 {
                flags |= Z;
            }
            m.xpsr = flags;
        }
        B { .. } => m.r[15] = placed.target.expect("resolved") & !1,
        BCond { cond, .. } => {
            if cond_holds(m.xpsr, *cond) {
                m.r[15] = placed.target.expect("resolved") & !1;
            } else {
                cost = instr.cycles_not_taken();
            }
        }
        Bl { .. } => {
            m.set_reg(Reg::LR, next | 1);
            m.r[15] = placed.target.expect("resolved") & !1;
            m.last_control = Some(ControlTransfer::Call { return_address: next });
        }
        Bx { rm } => {
            let v = m.reg(*rm);
            special = branch_return(m, v, hooks);
        }
        Blx { rm } => {
            let v = m.reg(*rm);
            m.set_reg(Reg::LR, next | 1);
            m.r[15] = v & !1;
            m.last_control = Some(ControlTransfer::Call { return_address: next });
        }
        Svc { .. } | Udf { .. } => {
            let exc = if matches!(instr, Svc { .. }) { ExcId::Svc } else { ExcId::UsageFault };
            if !m.handlers.contains_key(&exc) {
                let what = if exc == ExcId::Svc { "svc without handler" } else { "undefined instruction" };
                m.halt_fault(format!("{what} at {pc:#010x}"));
            } else {
                // Stacked return address is the following instruction, so the
                // handler resumes past the trapping one.
                special = Some(exceptions::exception_entry(m, exc, next, hooks).kind);
            }
        }
        Msr { rn } => {
            if m.is_privileged() {
                m.control = m.reg(*rn) & 1;
            }
        }
        Mrs { rd } => m.set_reg(*rd, m.control),
        Nop => {}
        Bkpt { .. } => m.halt(HaltReason::Normal),
    }

    m.cycles += cost as u64;
    m.accounting.charge(placed.line.tag, cost);
    m.step_index += 1;

    if m.halted {
        if m.halt_reason == Some(HaltReason::Fault) {
            log::debug!("fault at {pc:#010x}: {}", m.fault.as_deref().unwrap_or(""));
        }
        return m.event(EventKind::Halted(m.halt_reason.unwrap_or(HaltReason::Fault)), pc);
    }
    if let Some(hit) = m.pending_hits.get(hits_before) {
        let kind = EventKind::WatchpointHit { comparator: hit.comparator, address: hit.address, access: hit.access };
        return m.event(kind, pc);
    }
    m.event(special.unwrap_or(EventKind::Stepped), pc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::parse;
    use crate::machine::NoHooks;

    fn machine(src: &str) -> Machine {
        Machine::load(&parse(src).unwrap()).unwrap()
    }

    #[test]
    fn movw_loads_low_half() {
        let mut m = machine(".func main\nmovw r12, #4128\nmovt r12, #57344\nnop\n.endfunc");
        m.step(&mut NoHooks);
        assert_eq!((m.reg(Reg::R12), m.cycles), (0x1020, 1));
        m.step(&mut NoHooks);
        assert_eq!(m.reg(Reg::R12), 0xE000_1020);
        let before = m.r;
        m.step(&mut NoHooks);
        assert_eq!(m.pc(), before[15] + 2);
        assert_eq!(&m.r[..15], &before[..15]);
        assert_eq!(m.cycles, 3);
    }

    #[test]
    fn push_layout() {
        let mut m = machine(".func main\npush {r6, r7, lr}\n.endfunc");
        m.set_reg(Reg::SP, 0x2000_2000);
        m.set_reg(Reg::R6, 6);
        m.set_reg(Reg::R7, 7);
        m.set_reg(Reg::LR, 0xAB);
        m.step(&mut NoHooks);
        assert_eq!(m.sp(), 0x2000_1FF4);
        assert_eq!(m.memory.read_u32(0x2000_1FF4), 6);
        assert_eq!(m.memory.read_u32(0x2000_1FF8), 7);
        assert_eq!(m.memory.read_u32(0x2000_1FFC), 0xAB);
        assert_eq!(m.cycles, 4);
    }

    #[test]
    fn conditional_costs() {
        let mut m = machine(".func main\nmov r0, #1\ncmp r0, #2\nbge skip\nblt skip\nnop\nskip:\nbkpt #0\n.endfunc");
        for _ in 0..4 {
            m.step(&mut NoHooks);
        }
        // mov 1 + cmp 1 + bge not taken 1 + blt taken 2
        assert_eq!(m.cycles, 5);
        assert_eq!(m.step(&mut NoHooks).kind, EventKind::Halted(HaltReason::Normal));
    }

    #[test]
    fn unaligned_word_faults() {
        let mut m = machine(".func main\nmov r0, #2\nldr r1, [r0]\n.endfunc");
        m.step(&mut NoHooks);
        assert_eq!(m.step(&mut NoHooks).kind, EventKind::Halted(HaltReason::Fault));
    }

    #[test]
    fn udf_without_handler_faults() {
        let mut m = machine(".func main\nudf #0\n.endfunc");
        assert_eq!(m.step(&mut NoHooks).kind, EventKind::Halted(HaltReason::Fault));
        assert!(m.fault.as_deref().unwrap().contains("undefined"));
    }
}
