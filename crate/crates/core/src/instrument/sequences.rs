//! Inserted instruction sequences. Every helper returns tagged lines ready
//! to splice into a function body.

use crate::asm::{Category, Line, Phase};
use crate::dwt::DWT_BASE;
use crate::machine::{Cond, Imm16, Instruction, Reg, RegList, Size, DEMCR, DEMCR_MON_EN};

use super::SequenceKind;

const FUNCTION0_OFFSET: u32 = 8;
const COMP1_OFFSET: u32 = 16;
const SSP_ADDRESS: u32 = DWT_BASE + COMP1_OFFSET;
/// Main-stack slot offsets of the protected ESF words, in copy order.
const ESF_COPY: [u32; 4] = [28, 24, 20, 16];
/// Bytes pushed to the shadow stack by a handler: four ESF words plus LR.
pub const HANDLER_FRAME_BYTES: u32 = 20;

pub(super) struct Emitter {
    pub phase: Phase,
    pub lines: Vec<Line>,
}

impl Emitter {
    pub fn new(phase: Phase) -> Self {
        Emitter { phase, lines: Vec::new() }
    }

    pub fn emit(&mut self, category: Category, instr: Instruction) {
        self.lines.push(Line::inserted(instr, self.phase, category));
    }

    pub fn load_address(&mut self, category: Category, rd: Reg, address: u32) {
        self.emit(category, Instruction::Movw { rd, imm: Imm16::Value(address as u16) });
        self.emit(category, Instruction::Movt { rd, imm: Imm16::Value((address >> 16) as u16) });
    }

    pub fn mov(&mut self, category: Category, rd: Reg, imm: u32) {
        self.emit(category, Instruction::MovImm { rd, imm, wide: true });
    }

    pub fn ldr(&mut self, category: Category, rt: Reg, rn: Reg, offset: u32) {
        self.emit(category, Instruction::Ldr { size: Size::Word, rt, rn, offset, wide: true });
    }

    pub fn str(&mut self, category: Category, rt: Reg, rn: Reg, offset: u32) {
        self.emit(category, Instruction::Str { size: Size::Word, rt, rn, offset, wide: true });
    }

    pub fn reserve(&mut self, regs: RegList) {
        if !regs.is_empty() {
            self.emit(Category::Other, Instruction::Push { regs });
        }
    }

    pub fn release(&mut self, regs: RegList) {
        if !regs.is_empty() {
            self.emit(Category::Other, Instruction::Pop { regs });
        }
    }

    fn set_function0(&mut self, base: Reg, data: Reg, value: u32) {
        self.mov(Category::Aw, data, value);
        self.str(Category::Aw, data, base, FUNCTION0_OFFSET);
    }

    /// `movw/movt/ldr/tst/beq skip`: skip when DebugMon is not enabled yet.
    fn init_guard(&mut self, addr: Reg, data: Reg, skip: &str) {
        self.load_address(Category::Other, addr, DEMCR);
        self.ldr(Category::Other, data, addr, 0);
        self.emit(Category::Other, Instruction::Tst { rn: data, imm: DEMCR_MON_EN });
        self.emit(Category::Other, Instruction::BCond { cond: Cond::Eq, target: skip.to_string() });
    }
}

/// Push LR to the shadow stack. Roles: optimal `[base, data]`, naive
/// `[base, ssp_addr, data]`.
pub(super) fn prologue(kind: SequenceKind, roles: &[Reg], reserved: RegList) -> Vec<Line> {
    let mut e = Emitter::new(Phase::Prologue);
    e.reserve(reserved);
    match kind {
        SequenceKind::Optimal => {
            let (base, data) = (roles[0], roles[1]);
            e.load_address(Category::Other, base, DWT_BASE);
            e.set_function0(base, data, 0);
            e.ldr(Category::Uss, data, base, COMP1_OFFSET);
            e.str(Category::Uss, Reg::LR, data, 0);
            e.emit(Category::Assp, Instruction::Addw { rd: data, rn: data, imm: 4 });
            e.str(Category::Assp, data, base, COMP1_OFFSET);
            e.set_function0(base, data, 6);
        }
        SequenceKind::Naive => {
            let (base, ssp, data) = (roles[0], roles[1], roles[2]);
            e.load_address(Category::Other, base, DWT_BASE);
            e.load_address(Category::Assp, ssp, SSP_ADDRESS);
            e.set_function0(base, data, 0);
            e.ldr(Category::Uss, data, ssp, 0);
            e.str(Category::Uss, Reg::LR, data, 0);
            e.emit(Category::Assp, Instruction::Addw { rd: data, rn: data, imm: 4 });
            e.str(Category::Assp, data, ssp, 0);
            e.set_function0(base, data, 6);
        }
    }
    e.release(reserved);
    e.lines
}

/// Pop the shadow entry into LR. Nothing toggles protection: only reads of
/// the shadow region happen here.
pub(super) fn epilogue(kind: SequenceKind, roles: &[Reg], reserved: RegList) -> Vec<Line> {
    let mut e = Emitter::new(Phase::Epilogue);
    e.reserve(reserved);
    let (ssp, data) = match kind {
        SequenceKind::Optimal => (roles[0], roles[1]),
        SequenceKind::Naive => {
            e.load_address(Category::Other, roles[0], DWT_BASE);
            (roles[1], roles[2])
        }
    };
    e.load_address(Category::Assp, ssp, SSP_ADDRESS);
    e.ldr(Category::Assp, data, ssp, 0);
    e.emit(Category::Assp, Instruction::Subw { rd: data, rn: data, imm: 4 });
    e.ldr(Category::Uss, Reg::LR, data, 0);
    e.str(Category::Assp, data, ssp, 0);
    e.release(reserved);
    e.lines
}

/// Handler entry: guard, then copy xPSR, return address, LR and R12 from
/// the ESF and the handler's own LR to the shadow stack. Roles
/// `[base, ssp, data]`. The returned index is where the `skip` label goes:
/// just before the reserved registers are released.
pub(super) fn handler_prologue(roles: &[Reg], reserved: RegList, skip: &str) -> (Vec<Line>, usize) {
    let (base, ssp, data) = (roles[0], roles[1], roles[2]);
    let k = 4 * reserved.len();
    let mut e = Emitter::new(Phase::Prologue);
    e.reserve(reserved);
    e.init_guard(base, data, skip);
    e.load_address(Category::Other, base, DWT_BASE);
    e.set_function0(base, data, 0);
    e.ldr(Category::Assp, ssp, base, COMP1_OFFSET);
    for (i, off) in ESF_COPY.into_iter().enumerate() {
        e.ldr(Category::Uss, data, Reg::SP, k + off);
        e.str(Category::Uss, data, ssp, 4 * i as u32);
    }
    e.str(Category::Uss, Reg::LR, ssp, 16);
    e.emit(Category::Assp, Instruction::Addw { rd: ssp, rn: ssp, imm: HANDLER_FRAME_BYTES });
    e.str(Category::Assp, ssp, base, COMP1_OFFSET);
    e.set_function0(base, data, 6);
    let skip_at = e.lines.len();
    e.release(reserved);
    (e.lines, skip_at)
}

/// Handler return: restore LR and write the saved ESF words back over the
/// main-stack frame, then rewind ssp.
pub(super) fn handler_epilogue(roles: &[Reg], reserved: RegList, skip: &str) -> (Vec<Line>, usize) {
    let (base, ssp, data) = (roles[0], roles[1], roles[2]);
    let k = 4 * reserved.len();
    let mut e = Emitter::new(Phase::Epilogue);
    e.reserve(reserved);
    e.init_guard(base, data, skip);
    e.load_address(Category::Assp, base, SSP_ADDRESS);
    e.ldr(Category::Assp, ssp, base, 0);
    e.emit(Category::Assp, Instruction::Subw { rd: ssp, rn: ssp, imm: HANDLER_FRAME_BYTES });
    e.ldr(Category::Uss, Reg::LR, ssp, 16);
    for (i, off) in ESF_COPY.into_iter().enumerate().rev() {
        e.ldr(Category::Uss, data, ssp, 4 * i as u32);
        e.str(Category::Uss, data, Reg::SP, k + off);
    }
    e.str(Category::Assp, ssp, base, 0);
    let skip_at = e.lines.len();
    e.release(reserved);
    (e.lines, skip_at)
}

/// The bare "read ssp, write it back" block used to compare register
/// pressure of the two ssp placements, with every register reserved.
pub fn ssp_access_block(kind: SequenceKind) -> Vec<Instruction> {
    let (r4, r10, r12) = (Reg::R4, Reg::R10, Reg::R12);
    let word = |load: bool, rt, rn, offset, wide| {
        if load {
            Instruction::Ldr { size: Size::Word, rt, rn, offset, wide }
        } else {
            Instruction::Str { size: Size::Word, rt, rn, offset, wide }
        }
    };
    let base = |rd| {
        [
            Instruction::Movw { rd, imm: Imm16::Value(DWT_BASE as u16) },
            Instruction::Movt { rd, imm: Imm16::Value((DWT_BASE >> 16) as u16) },
        ]
    };
    match kind {
        SequenceKind::Optimal => {
            let regs: RegList = [r4, r12].into_iter().collect();
            let mut v = vec![Instruction::Push { regs }];
            v.extend(base(r12));
            v.push(word(true, r4, r12, COMP1_OFFSET, true));
            v.push(word(false, r4, r12, COMP1_OFFSET, false));
            v.push(Instruction::Pop { regs });
            v
        }
        SequenceKind::Naive => {
            let regs: RegList = [r4, r10, r12].into_iter().collect();
            let mut v = vec![Instruction::Push { regs }];
            v.extend(base(r12));
            v.push(Instruction::Movw { rd: r10, imm: Imm16::Value(SSP_ADDRESS as u16) });
            v.push(Instruction::Movt { rd: r10, imm: Imm16::Value((SSP_ADDRESS >> 16) as u16) });
            v.push(word(false, r4, r10, 0, false));
            v.push(Instruction::Pop { regs });
            v
        }
    }
}
