//! Mini-ISA sources for the canned scenarios.

use std::fmt::Write as _;

use crate::exceptions::ExceptionStackFrame;

/// Store-only register read by the harness as program output.
pub const CONSOLE_ADDRESS: u32 = 0x4000_C000;
/// Written by `foo` after `bar` returns normally.
pub const SAFE_MARKER: u32 = 0x5AFE;
/// Written by `baz`.
pub const VIOLATION_MARKER: u32 = 0x0BAD;
/// No zero bytes, so the whole address survives the byte copy.
pub const BAZ_ADDRESS: u32 = 0x0811_1110;

const FILLER: u32 = 0x4141_4141;

/// Attacker input copied into `bar`'s 8-byte buffer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Payload {
    /// Three bytes and a terminator.
    Benign,
    /// `offset` filler words, then baz's address, then a terminator. Offset
    /// 3 lands on `bar`'s stacked LR (buffer, then saved r7).
    Overflow { offset: usize },
    /// baz's address in the first buffer word; used with a shadow pointer.
    BazWord,
}

impl Payload {
    fn words(&self) -> Vec<String> {
        let mut w = Vec::new();
        match self {
            Payload::Benign => w.push("0x00434343".to_string()),
            Payload::Overflow { offset } => {
                w.extend((0..*offset).map(|_| format!("{FILLER:#010x}")));
                w.push("baz".to_string());
                w.push("0".to_string());
            }
            Payload::BazWord => {
                w.push("baz".to_string());
                w.push("0".to_string());
            }
        }
        w
    }
}

const PRELUDE: &str = "\
.org 0x08000000
.func _start hal
    bl main
    bkpt #0
.endfunc

.func puts hal
    movw r1, #0xC000
    movt r1, #0x4000
    str r0, [r1]
    bx lr
.endfunc
";

/// The attack program: `main -> foo -> bar`, where `bar` copies the input
/// byte by byte into a stack buffer and, if `ptr` is non-zero, stores the
/// first buffer word through it.
pub fn scenario_program(payload: &Payload, ptr: u32) -> String {
    let mut s = String::from(PRELUDE);
    s.push_str(
        "
.func main
    push {r7, lr}
    bl foo
    mov r0, #0
    pop {r7, pc}
.endfunc

.func foo
    push {r7, lr}
    movw r0, #:lower16:user_input
    movt r0, #:upper16:user_input
    movw r1, #:lower16:attack_ptr
    movt r1, #:upper16:attack_ptr
    ldr r1, [r1]
    bl bar
foo_after_call:
    movw r0, #0x5AFE
    bl puts
    pop {r7, pc}
.endfunc

.func bar
    push {r7, lr}
    sub sp, #8
    mov r7, r1
    mov r2, sp
bar_copy:
    ldrb r3, [r0]
    strb r3, [r2]
    addw r0, r0, #1
    addw r2, r2, #1
    cmp r3, #0
    bne bar_copy
    cmp r7, #0
    beq bar_done
    ldr r3, [sp]
    str r3, [r7]
bar_done:
    add sp, #8
    pop {r7, pc}
.endfunc

.org 0x08111110
.func baz
    push {r7, lr}
    movw r0, #0x0BAD
    bl puts
    pop {r7, pc}
.endfunc

.org 0x20000000
.label user_input
",
    );
    for w in payload.words() {
        let _ = writeln!(s, ".word {w}");
    }
    let _ = writeln!(s, ".label attack_ptr\n.word {ptr:#010x}");
    s
}

/// One instrumented function called once from trusted code. It names
/// r0-r3 and r6/r7 so the scratch pair is r12 plus a saved r4.
pub fn microbench_program() -> String {
    format!(
        "{PRELUDE}
.func main
    push {{r6, r7, lr}}
    mov r0, #1
    mov r1, #2
    add r2, r0, r1
    mov r3, r2
    mov r6, r3
    mov r7, r6
    bl puts
    pop {{r6, r7, pc}}
.endfunc
"
    )
}

/// The four ESF words the handler prologue protects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EsfWord {
    Xpsr,
    ReturnAddress,
    Lr,
    R12,
}

impl EsfWord {
    pub const ALL: [EsfWord; 4] = [EsfWord::Xpsr, EsfWord::ReturnAddress, EsfWord::Lr, EsfWord::R12];

    pub fn offset(self) -> u32 {
        match self {
            EsfWord::Xpsr => ExceptionStackFrame::XPSR_OFFSET,
            EsfWord::ReturnAddress => ExceptionStackFrame::RETURN_ADDRESS_OFFSET,
            EsfWord::Lr => ExceptionStackFrame::LR_OFFSET,
            EsfWord::R12 => ExceptionStackFrame::R12_OFFSET,
        }
    }

    /// Value the handler writes over the stacked word.
    fn tamper_source(self) -> String {
        match self {
            // N flag set, Thumb bit kept.
            EsfWord::Xpsr => "    movw r7, #0\n    movt r7, #0x8100\n".into(),
            EsfWord::ReturnAddress => "    movw r7, #:lower16:evil\n    movt r7, #:upper16:evil\n".into(),
            EsfWord::Lr | EsfWord::R12 => "    movw r7, #0xBEEF\n    movt r7, #0xDEAD\n".into(),
        }
    }
}

/// `main` runs an undefined instruction at `fault_site`; the UsageFault
/// handler optionally overwrites one stacked word. The handler frame is
/// `push {r7, lr}`, so the ESF starts at `sp + 8`.
pub fn exception_program(tamper: Option<EsfWord>) -> String {
    let body = match tamper {
        None => String::new(),
        Some(w) => format!("{}    str r7, [sp, #{}]\n", w.tamper_source(), 8 + w.offset()),
    };
    format!(
        "{PRELUDE}
.func main
    push {{r7, lr}}
    movw r12, #0x1212
    movw r0, #0x3333
    cmp r0, r0
fault_site:
    udf #0
resume:
    mov r0, #0
    pop {{r7, pc}}
.endfunc

.func UsageFault_Handler handler
    push {{r7, lr}}
{body}    pop {{r7, pc}}
.endfunc

.func SysTick_Handler handler
    push {{r7, lr}}
    movw r0, #0x7777
    pop {{r7, pc}}
.endfunc

.func evil
    movw r0, #0x0BAD
    bl puts
    bkpt #0
.endfunc
"
    )
}

/// `rec(depth)` recurses until the counter reaches zero: exactly `depth`
/// instrumented frames are live at the deepest point.
pub fn recursion_program(depth: u32) -> String {
    format!(
        ".org 0x08000000
.func _start hal
    movw r0, #{lo}
    movt r0, #{hi}
    bl rec
    bkpt #0
.endfunc

.func rec
    push {{r7, lr}}
    subw r0, r0, #1
    cmp r0, #0
    beq rec_out
    bl rec
rec_out:
    pop {{r7, pc}}
.endfunc
",
        lo = depth & 0xFFFF,
        hi = depth >> 16
    )
}
