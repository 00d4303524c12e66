//! Random program generators and oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use regex::Regex;

pub const GLOBALS: u32 = 0x2000_0000;
const GLOBAL_WORDS: u32 = 16;

fn reg(n: u8) -> String {
    format!("r{n}")
}

struct Body<'a, R: Rng> {
    rng: &'a mut R,
    out: String,
    /// Registers holding a value this function wrote or received.
    defined: BTreeSet<u8>,
    writable: Vec<u8>,
    local_bytes: u32,
    /// Stack slots already written.
    locals: BTreeSet<u32>,
    prefix: String,
    labels: usize,
}

impl<R: Rng> Body<'_, R> {
    fn line(&mut self, s: impl AsRef<str>) {
        let _ = writeln!(self.out, "    {}", s.as_ref());
    }

    fn pick_defined(&mut self) -> u8 {
        let v: Vec<u8> = self.defined.iter().copied().collect();
        *v.choose(self.rng).expect("some register is defined")
    }

    fn pick_target(&mut self) -> u8 {
        *self.writable.choose(self.rng).expect("writable set")
    }

    fn op(&mut self) {
        let rd = self.pick_target();
        match self.rng.gen_range(0..9) {
            0 => {
                let imm = self.rng.gen_range(0..256);
                self.line(format!("mov {}, #{imm}", reg(rd)));
            }
            1 => {
                let imm = self.rng.gen_range(0..0x10000);
                self.line(format!("movw {}, #{imm:#x}", reg(rd)));
            }
            2 | 3 => {
                let (a, b) = (self.pick_defined(), self.pick_defined());
                let m = if self.rng.gen_bool(0.5) { "add" } else { "sub" };
                self.line(format!("{m} {}, {}, {}", reg(rd), reg(a), reg(b)));
            }
            4 => {
                let a = self.pick_defined();
                let imm = self.rng.gen_range(0..4096);
                self.line(format!("addw {}, {}, #{imm}", reg(rd), reg(a)));
            }
            5 | 6 => {
                // Global load or store through a freshly built base.
                let off = 4 * self.rng.gen_range(0..GLOBAL_WORDS);
                self.line(format!("movw {}, #:lower16:globals", reg(rd)));
                self.line(format!("movt {}, #:upper16:globals", reg(rd)));
                self.defined.insert(rd);
                let store = self.rng.gen_bool(0.5) && self.defined.len() > 1;
                if store {
                    let rs = self.pick_defined();
                    self.line(format!("str {}, [{}, #{off}]", reg(rs), reg(rd)));
                } else {
                    let rt = self.pick_target();
                    self.line(format!("ldr {}, [{}, #{off}]", reg(rt), reg(rd)));
                    self.defined.insert(rt);
                }
                return;
            }
            7 if self.local_bytes > 0 => {
                let slot = 4 * self.rng.gen_range(0..self.local_bytes / 4);
                if self.locals.contains(&slot) && self.rng.gen_bool(0.5) {
                    self.line(format!("ldr {}, [sp, #{slot}]", reg(rd)));
                } else {
                    let rs = self.pick_defined();
                    self.line(format!("str {}, [sp, #{slot}]", reg(rs)));
                    self.locals.insert(slot);
                    return;
                }
            }
            _ => {
                // Conditional skip over one op.
                let a = self.pick_defined();
                let imm = self.rng.gen_range(0..256);
                let cond = ["beq", "bne", "blt", "bge"].choose(self.rng).unwrap();
                self.labels += 1;
                let label = format!("{}_l{}", self.prefix, self.labels);
                self.line(format!("cmp {}, #{imm}", reg(a)));
                self.line(format!("{cond} {label}"));
                let imm = self.rng.gen_range(0..256);
                // Only redefine an already defined register so both paths
                // agree on what is defined afterwards.
                let t = self.pick_defined();
                if self.writable.contains(&t) {
                    self.line(format!("mov {}, #{imm}", reg(t)));
                }
                let _ = writeln!(self.out, "{label}:");
                return;
            }
        }
        self.defined.insert(rd);
    }
}

/// A benign call tree: `main` and up to 31 more functions, each calling
/// only higher-numbered ones, so call depth stays at most 32. Only R0 is
/// assumed on entry, and a caller-saved register is never read after a
/// call before it is written again. `main` ends by deriving R1-R3 and R12
/// from memory so the final register file is meaningful.
pub fn gen_call_tree<R: Rng>(rng: &mut R) -> String {
    let n = rng.gen_range(1..=32usize);
    // callees[i], built back to front to bound the dynamic call count.
    let mut callees: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut dyn_calls = vec![1u64; n];
    for i in (0..n).rev() {
        let mut want = Vec::new();
        if i + 1 < n && rng.gen_bool(0.85) {
            want.push(i + 1);
        }
        for _ in 0..rng.gen_range(0..3) {
            if i + 1 < n {
                want.push(rng.gen_range(i + 1..n));
            }
        }
        for j in want {
            if dyn_calls[i] + dyn_calls[j] <= 400 {
                callees[i].push(j);
                dyn_calls[i] += dyn_calls[j];
            }
        }
    }

    // A void function may leave R0 unnamed, which frees it as scratch; its
    // callers then treat R0 as dead after the call.
    let returns_value: Vec<bool> = (0..n).map(|i| i == 0 || rng.gen_bool(0.7)).collect();
    let names_r0 = Regex::new(r"\br0\b").unwrap();
    let mut s = String::from(".org 0x08000000\n.func _start hal\n    bl f0\n    bkpt #0\n.endfunc\n\n");
    for i in 0..n {
        let is_main = i == 0;
        let leaf = callees[i].is_empty();
        let frame = !leaf || is_main || rng.gen_bool(0.6);
        let mut saved: Vec<u8> = Vec::new();
        if frame {
            for r in 4..=11u8 {
                if rng.gen_bool(0.3) {
                    saved.push(r);
                }
            }
        }
        let mut writable = vec![0, 1, 2, 3];
        if rng.gen_bool(0.3) || is_main {
            writable.push(12);
        }
        writable.extend(&saved);
        let local_bytes = if frame && rng.gen_bool(0.4) { 8 * rng.gen_range(1..=4) } else { 0 };
        let mut b = Body {
            rng,
            out: String::new(),
            defined: [0u8].into_iter().collect(),
            writable,
            local_bytes,
            locals: BTreeSet::new(),
            prefix: format!("f{i}"),
            labels: 0,
        };
        let list = |extra: &str| {
            let mut v: Vec<String> = saved.iter().map(|r| reg(*r)).collect();
            v.push(extra.to_string());
            format!("{{{}}}", v.join(", "))
        };
        if frame {
            b.line(format!("push {}", list("lr")));
        }
        if local_bytes > 0 {
            b.line(format!("sub sp, #{local_bytes}"));
        }
        let calls = callees[i].clone();
        for c in calls.iter().map(Some).chain([None]) {
            for _ in 0..b.rng.gen_range(1..=6) {
                b.op();
            }
            if let Some(c) = c {
                b.line(format!("bl f{c}"));
                b.defined.retain(|r| *r == 0 || (4..=11).contains(r));
                if !returns_value[*c] {
                    let imm = b.rng.gen_range(0..256);
                    b.line(format!("mov r0, #{imm}"));
                }
            }
        }
        if is_main {
            b.line("movw r12, #:lower16:globals");
            b.line("movt r12, #:upper16:globals");
            b.line("ldr r1, [r12, #0]");
            b.line("ldr r2, [r12, #4]");
            b.line("add r3, r1, r2");
            b.line("ldr r12, [r12, #8]");
        }
        if returns_value[i] && !names_r0.is_match(&b.out) {
            b.line("addw r0, r0, #1");
        }
        if local_bytes > 0 {
            b.line(format!("add sp, #{local_bytes}"));
        }
        if frame {
            if b.rng.gen_bool(0.8) {
                b.line(format!("pop {}", list("pc")));
            } else {
                b.line(format!("pop {}", list("lr")));
                b.line("bx lr");
            }
        } else {
            b.line("bx lr");
        }
        let body = b.out;
        let _ = write!(s, ".func f{i}\n{body}.endfunc\n\n");
    }
    let _ = writeln!(s, ".org {GLOBALS:#x}\n.label globals");
    for _ in 0..GLOBAL_WORDS {
        let _ = writeln!(s, ".word {:#x}", rng.gen::<u32>());
    }
    s
}

/// Straight-line code that pokes at DEMCR and its neighbours with random
/// sizes and values, sometimes after dropping privilege.
pub fn gen_demcr_fuzz<R: Rng>(rng: &mut R) -> String {
    let demcr: u32 = 0xE000_EDFC;
    let mut s = String::from(".func main\n");
    for _ in 0..rng.gen_range(1..=24) {
        let (size, suffix) = match rng.gen_range(0..50) {
            0 => (1u32, "b"),
            1 => (2, "h"),
            _ => (4, ""),
        };
        let target = match rng.gen_range(0..6) {
            0 => demcr - 4,
            1 => demcr + 4,
            2 => 0x2000_0000 + 4 * rng.gen_range(0..64),
            _ => demcr,
        };
        let target = target + size * rng.gen_range(0..4 / size) * u32::from(target != demcr);
        let off = if rng.gen_bool(0.5) { 0 } else { 4 * rng.gen_range(0..4) };
        let base = target - off;
        let value: u32 = if rng.gen_bool(0.3) { 0 } else { rng.gen() };
        let _ = writeln!(s, "    movw r1, #{:#x}\n    movt r1, #{:#x}", base & 0xFFFF, base >> 16);
        let _ = writeln!(s, "    movw r2, #{:#x}\n    movt r2, #{:#x}", value & 0xFFFF, value >> 16);
        let _ = writeln!(s, "    str{suffix} r2, [r1, #{off}]");
        if rng.gen_range(0..40) == 0 {
            s.push_str("    mov r3, #1\n    msr control, r3\n");
        }
    }
    s.push_str("    bkpt #0\n.endfunc\n");
    s
}

/// A function body over random registers, written with every syntax the
/// parser accepts for them: aliases, ranges, mixed case.
pub fn gen_register_soup<R: Rng>(rng: &mut R, name: &str) -> String {
    let mut s = format!(".func {name}\n");
    let gpr = |rng: &mut R| -> String {
        let n: u8 = rng.gen_range(0..13);
        match (n, rng.gen_range(0..4)) {
            (12, 0) => "ip".into(),
            (_, 1) => format!("R{n}"),
            _ => format!("r{n}"),
        }
    };
    for _ in 0..rng.gen_range(0..8) {
        let line = match rng.gen_range(0..7) {
            0 => format!("mov {}, #{}", gpr(rng), rng.gen_range(0..256)),
            1 => format!("add {}, {}, {}", gpr(rng), gpr(rng), gpr(rng)),
            2 => format!("ldr {}, [{}, #{}]", gpr(rng), gpr(rng), 4 * rng.gen_range(0..8)),
            3 => format!("str {}, [sp, #{}]", gpr(rng), 4 * rng.gen_range(0..8)),
            4 => {
                let lo: u8 = rng.gen_range(0..8);
                let hi: u8 = rng.gen_range(lo..12);
                format!("push {{r{lo}-r{hi}, lr}}")
            }
            5 => format!("cmp {}, {}", gpr(rng), gpr(rng)),
            _ => format!("movw {}, #{}", gpr(rng), rng.gen_range(0..65536)),
        };
        let _ = writeln!(s, "    {line}");
    }
    s.push_str("    bx lr\n.endfunc\n");
    s
}

/// Brute-force oracle: scan the source text of one function for register
/// names and return the GPR numbers never mentioned.
pub fn free_gprs_by_scan(source: &str) -> BTreeSet<u8> {
    let range = Regex::new(r"(?i)\br(\d{1,2})\s*-\s*r(\d{1,2})\b").unwrap();
    let single = Regex::new(r"(?i)\b(r\d{1,2}|ip)\b").unwrap();
    let mut used = BTreeSet::new();
    for line in source.lines() {
        let code = line.split(';').next().unwrap_or("");
        let trimmed = code.trim_start();
        if trimmed.starts_with('.') {
            continue;
        }
        // Drop the mnemonic so `rev`-like words can never be misread.
        let operands = trimmed.split_once(char::is_whitespace).map_or("", |(_, rest)| rest);
        for c in range.captures_iter(operands) {
            let (a, b): (u8, u8) = (c[1].parse().unwrap(), c[2].parse().unwrap());
            used.extend(a..=b);
        }
        for c in single.captures_iter(operands) {
            let t = c[1].to_ascii_lowercase();
            let n = if t == "ip" { 12 } else { t[1..].parse().unwrap() };
            used.insert(n);
        }
    }
    (0..=12).filter(|r| !used.contains(r)).collect()
}

/// `main` calls `leaf` `k` times.
pub fn call_sites_program(k: usize) -> String {
    let mut s = String::from(".org 0x08000000\n.func _start hal\n    bl main\n    bkpt #0\n.endfunc\n.func main\n    push {r4, lr}\n    mov r4, #0\n");
    for _ in 0..k {
        s.push_str("    bl leaf\n    add r4, r4, r0\n");
    }
    s.push_str("    mov r0, r4\n    pop {r4, pc}\n.endfunc\n.func leaf\n    mov r0, #3\n    bx lr\n.endfunc\n");
    s
}
