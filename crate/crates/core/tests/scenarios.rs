use watchstack::asm::parse;
use watchstack::exceptions::ExcId;
use watchstack::harness::{
    run_preinit_handler_test, run_program, run_recursion, run_scenario_1_with, run_scenario_2, run_scenario_2_at,
    InitMode, Outcome, Payload, Raise, RunConfig, BAZ_ADDRESS, SAFE_MARKER,
};
use watchstack::instrument::{instrument_program, SequenceKind, ShadowStackConfig, DEFAULT_SS_START};
use watchstack::machine::{HaltReason, Machine, NoHooks};
use watchstack::protect::{init_write_protection, is_protection_initialized, ViolationPolicy};

#[test]
fn overflow_offsets_differential() {
    for offset in 0..=8 {
        let open = run_scenario_1_with(&Payload::Overflow { offset }, false).unwrap();
        assert_eq!(open.visited("baz"), offset == 3, "offset {offset} unprotected");
        let shut = run_scenario_1_with(&Payload::Overflow { offset }, true).unwrap();
        assert!(!shut.visited("baz"), "offset {offset} protected reached baz");
        assert_eq!(shut.outcome, Outcome::SafeReturn, "offset {offset}: {:?}", shut.fault);
        assert_eq!(shut.console, vec![SAFE_MARKER]);
    }
}

#[test]
fn naive_sequences_also_protect() {
    let program = parse(&watchstack::harness::scenario_program(&Payload::Overflow { offset: 3 }, 0)).unwrap();
    let config = RunConfig { sequence: SequenceKind::Naive, ..RunConfig::protected() };
    let r = run_program(&program, &config).unwrap();
    assert_eq!(r.outcome, Outcome::SafeReturn);
}

#[test]
fn scenario_2_targets() {
    let live = run_scenario_2(ViolationPolicy::Reset).unwrap();
    assert_eq!(live.outcome, Outcome::ViolationTrapped);
    assert_eq!(live.violations.len(), 1);
    assert_eq!(live.violations[0].suppressed_value, BAZ_ADDRESS);

    let unused = run_scenario_2_at(DEFAULT_SS_START + 0x7FFC, ViolationPolicy::Reset).unwrap();
    assert_eq!(unused.outcome, Outcome::ViolationTrapped);
    assert_eq!(unused.machine.memory.read_u32(DEFAULT_SS_START + 0x7FFC), 0);

    let outside = run_scenario_2_at(0x2000_1000, ViolationPolicy::Reset).unwrap();
    assert_eq!(outside.outcome, Outcome::SafeReturn);
    assert!(outside.violations.is_empty());
    assert_eq!(outside.machine.memory.read_u32(0x2000_1000), BAZ_ADDRESS);
}

#[test]
fn report_policy_suppresses_and_continues() {
    let r = run_scenario_2_at(DEFAULT_SS_START + 8, ViolationPolicy::Report).unwrap();
    assert_eq!(r.outcome, Outcome::ViolationTrapped);
    assert_eq!(r.halt_reason, Some(HaltReason::Normal));
    assert_eq!(r.console, vec![SAFE_MARKER]);
    assert!(!r.visited("baz"));
}

#[test]
fn handler_before_init_leaves_shadow_alone() {
    let src = ".func _start hal\n    nop\n    bkpt #0\n.endfunc\n.func SysTick_Handler handler\n    push {r7, lr}\n    mov r7, #1\n    pop {r7, pc}\n.endfunc";
    let config = RunConfig {
        protected: true,
        init: InitMode::Never,
        raises: vec![Raise { exc: ExcId::SysTick, at_step: 0 }],
        ..RunConfig::default()
    };
    let r = run_program(&parse(src).unwrap(), &config).unwrap();
    assert_eq!(r.outcome, Outcome::SafeReturn, "{:?}", r.events);
    assert!(r.events.iter().any(|e| e.contains("ExceptionEntered(SysTick)")));
    assert_eq!(r.machine.ssp(), 0);
    assert_eq!(r.machine.peek_u32(0xE000_1028), 0);
    for a in (0..64).step_by(4).chain((0..64).map(|i| DEFAULT_SS_START + 4 * i)) {
        assert_eq!(r.machine.memory.read_u32(a), 0, "{a:#x} written");
    }

    let r = run_preinit_handler_test().unwrap();
    assert_eq!(r.outcome, Outcome::SafeReturn);
    let entered = r.events.iter().position(|e| e.contains("ExceptionEntered(SysTick)")).unwrap();
    let armed = r.events.iter().position(|e| e.contains("protection initialized")).unwrap();
    assert!(entered < armed);
    assert_eq!(r.machine.ssp(), DEFAULT_SS_START);
}

#[test]
fn initialized_mid_prologue() {
    let src = watchstack::harness::microbench_program();
    let config = ShadowStackConfig::default();
    let done = instrument_program(&parse(&src).unwrap(), &config, SequenceKind::Optimal).unwrap();
    let mut m = Machine::load(&done.program).unwrap();
    init_write_protection(&mut m, &config);
    let mut saw_window = false;
    while !m.halted {
        m.step(&mut NoHooks);
        if m.dwt.groups[0].function == 0 {
            saw_window = true;
            assert!(is_protection_initialized(&m));
        }
    }
    assert!(saw_window);
    assert!(m.pending_hits.is_empty());
}

#[test]
fn debugmon_routed_to_program_handler() {
    let src = format!(
        ".func _start hal\n    movw r0, #{lo}\n    movt r0, #{hi}\n    str r0, [r0]\n    bkpt #0\n.endfunc\n\
         .func DebugMon_Handler hal\n    movw r1, #0xC000\n    movt r1, #0x4000\n    movw r2, #0xD\n    str r2, [r1]\n    bx lr\n.endfunc",
        lo = DEFAULT_SS_START & 0xFFFF,
        hi = DEFAULT_SS_START >> 16
    );
    let config = RunConfig { route_debugmon: true, ..RunConfig::protected() };
    let r = run_program(&parse(&src).unwrap(), &config).unwrap();
    assert_eq!(r.outcome, Outcome::ViolationTrapped);
    assert_eq!(r.halt_reason, Some(HaltReason::Normal));
    assert_eq!(r.console, vec![0xD]);
    assert!(r.events.iter().any(|e| e.contains("ExceptionEntered(DebugMon)")));
    assert_eq!(r.machine.memory.read_u32(DEFAULT_SS_START), 0);
}

#[test]
fn small_shadow_stack_overflows() {
    let config = RunConfig { shadow: ShadowStackConfig::new(DEFAULT_SS_START, 3).unwrap(), ..RunConfig::protected() };
    assert_eq!(config.shadow.capacity(), 2);
    assert_eq!(run_recursion(2, &config).unwrap().outcome, Outcome::SafeReturn);
    let r = run_recursion(3, &config).unwrap();
    assert_eq!(r.halt_reason, Some(HaltReason::StackOverflow));
}

#[test]
fn depth_sweep() {
    for d in [1, 10, 100, 8192] {
        let r = run_recursion(d, &RunConfig::protected()).unwrap();
        assert_eq!(r.outcome, Outcome::SafeReturn, "depth {d}");
        // Baseline recursion is unaffected by the shadow stack size.
        assert_eq!(run_recursion(d, &RunConfig::baseline()).unwrap().outcome, Outcome::SafeReturn);
    }
    let r = run_recursion(8193, &RunConfig::protected()).unwrap();
    assert_eq!(r.outcome, Outcome::Fault);
    assert_eq!(r.halt_reason, Some(HaltReason::StackOverflow));
}

#[test]
fn cycle_additivity_on_scenarios() {
    for payload in [Payload::Benign, Payload::Overflow { offset: 5 }] {
        let b = run_scenario_1_with(&payload, false).unwrap();
        let s = run_scenario_1_with(&payload, true).unwrap();
        if b.outcome == Outcome::SafeReturn {
            assert_eq!(s.cycles as i64 - b.cycles as i64, s.accounting.overhead());
        }
    }
}
