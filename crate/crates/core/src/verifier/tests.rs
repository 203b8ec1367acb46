use super::*;
use crate::ir::{assemble, context_schema};

fn report(src: &str) -> VerifierReport {
    let mut p = assemble(src).unwrap();
    verify_default(&mut p)
}

fn rule(src: &str) -> Option<Rule> {
    report(src).rule()
}

#[test]
fn lane_varying_branch_rejected() {
    let src = ".hook access\nldctxdw r1, lane_addr\nmov r0, 0\njeq r1, 0, +1\nmov r0, 1\nexit";
    assert_eq!(rule(src), Some(Rule::UniformBranch));
    let r = report(src);
    assert_eq!(r.verdict, Verdict::Reject);
    assert_eq!(r.violations[0].index, 2);
}

#[test]
fn uniform_twin_accepted() {
    let src = ".hook access\nldctxdw r1, warp_id\nmov r0, 0\njeq r1, 0, +1\nmov r0, 1\nexit";
    let mut p = assemble(src).unwrap();
    let r = verify_default(&mut p);
    assert!(r.accepted(), "{r}");
    assert!(p.is_verified());
}

#[test]
fn map_loaded_loop_bound_rejected() {
    // the bound comes from an SM-local map, which device code must treat as lane-varying
    let src = "
        .hook access
        .map limits array:4 sm
        mov r1, 0
        mov r2, 0
        call map_lookup
        mov r7, r0
        mov r6, 0
    top:
        add r6, 1
        jlt r6, r7, top
        mov r0, 0
        exit";
    assert_eq!(rule(src), Some(Rule::UniformLoopBound));
}

#[test]
fn warp_reduced_key_accepted() {
    let src = "
        .hook access
        .map counts hash global
        ldctxdw r1, lane_addr
        call warp_reduce_add
        mov r2, r0
        mov r1, 0
        mov r3, 1
        call map_update
        mov r0, 0
        exit";
    let r = report(src);
    assert!(r.accepted(), "{r}");
}

#[test]
fn lane_key_rejected() {
    let src = ".hook access\n.map counts hash global\nldctxdw r2, lane_addr\nmov r1, 0\nmov r3, 1\ncall map_update\nmov r0, 0\nexit";
    assert_eq!(rule(src), Some(Rule::UniformMapKey));
}

#[test]
fn barrier_rejected() {
    assert_eq!(rule(".hook access\ncall gdev_grid_sync\nmov r0, 0\nexit"), Some(Rule::ForbiddenSync));
}

#[test]
fn lane_varying_atomic_rejected() {
    let src = ".hook access\nldctxdw r1, lane_addr\nmov r2, 1\ncall gdev_atomic_add\nmov r0, 0\nexit";
    assert_eq!(rule(src), Some(Rule::NonUniformAtomic));
    let src = ".hook access\nldctxdw r1, block_id\nmov r2, 1\ncall gdev_atomic_add\nmov r0, 0\nexit";
    assert!(report(src).accepted());
}

#[test]
fn uniformity_examples() {
    let p = assemble(
        ".hook access\nmov r1, 4\nldctxdw r2, lane_addr\nmov r3, r2\nadd r3, 8\nmov r1, r2\ncall warp_reduce_add\nmov r4, r0\nmov r0, 0\nexit",
    )
    .unwrap();
    let s = uniformity_analysis(&p, &context_schema(p.hook)).unwrap();
    assert_eq!(s.reg(1, 1), Tag::Uniform);
    assert_eq!(s.reg(4, 3), Tag::LaneVarying);
    assert_eq!(s.reg(7, 4), Tag::Uniform);
}

#[test]
fn stack_slots_carry_tags() {
    let src = ".hook access\nldctxdw r1, lane_addr\nstxdw [r10-8], r1\nldxdw r2, [r10-8]\nmov r0, 0\njeq r2, 0, +1\nmov r0, 1\nexit";
    assert_eq!(rule(src), Some(Rule::UniformBranch));
    let src = ".hook access\nldctxdw r1, warp_id\nstxdw [r10-8], r1\nldxdw r2, [r10-8]\nmov r0, 0\njeq r2, 0, +1\nmov r0, 1\nexit";
    assert!(report(src).accepted());
}

#[test]
fn merge_joins_to_lane_varying() {
    // r2 is uniform on one path and lane-varying on the other
    let src = ".hook access\nldctxdw r1, warp_id\nmov r2, 0\njeq r1, 0, +1\nldctxdw r2, lane_addr\nmov r0, 0\njeq r2, 0, +1\nmov r0, 1\nexit";
    let r = report(src);
    assert_eq!(r.rule(), Some(Rule::UniformBranch));
    assert_eq!(r.violations[0].index, 5);
}

#[test]
fn host_programs_skip_uniformity() {
    let src = ".hook gpu_access\nldctxdw r1, region_id\nmov r0, 0\njeq r1, 0, +1\nmov r0, 1\nexit";
    assert!(report(src).accepted());
}

#[test]
fn lane_varying_return_and_decision() {
    assert_eq!(rule(".hook access\nldctxdw r0, lane_addr\nexit"), Some(Rule::UniformReturn));
    assert_eq!(rule(".hook access\nldctxdw r1, lane_addr\nstctxdw decision, r1\nmov r0, 0\nexit"), Some(Rule::UniformSideEffect));
    assert_eq!(rule(".hook access\nldctxdw r1, lane_addr\ncall gdev_mem_prefetch\nmov r0, 0\nexit"), Some(Rule::UniformSideEffect));
}

#[test]
fn standard_pass_rules() {
    assert_eq!(rule("exit"), Some(Rule::Uninit));
    assert_eq!(rule("mov r0, 0"), Some(Rule::NoExit));
    assert_eq!(rule("mov r0, 0\nja +5\nexit"), Some(Rule::BadJump));
    assert_eq!(rule("mov r10, 0\nmov r0, 0\nexit"), Some(Rule::BadInsn));
    assert_eq!(rule("ldxdw r0, [r10-8]\nexit"), Some(Rule::Uninit));
    assert_eq!(rule("stdw [r10+0], 1\nmov r0, 0\nexit"), Some(Rule::OobAccess));
    assert_eq!(rule("stdw [r10-520], 1\nmov r0, 0\nexit"), Some(Rule::OobAccess));
    assert_eq!(rule("mov r1, r10\nstdw [r1-8], 1\nmov r0, 0\nexit"), Some(Rule::OobAccess));
    assert_eq!(rule(".hook gpu_access\nldctxdw r0, 4096\nexit"), Some(Rule::OobAccess));
    assert_eq!(rule(".hook gpu_access\nldctxdw r0, 4\nexit"), Some(Rule::OobAccess));
    assert_eq!(rule(".hook gpu_access\nstctxdw region_id, 1\nmov r0, 0\nexit"), Some(Rule::CtxWrite));
    assert_eq!(rule("call 999\nmov r0, 0\nexit"), Some(Rule::UnknownHelper));
    assert_eq!(rule(".hook access\nmov r1, 0\ncall bpf_gpu_move_head\nmov r0, 0\nexit"), Some(Rule::HelperDomain));
    assert_eq!(rule(".hook gpu_access\nmov r1, 0\ncall gdev_mem_prefetch\nmov r0, 0\nexit"), Some(Rule::HelperDomain));
    assert_eq!(rule(".hook gpu_access\nmov r1, 3\nmov r2, 0\ncall map_lookup\nexit"), Some(Rule::BadMap));
}

#[test]
fn partial_stack_init_is_uninit() {
    assert_eq!(rule("stw [r10-8], 1\nldxdw r0, [r10-8]\nexit"), Some(Rule::Uninit));
    assert!(report("stw [r10-8], 1\nstw [r10-4], 2\nldxdw r0, [r10-8]\nexit").accepted());
}

#[test]
fn uninit_after_call_clobber() {
    assert_eq!(rule("mov r1, 1\ncall ktime_get_ns\nmov r0, r1\nexit"), Some(Rule::Uninit));
}

#[test]
fn loop_shapes() {
    let ok = "mov r6, 0\ntop:\nadd r6, 1\njlt r6, 8, top\nmov r0, 0\nexit";
    assert!(report(ok).accepted());
    let down = "mov r6, 8\ntop:\nsub r6, 1\njgt r6, 0, top\nmov r0, 0\nexit";
    assert!(report(down).accepted());
    // backward unconditional jump
    assert_eq!(rule("mov r0, 0\ntop:\nja top\nexit"), Some(Rule::UnboundedLoop));
    // signed comparison
    assert_eq!(rule("mov r6, 0\ntop:\nadd r6, 1\njslt r6, 8, top\nmov r0, 0\nexit"), Some(Rule::UnboundedLoop));
    // wrong direction
    assert_eq!(rule("mov r6, 0\ntop:\nsub r6, 1\njlt r6, 8, top\nmov r0, 0\nexit"), Some(Rule::UnboundedLoop));
    // counter never changes
    assert_eq!(rule("mov r6, 0\ntop:\nmov r1, 1\njlt r6, 8, top\nmov r0, 0\nexit"), Some(Rule::UnboundedLoop));
    // counter written twice
    assert_eq!(rule("mov r6, 0\ntop:\nadd r6, 1\nmul r6, 2\njlt r6, 8, top\nmov r0, 0\nexit"), Some(Rule::UnboundedLoop));
    // skippable update
    let skip = "ldctxdw r1, warp_id\nmov r6, 0\ntop:\njeq r1, 0, +1\nadd r6, 1\njlt r6, 8, top\nmov r0, 0\nexit";
    assert_eq!(rule(skip), Some(Rule::UnboundedLoop));
    // bound modified inside the body
    let moving = "mov r7, 8\nmov r6, 0\ntop:\nadd r6, 1\nadd r7, 1\njlt r6, r7, top\nmov r0, 0\nexit";
    assert_eq!(rule(moving), Some(Rule::UnboundedLoop));
}

#[test]
fn irreducible_entry_rejected() {
    let src = "mov r6, 0\nldctxdw r1, warp_id\njeq r1, 0, mid\ntop:\nadd r6, 1\nmid:\nmov r2, 0\njlt r6, 4, top\nmov r0, 0\nexit";
    assert_eq!(rule(src), Some(Rule::Irreducible));
}

#[test]
fn budget_examples() {
    // ten straight-line instructions
    let p = assemble(&format!("{}exit", "mov r0, 0\n".repeat(9))).unwrap();
    let b = HookBudget { hook: p.hook, max_instructions: 64, max_helper_calls: 8, max_memory_ops: 16 };
    let c = check_budget(&p, &b);
    assert!(c.ok);
    assert_eq!(c.worst.instructions, 10);

    // loop of 8 with one map update of cost 2: 8 * 2 = 16 weighted calls,
    // 1 + 8 * 6 + 2 = 51 instructions
    let p = assemble(
        ".hook access\n.map m hash global\nmov r6, 0\ntop:\nmov r1, 0\nmov r2, 1\nmov r3, 1\ncall map_update\nadd r6, 1\njlt r6, 8, top\nmov r0, 0\nexit",
    )
    .unwrap();
    let c = check_budget(&p, &b);
    assert_eq!(c.worst.helper_calls, 16);
    assert_eq!(c.worst.instructions, 51);
    assert!(!c.ok);
    assert_eq!(report(&super::super::ir::disassemble(&p)).rule(), Some(Rule::Budget));

    let p = assemble("exit").unwrap();
    let c = check_budget(&p, &b);
    assert!(c.ok);
    assert_eq!(c.worst.instructions, 1);
}

#[test]
fn nested_loops_multiply() {
    let src = "mov r6, 0\nouter:\nmov r7, 0\ninner:\nadd r7, 1\njlt r7, 4, inner\nadd r6, 1\njlt r6, 3, outer\nmov r0, 0\nexit";
    let p = assemble(src).unwrap();
    let c = check_budget(&p, &HookBudget::default_for(p.hook));
    // 1 + 3 * (1 + 4 * 2 + 2) + 2
    assert_eq!(c.worst.instructions, 36);
    assert!(report(src).accepted());
}

#[test]
fn masked_bound_from_context() {
    let src = ".hook access\nldctxdw r7, warp_id\nand r7, 7\nmov r6, 0\ntop:\nadd r6, 1\njlt r6, r7, top\nmov r0, 0\nexit";
    let p = assemble(src).unwrap();
    let c = check_budget(&p, &HookBudget::default_for(p.hook));
    assert_eq!(c.worst.instructions, 3 + 7 * 2 + 2);
    assert!(report(src).accepted());
    // unmasked context bound has no finite trip count
    let src = ".hook access\nldctxdw r7, warp_id\nmov r6, 0\ntop:\nadd r6, 1\njlt r6, r7, top\nmov r0, 0\nexit";
    assert_eq!(rule(src), Some(Rule::Budget));
}

#[test]
fn schema_mismatch() {
    let mut p = assemble(".hook access\nmov r0, 0\nexit").unwrap();
    let r = verify(&mut p, &context_schema(crate::ir::Hook::GpuAccess), &HookBudget::default_for(crate::ir::Hook::Access));
    assert_eq!(r.rule(), Some(Rule::SchemaMismatch));
    assert!(!p.is_verified());
}

#[test]
fn report_is_pure_and_textual() {
    let src = ".hook access\nldctxdw r1, lane_addr\nmov r0, 0\njeq r1, 0, +1\nmov r0, 1\nexit";
    let a = report(src).to_string();
    let b = report(src).to_string();
    assert_eq!(a, b);
    assert!(a.starts_with("verdict REJECT\nviolation 2 UNIFORM_BRANCH"));
}

#[test]
fn rule_names_round_trip() {
    for r in Rule::ALL {
        assert_eq!(r.as_str().parse::<Rule>().unwrap(), *r);
    }
}
