//! Property tests over the IR, verifier and device executor, driven by the
//! random handler generator.

mod common;

use gpux_core::device::{lane_branch_traces, run_hook, ExecMode};
use gpux_core::ir::helpers::helper;
use gpux_core::ir::{assemble, binary, disassemble, interpret, LocalMaps, PolicyProgram};
use gpux_core::verifier::{check, check_budget, verify_default, HookBudget};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{random_ctx, random_maps, Gen, Shape};

fn program(seed: u64, segments: usize, needs_update: bool) -> (String, PolicyProgram) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src = Gen::new(&mut rng).program(Shape { segments, needs_update });
    let prog = assemble(&src).expect("generated programs assemble");
    (src, prog)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn text_and_binary_round_trip(seed in any::<u64>(), segments in 1usize..12) {
        let (_, prog) = program(seed, segments, false);
        let again = assemble(&disassemble(&prog)).unwrap();
        prop_assert_eq!(&again.instructions, &prog.instructions);
        prop_assert_eq!(again.hook, prog.hook);
        prop_assert_eq!(&again.maps, &prog.maps);
        let decoded = binary::decode(&binary::encode(&prog)).unwrap();
        prop_assert_eq!(decoded.instructions, prog.instructions);
    }

    #[test]
    fn verification_is_pure(seed in any::<u64>(), segments in 1usize..12) {
        let (_, prog) = program(seed, segments, false);
        let schema = gpux_core::ir::context_schema(prog.hook);
        let budget = HookBudget::default_for(prog.hook);
        let a = check(&prog, &schema, &budget);
        let b = check(&prog, &schema, &budget);
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn accepted_programs_fit_their_budget(seed in any::<u64>(), segments in 1usize..12) {
        let (_, mut prog) = program(seed, segments, false);
        if verify_default(&mut prog).accepted() {
            prop_assert!(check_budget(&prog, &HookBudget::default_for(prog.hook)).ok);
        }
    }

    #[test]
    fn accepted_programs_do_not_diverge(seed in any::<u64>(), segments in 1usize..10, ctx_seed in any::<u64>()) {
        let (src, mut prog) = program(seed, segments, false);
        prop_assume!(verify_default(&mut prog).accepted());
        let mut rng = ChaCha8Rng::seed_from_u64(ctx_seed);
        let ctx = random_ctx(&mut rng);
        let maps = random_maps(&mut rng);
        let traces = lane_branch_traces(&prog, &ctx, &maps).unwrap();
        prop_assert!(traces.windows(2).all(|w| w[0] == w[1]), "lanes diverged:\n{}", src);
        let mut m = maps.clone();
        prop_assert!(run_hook(&prog, &ctx, &mut m, ExecMode::PerLane).is_ok());
    }

    #[test]
    fn interpretation_is_deterministic_and_domain_checked(seed in any::<u64>(), segments in 1usize..10, ctx_seed in any::<u64>()) {
        let (_, mut prog) = program(seed, segments, false);
        prop_assume!(verify_default(&mut prog).accepted());
        let mut rng = ChaCha8Rng::seed_from_u64(ctx_seed);
        let ctx = random_ctx(&mut rng);
        let maps = random_maps(&mut rng);
        let schema = gpux_core::ir::context_schema(prog.hook);
        let leader = ctx.leader().unwrap();
        let run = || {
            let mut bytes = ctx.lane_bytes(&schema, leader);
            let mut m = maps.clone();
            let out = interpret(&prog, &mut bytes, &mut m);
            (out, m, bytes)
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(&a, &b);
        if let Ok(out) = a.0 {
            for e in &out.effects {
                if let gpux_core::ir::Effect::Call { helper: id, .. } = e {
                    let spec = helper(*id).unwrap();
                    prop_assert!(spec.domain.admits(prog.hook.domain()), "{} called from a {:?} hook", spec.name, prog.hook.domain());
                }
            }
        }
    }

    #[test]
    fn warp_leader_matches_per_lane(seed in any::<u64>(), segments in 1usize..8, ctx_seed in any::<u64>()) {
        let (src, mut prog) = program(seed, segments, true);
        prop_assume!(verify_default(&mut prog).accepted());
        let mut rng = ChaCha8Rng::seed_from_u64(ctx_seed);
        let ctx = random_ctx(&mut rng);
        let start = random_maps(&mut rng);
        let (mut pl, mut wl) = (start.clone(), start.clone());
        let a = run_hook(&prog, &ctx, &mut pl, ExecMode::PerLane).unwrap();
        let b = run_hook(&prog, &ctx, &mut wl, ExecMode::WarpLeader).unwrap();
        prop_assert_eq!(&pl, &wl, "maps differ:\n{}", src);
        // the broadcast decision reaches every active lane unchanged
        prop_assert!(b.lane_decisions.iter().all(|&(_, d)| d == b.decision));
        prop_assert_eq!(b.lane_decisions.len() as u32, ctx.active_mask.count_ones());
        if ctx.active_mask.count_ones() > 1 {
            prop_assert!(b.cost_ns < a.cost_ns);
        }
    }
}

#[test]
fn empty_handler_leaves_maps_empty() {
    let (_, mut prog) = program(7, 0, false);
    assert!(verify_default(&mut prog).accepted());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ctx = random_ctx(&mut rng);
    let mut maps = LocalMaps::new(1);
    run_hook(&prog, &ctx, &mut maps, ExecMode::WarpLeader).unwrap();
    assert!(maps.maps[0].is_empty());
}
