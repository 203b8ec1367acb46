//! Catalog policies and end-to-end scenario runs.

use gpux_core::harness::{gen_trace, run_scenario, GenParams, MetricsReport, Pattern, Scenario};
use gpux_core::ir::context_schema;
use gpux_core::mem::PAGE_SIZE;
use gpux_core::policy::{build, Params, PolicyKind};
use gpux_core::verifier::{check, HookBudget};
use proptest::prelude::*;

fn params_for(kind: PolicyKind) -> Params {
    match kind {
        PolicyKind::MaxSteals => Params::new().with("cap", 4),
        PolicyKind::LatencyBudget => Params::new().with("budget_us", 500),
        PolicyKind::DynTimeslice | PolicyKind::PreemptCtrl => Params::new().with("timeslice", "LC:1000000,BE:200"),
        _ => Params::new(),
    }
}

#[test]
fn every_catalog_policy_verifies_under_default_budgets() {
    for kind in PolicyKind::all() {
        let spec = build(kind, params_for(kind)).unwrap_or_else(|e| panic!("{kind}: {e}"));
        for prog in &spec.programs {
            let report = check(prog, &context_schema(prog.hook), &HookBudget::default_for(prog.hook));
            assert!(report.accepted(), "{kind} on {}: {report}", prog.hook);
            assert!(prog.is_verified());
        }
    }
}

#[test]
fn latency_budget_program_stays_small() {
    let spec = build(PolicyKind::LatencyBudget, params_for(PolicyKind::LatencyBudget)).unwrap();
    assert!(spec.programs.iter().all(|p| p.len() <= 32));
}

#[test]
fn quota_tree_and_timeslice_compose() {
    let sc = Scenario::parse(
        "[tenant.0]\nworking_set = 4MB\nqueues = 1\nlaunches = 4\n\
         [policy]\nkind = QUOTA_LRU\n[policy]\nkind = TREE\n[policy]\nkind = DYN_TIMESLICE\ntimeslice = LC:20000,BE:200\n",
    )
    .unwrap();
    assert!(sc.validate().is_empty(), "{:?}", sc.validate());
    run_scenario(&sc).unwrap();
}

#[test]
fn shipped_policy_files_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../policies");
    let mut n = 0;
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        let text = std::fs::read_to_string(&p).unwrap();
        let specs = gpux_core::policy::parse_policy_file(&text).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert!(!specs.is_empty());
        n += 1;
    }
    assert!(n >= 4);
}

fn pattern() -> impl Strategy<Value = &'static str> {
    prop_oneof![Just("SEQ_SCAN"), Just("STRIDE(64KB)"), Just("RANDOM"), Just("ZIPF(0.9)"), Just("PERIODIC_SEQ(256)")]
}

fn policy() -> impl Strategy<Value = &'static str> {
    prop_oneof![
        Just(""),
        Just("[policy]\nkind = LFU\n"),
        Just("[policy]\nkind = STRIDE\n"),
        Just("[policy]\nkind = ADAPTIVE_SEQ\n"),
        Just("[policy]\nkind = TREE\n[policy]\nkind = QUOTA_LRU\n"),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn reports_reconcile_with_their_logs(
        seed in 0u64..1000,
        a in pattern(),
        b in pattern(),
        p in policy(),
        ws in 2u64..8,
    ) {
        let text = format!(
            "seed = {seed}\n[device]\ncapacity = 4MB\n\
             [tenant.0]\nworking_set = {ws}MB\npattern = {a}\nevents = 800\n\
             [tenant.1]\npriority = 80\nworking_set = 3MB\npattern = {b}\nevents = 800\n{p}"
        );
        let sc = Scenario::parse(&text).unwrap();
        let out = run_scenario(&sc).unwrap();
        prop_assert!(out.report.reconcile(&out.log).is_ok(), "{:?}", out.report.reconcile(&out.log));
        let migrations = out.log.of_kind("mem", "MIGRATE").count() as u64;
        let tenant_bytes: u64 = out.report.tenants.iter().map(|t| t.migrated_bytes).sum();
        prop_assert_eq!(migrations * PAGE_SIZE, tenant_bytes);
        let again = run_scenario(&sc).unwrap();
        prop_assert_eq!(out.log.to_tsv(), again.log.to_tsv());
        let back = MetricsReport::from_json(&out.report.to_json()).unwrap();
        prop_assert_eq!(back, out.report);
    }

    #[test]
    fn generated_patterns_keep_their_shape(seed in any::<u64>(), pages in 16u64..512, events in 2u64..400) {
        let p = GenParams::new(pages * PAGE_SIZE, events);
        let page_of = |t: &gpux_core::harness::Trace| t.accesses().map(|(_, o)| o / PAGE_SIZE).collect::<Vec<_>>();

        let seq = page_of(&gen_trace(Pattern::SeqScan, &p, seed).unwrap());
        prop_assert!(seq.windows(2).all(|w| w[1] == (w[0] + 1) % pages));

        let stride = page_of(&gen_trace(Pattern::Stride { bytes: 4 * PAGE_SIZE }, &p, seed).unwrap());
        prop_assert!(stride.windows(2).all(|w| w[1] == (w[0] + 4) % pages || w[1] < w[0]));

        let period = 8.min(pages);
        let per = page_of(&gen_trace(Pattern::PeriodicSeq { period }, &p, seed).unwrap());
        prop_assert!((period as usize..per.len()).all(|i| per[i] == per[i - period as usize]));

        let random = page_of(&gen_trace(Pattern::Random, &p, seed).unwrap());
        prop_assert!(random.iter().all(|&x| x < pages));
    }
}
