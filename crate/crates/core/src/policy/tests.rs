use super::*;
use crate::block::{Assignment, BlockConfig, BlockKernel, BlockSched};
use crate::mem::{MemConfig, MemSim, REGION_SIZE};
use crate::sched::{QueueAttrs, SchedConfig, SchedEventKind, SchedSim};

fn all_defaults() -> Vec<PolicySpec> {
    PolicyKind::all()
        .map(|k| {
            let p = match k {
                PolicyKind::MaxSteals => Params::new().with("cap", 2),
                PolicyKind::LatencyBudget => Params::new().with("budget_us", 100),
                PolicyKind::DynTimeslice | PolicyKind::PreemptCtrl => Params::new().with("timeslice", "LC:1000000,BE:200"),
                _ => Params::new(),
            };
            build(k, p).unwrap()
        })
        .collect()
}

#[test]
fn every_catalog_policy_verifies_and_matches_its_domain() {
    for spec in all_defaults() {
        for prog in &spec.programs {
            assert!(prog.is_verified(), "{}", spec.kind);
        }
        for h in spec.hooks() {
            let ok = match spec.domain() {
                PolicyDomain::Host => h.domain() == Domain::Host,
                PolicyDomain::Device => h.domain() == Domain::Device,
                PolicyDomain::Both => true,
            };
            assert!(ok, "{} occupies {h}", spec.kind);
        }
    }
}

#[test]
fn kind_names_round_trip() {
    for k in PolicyKind::all() {
        assert_eq!(PolicyKind::from_name(k.name()), Some(k));
        assert_eq!(PolicyKind::from_name(&k.name().to_lowercase()), Some(k));
    }
    assert_eq!(PolicyKind::from_name("MRU"), None);
}

fn sim3() -> MemSim {
    let mut s = MemSim::new(MemConfig { capacity_bytes: 8 * REGION_SIZE, ..Default::default() }).unwrap();
    s.allocate(0, 3 * REGION_SIZE);
    for r in 0..3 {
        s.activate(r, 0, r as u64).unwrap();
    }
    s
}

#[test]
fn lfu_evicts_least_counted() {
    let counts = [9u64, 1, 5];
    let mut s = sim3();
    s.attach(build_eviction(PolicyKind::Lfu, Params::new()).unwrap().mem_policy().unwrap().unwrap()).unwrap();
    for (r, &n) in counts.iter().enumerate() {
        for i in 0..n {
            s.access(r as u64 * REGION_SIZE, 0, 10 + i).unwrap();
        }
    }
    // ascending-count oracle
    let oracle = (0..3).min_by_key(|&r| counts[r]).unwrap() as u32;
    assert_eq!(s.evict(1, 100), vec![oracle]);
    assert_eq!(s.stats.violations, 0);
}

#[test]
fn fifo_is_the_kernel_default() {
    let mut plain = sim3();
    let mut fifo = sim3();
    if let Some(p) = build_eviction(PolicyKind::Fifo, Params::new()).unwrap().mem_policy().unwrap() {
        assert!(p.hooks().is_empty());
        fifo.attach(p).unwrap();
    }
    assert_eq!(plain.evict(3 * REGION_SIZE, 5), fifo.evict(3 * REGION_SIZE, 5));
}

#[test]
fn quota_lru_prefers_over_quota_tenant() {
    let mut s = MemSim::new(MemConfig { capacity_bytes: 8 * REGION_SIZE, ..Default::default() }).unwrap();
    s.allocate(0, 2 * REGION_SIZE);
    s.allocate(1, 2 * REGION_SIZE);
    let spec = build_eviction(PolicyKind::QuotaLru, Params::new().with("quota.0", 4096).with("quota.1", "8MB")).unwrap();
    s.attach(spec.mem_policy().unwrap().unwrap()).unwrap();
    // tenant 0 is oldest-touched but tenant 1 exceeds nothing; make tenant 1 the LRU one
    s.activate(2, 1, 0).unwrap();
    s.activate(0, 0, 1).unwrap();
    s.activate(1, 0, 2).unwrap();
    s.access(2 * REGION_SIZE, 1, 3).unwrap();
    s.access(0, 0, 50).unwrap();
    let v = s.evict(1, 100);
    assert_eq!(s.regions()[v[0] as usize].tenant, 0);
}

#[test]
fn quota_lru_rejects_nonpositive_quota() {
    assert!(matches!(build_eviction(PolicyKind::QuotaLru, Params::new().with("quota.0", 0)), Err(PolicyError::Param { .. })));
    assert!(build_eviction(PolicyKind::QuotaLru, Params::new().with("quota.0", -5)).is_err());
}

#[test]
fn stride_detector_prefetches_along_the_stride() {
    let mut st = prefetch::Stride::from_params(&Params::new()).unwrap();
    let base = 1000;
    let mut out = Vec::new();
    for i in 0..4 {
        out = st.observe(0, base + 16 * i);
    }
    let last = base + 48;
    let want: Vec<u64> = (1..=32).map(|i| last + 16 * i).collect();
    assert_eq!(out, want);
    // the fault right after the prefetched run continues the stride
    assert_eq!(st.observe(0, last + 16 * 33).first(), Some(&(last + 16 * 34)));
}

#[test]
fn stride_detector_ignores_random_deltas() {
    let mut st = prefetch::Stride::from_params(&Params::new()).unwrap();
    for p in [5u64, 90, 13, 400, 7, 250, 31] {
        assert!(st.observe(0, p).is_empty());
    }
}

#[test]
fn prefetch_params_are_checked() {
    assert!(build_prefetch(PolicyKind::Stride, Params::new().with("history", 0)).is_err());
    assert!(build_prefetch(PolicyKind::AdaptiveSeq, Params::new().with("min_window", 9).with("max_window", 4)).is_err());
    assert!(build_prefetch(PolicyKind::Tree, Params::new().with("threshold", 1.5)).is_err());
    assert!(matches!(build_prefetch(PolicyKind::Lfu, Params::new()), Err(PolicyError::WrongFamily { .. })));
}

#[test]
fn tree_grows_the_subtree_on_a_scan() {
    let mut t = prefetch::Tree::from_params(&Params::new()).unwrap();
    assert_eq!(t.observe(0, 0), (0, 1));
    assert_eq!(t.observe(0, 16), (0, 2));
    assert_eq!(t.observe(0, 32), (0, 4));
    assert_eq!(t.observe(0, 64), (0, 8));
}

#[test]
fn l2_stride_device_program_is_small_and_verified() {
    let spec = build_prefetch(PolicyKind::L2StrideDevice, Params::new()).unwrap();
    let dev: Vec<_> = spec.programs.iter().filter(|p| p.hook == Hook::Access).collect();
    assert_eq!(dev.len(), 1);
    assert!(dev[0].is_verified());
    assert!(dev[0].instructions.len() <= 45);
}

fn sched_with(spec: &PolicySpec) -> SchedSim {
    let mut s = SchedSim::new(SchedConfig::default()).unwrap();
    s.attach(spec.sched_policy().unwrap().unwrap()).unwrap();
    s
}

#[test]
fn dyn_timeslice_sets_class_attrs() {
    let spec = build_sched(PolicyKind::DynTimeslice, Params::new().with("timeslice", "LC:1_000_000,BE:200")).unwrap();
    let mut s = sched_with(&spec);
    s.queue_create(0, TenantClass::Lc, QueueAttrs::default(), 0).unwrap();
    s.queue_create(1, TenantClass::Be, QueueAttrs::default(), 0).unwrap();
    assert_eq!(s.queue(0).unwrap().attrs.timeslice_us, 1_000_000);
    assert_eq!(s.queue(1).unwrap().attrs.timeslice_us, 200);
}

#[test]
fn sched_class_mapping_errors() {
    assert!(matches!(build_sched(PolicyKind::DynTimeslice, Params::new().with("timeslice", "RT:5")), Err(PolicyError::Param { .. })));
    assert!(build_sched(PolicyKind::DynTimeslice, Params::new().with("timeslice", "LC:5")).is_err());
    assert!(matches!(build_sched(PolicyKind::DynTimeslice, Params::new()), Err(PolicyError::Missing(_))));
}

#[test]
fn preempt_ctrl_preempts_within_a_tick() {
    let spec = build_sched(PolicyKind::PreemptCtrl, Params::new().with("timeslice", "LC:1000000,BE:200")).unwrap();
    let mut s = sched_with(&spec);
    let be = s.queue_create(1, TenantClass::Be, QueueAttrs::default(), 0).unwrap().queue();
    let lc = s.queue_create(0, TenantClass::Lc, QueueAttrs::default(), 0).unwrap().queue();
    s.submit(be, 150, 0).unwrap();
    let arrive = 33;
    s.submit(lc, 10, arrive).unwrap();
    s.drain();
    let ev = s.take_events();
    let pre = ev.iter().find(|e| e.kind == SchedEventKind::Preempt).expect("preempted");
    assert_eq!(pre.queue, be);
    assert!(pre.time - arrive <= s.config.tick_us);
}

fn run_block(spec: &PolicySpec, k: &BlockKernel) -> crate::block::BlockRun {
    let mut reg = MapRegistry::new(4);
    let mut h = DeviceHandlers::default();
    spec.attach_device(&mut h, &mut reg).unwrap();
    BlockSched::new(k, BlockConfig::default()).run(&h, &mut reg).unwrap()
}

#[test]
fn block_policies_bound_steals() {
    let k = BlockKernel::register(&[10; 40], 4, &Assignment::Explicit(vec![0; 40])).unwrap();
    let fixed = run_block(&build_block(PolicyKind::Fixed, Params::new()).unwrap(), &k);
    assert_eq!(fixed.total_steals(), 0);
    let capped = run_block(&build_block(PolicyKind::MaxSteals, Params::new().with("cap", 2)).unwrap(), &k);
    assert!(capped.steals.iter().all(|&s| s <= 2));
    assert!(capped.total_steals() > 0);
    let greedy = run_block(&build_block(PolicyKind::Greedy, Params::new()).unwrap(), &k);
    assert!(greedy.total_steals() > capped.total_steals());
}

#[test]
fn block_params_are_checked() {
    assert!(matches!(build_block(PolicyKind::MaxSteals, Params::new()), Err(PolicyError::Missing(_))));
    assert!(build_block(PolicyKind::MaxSteals, Params::new().with("cap", 0)).is_err());
    assert!(build_block(PolicyKind::LatencyBudget, Params::new().with("budget_us", -1)).is_err());
}

#[test]
fn latency_budget_program_is_tiny() {
    let spec = build_block(PolicyKind::LatencyBudget, Params::new().with("budget_us", 40)).unwrap();
    assert!(spec.programs[0].instructions.len() <= 32);
}

#[test]
fn quota_tree_and_timeslice_compose() {
    let q = build_eviction(PolicyKind::QuotaLru, Params::new().with("quota.0", "32MB")).unwrap();
    let t = build_prefetch(PolicyKind::Tree, Params::new().with("band", "0..50")).unwrap();
    let d = build_sched(PolicyKind::DynTimeslice, Params::new().with("timeslice", "LC:1000000,BE:200")).unwrap();
    let mut m = MemSim::new(MemConfig::default()).unwrap();
    m.attach(q.mem_policy().unwrap().unwrap()).unwrap();
    m.attach(t.mem_policy().unwrap().unwrap()).unwrap();
    let mut s = SchedSim::new(SchedConfig::default()).unwrap();
    s.attach(d.sched_policy().unwrap().unwrap()).unwrap();
    let mut hooks: Vec<Hook> = [&q, &t, &d].iter().flat_map(|p| p.hooks()).collect();
    let n = hooks.len();
    hooks.sort();
    hooks.dedup();
    assert_eq!(hooks.len(), n);
}

#[test]
fn policy_file_parses_sections() {
    let text = "# two policies\n[policy]\nname = evict\nkind = lfu\n\n[policy]\nname = ts\nkind = DYN_TIMESLICE\ntimeslice = LC:1000, BE:200\n";
    let specs = parse_policy_file(text).unwrap();
    assert_eq!(specs.len(), 2);
    assert_eq!((specs[0].kind, specs[0].name.as_str()), (PolicyKind::Lfu, "evict"));
    assert_eq!(specs[1].kind, PolicyKind::DynTimeslice);
    assert!(matches!(parse_policy_file("kind = LFU\n"), Err(PolicyError::File { .. })));
    assert!(matches!(parse_policy_file("name = x\nkind = BOGUS\n"), Err(PolicyError::UnknownKind(_))));
    assert!(matches!(parse_policy_file("name = x\nkind = LFU\nkind = FIFO\n"), Err(PolicyError::File { line: 3, .. })));
}

#[test]
fn size_suffixes() {
    assert_eq!(parse_u64("32MB"), Some(32 << 20));
    assert_eq!(parse_u64("1_000"), Some(1000));
    assert_eq!(parse_u64("x"), None);
}
