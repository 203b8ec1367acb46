//! Property tests over the memory, scheduling, block and map simulators.

use std::collections::BTreeMap;

use gpux_core::block::{Assignment, BlockConfig, BlockKernel, BlockSched};
use gpux_core::device::DeviceHandlers;
use gpux_core::mem::{MemConfig, MemSim, PAGE_SIZE, REGION_SIZE};
use gpux_core::policy::{build, Params, PolicyKind};
use gpux_core::sched::{QueueAttrs, SchedConfig, SchedSim, TenantClass};
use gpux_core::xmaps::{MapKind, MapRegistry, Origin, Placement, ReadDomain};
use proptest::prelude::*;

fn mem_sim(capacity_regions: u64, policy: Option<PolicyKind>, params: Params) -> MemSim {
    let config = MemConfig { capacity_bytes: capacity_regions * REGION_SIZE, hit_sample: 4, ..MemConfig::default() };
    let mut sim = MemSim::new(config).unwrap();
    if let Some(kind) = policy {
        let spec = build(kind, params).unwrap();
        sim.attach(spec.mem_policy().unwrap().unwrap()).unwrap();
    }
    sim
}

fn mem_policy() -> impl Strategy<Value = Option<PolicyKind>> {
    prop_oneof![
        Just(None),
        Just(Some(PolicyKind::Lfu)),
        Just(Some(PolicyKind::Stride)),
        Just(Some(PolicyKind::AdaptiveSeq)),
        Just(Some(PolicyKind::Tree)),
        Just(Some(PolicyKind::QuotaLru)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn residency_accounting_holds_after_every_access(
        policy in mem_policy(),
        pages in prop::collection::vec(0u64..2048, 1..600),
        cap in 1u64..4,
    ) {
        let mut sim = mem_sim(cap, policy, Params::new());
        sim.allocate(0, 2048 * PAGE_SIZE);
        for (i, p) in pages.iter().enumerate() {
            sim.access(p * PAGE_SIZE, 0, i as u64 * 100).unwrap();
            prop_assert!(sim.resident_bytes() <= sim.config.capacity_bytes);
            if let Err(e) = sim.check_invariants() {
                return Err(TestCaseError::fail(e));
            }
        }
    }

    #[test]
    fn eviction_frees_what_was_asked(
        policy in mem_policy(),
        pages in prop::collection::vec(0u64..2048, 1..300),
        needed_pages in 1u64..1024,
    ) {
        let mut sim = mem_sim(2, policy, Params::new());
        sim.allocate(0, 2048 * PAGE_SIZE);
        for (i, p) in pages.iter().enumerate() {
            sim.access(p * PAGE_SIZE, 0, i as u64 * 100).unwrap();
        }
        let before = sim.resident_bytes();
        let needed = needed_pages * PAGE_SIZE;
        sim.evict(needed, 1 << 40);
        let freed = before - sim.resident_bytes();
        prop_assert!(freed >= needed.min(before), "freed {} of {} (had {})", freed, needed, before);
    }

    #[test]
    fn no_policy_runs_are_reproducible(pages in prop::collection::vec(0u64..1024, 1..300)) {
        let run = || {
            let mut sim = mem_sim(1, None, Params::new());
            sim.allocate(0, 1024 * PAGE_SIZE);
            for (i, p) in pages.iter().enumerate() {
                sim.access(p * PAGE_SIZE, 0, i as u64 * 100).unwrap();
            }
            (sim.log.to_tsv(), sim.stats.clone())
        };
        prop_assert_eq!(run(), run());
    }

    /// A victim never belongs to a more important tenant while a less
    /// important one still holds an evictable region.
    #[test]
    fn quota_lru_respects_priority(
        accesses in prop::collection::vec((0u32..2, 0u64..1024), 1..400),
        prio in (0u64..=100, 0u64..=100),
    ) {
        prop_assume!(prio.0 != prio.1);
        let mut sim = mem_sim(2, Some(PolicyKind::QuotaLru), Params::new());
        for t in 0..2 {
            sim.allocate(t, 1024 * PAGE_SIZE);
        }
        sim.set_tenant_priority(0, prio.0);
        sim.set_tenant_priority(1, prio.1);
        let prio_of = |t: u32| if t == 0 { prio.0 } else { prio.1 };
        for (i, &(t, p)) in accesses.iter().enumerate() {
            let addr = (t as u64 * 1024 + p) * PAGE_SIZE;
            let (faulting, _) = sim.region_of(addr).unwrap();
            let mut pages: BTreeMap<u64, (u32, u32)> =
                sim.regions().iter().map(|r| (r.id as u64, (r.tenant, r.resident_pages()))).collect();
            let start = sim.log.len();
            sim.access(addr, t, i as u64 * 100).unwrap();
            for rec in &sim.log.records[start..] {
                let Some(region) = rec.id else { continue };
                match rec.kind.as_str() {
                    "EVICT" => {
                        let victim = pages[&region].0;
                        let better = pages.iter().any(|(&r, &(owner, n))| {
                            n > 0 && r != faulting as u64 && r != region && prio_of(owner) > prio_of(victim)
                        });
                        prop_assert!(!better, "evicted tenant {} (priority {}) while a lower-priority region was resident", victim, prio_of(victim));
                        pages.get_mut(&region).unwrap().1 = 0;
                    }
                    "MIGRATE" => pages.get_mut(&region).unwrap().1 += 1,
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn engine_never_idles_with_work_pending(
        work in prop::collection::vec((0u32..4, 1u64..500), 1..60),
        slices in prop::collection::vec(1u64..400, 4),
    ) {
        let mut s = SchedSim::new(SchedConfig::default()).unwrap();
        for ts in &slices {
            s.queue_create(0, TenantClass::Be, QueueAttrs { timeslice_us: *ts, ..QueueAttrs::default() }, 0).unwrap();
        }
        for &(q, w) in &work {
            s.submit(q, w, 0).unwrap();
        }
        s.drain();
        let end = s.launches().iter().filter_map(|l| l.end_us).max().unwrap();
        let total: u64 = work.iter().map(|w| w.1).sum();
        // busy from time zero to the end, apart from context switches
        prop_assert_eq!(end, total + s.stats.switches * s.config.switch_us);
        prop_assert!(s.launches().iter().all(|l| l.end_us.is_some()));
    }

    #[test]
    fn higher_priority_queue_waits_less(
        work in prop::collection::vec(1u64..300, 1..30),
        backlogged in any::<bool>(),
        prio in (0u64..100, 0u64..100),
    ) {
        prop_assume!(prio.0 < prio.1);
        // symmetric loads: both queues backlogged from time zero, or pairs
        // spaced so the engine drains between them
        let gap = if backlogged { 0 } else { 2 * (300 + SchedConfig::default().switch_us) };
        let mut s = SchedSim::new(SchedConfig::default()).unwrap();
        let hi = s.queue_create(0, TenantClass::Be, QueueAttrs { priority: prio.0, ..QueueAttrs::default() }, 0).unwrap().queue();
        let lo = s.queue_create(1, TenantClass::Be, QueueAttrs { priority: prio.1, ..QueueAttrs::default() }, 0).unwrap().queue();
        for (i, &w) in work.iter().enumerate() {
            let t = i as u64 * gap;
            // the lower-priority queue submits first at each instant
            s.submit(lo, w, t).unwrap();
            s.submit(hi, w, t).unwrap();
        }
        s.drain();
        let mean = |q| {
            let v = s.queue_latencies(q);
            v.iter().sum::<u64>() as f64 / v.len() as f64
        };
        prop_assert!(mean(hi) <= mean(lo), "{} > {}", mean(hi), mean(lo));
    }

    #[test]
    fn block_units_run_once_and_work_is_conserved(
        costs in prop::collection::vec(1u64..200, 1..80),
        workers in 1u32..9,
        steal_cost in 0u64..5,
        policy in prop_oneof![Just(PolicyKind::Fixed), Just(PolicyKind::Greedy)],
        blocked in any::<bool>(),
    ) {
        let assignment = if blocked { Assignment::Blocked } else { Assignment::RoundRobin };
        let kernel = BlockKernel::register(&costs, workers, &assignment).unwrap();
        let mut handlers = DeviceHandlers::default();
        let mut registry = MapRegistry::new(4);
        build(policy, Params::new()).unwrap().attach_device(&mut handlers, &mut registry).unwrap();
        let config = BlockConfig { steal_cost_us: steal_cost, ..BlockConfig::default() };
        let run = BlockSched::new(&kernel, config).run(&handlers, &mut registry).unwrap();

        let mut seen = vec![0; costs.len()];
        for s in &run.spans {
            seen[s.unit as usize] += 1;
        }
        prop_assert!(seen.iter().all(|&n| n == 1));
        let busy: u64 = run.busy_us.iter().sum();
        prop_assert_eq!(busy, costs.iter().sum::<u64>() + run.total_steals() * steal_cost);

        // closed-form makespan without stealing
        let mut per_home = vec![0u64; workers as usize];
        for u in &kernel.units {
            per_home[u.home as usize] += u.cost_us;
        }
        let fixed = *per_home.iter().max().unwrap() as f64;
        match policy {
            PolicyKind::Fixed => prop_assert!((run.makespan_us - fixed).abs() < 1e-6),
            _ if steal_cost == 0 => prop_assert!(run.makespan_us <= fixed + 1e-6),
            _ => {}
        }
    }

    #[test]
    fn map_merges_conserve_updates(
        ops in prop::collection::vec((0u8..4, 0u64..16, 0u64..1000, 0u32..4), 1..500),
        initial in prop::collection::vec((0u64..16, 0u64..100), 0..8),
        placement in prop_oneof![Just(Placement::Global), Just(Placement::SmLocal), Just(Placement::Adaptive), Just(Placement::Host)],
    ) {
        let mut reg = MapRegistry::new(4);
        let mut init = BTreeMap::new();
        for &(k, v) in &initial {
            init.insert(k, v);
        }
        let init: Vec<(u64, u64)> = init.into_iter().collect();
        reg.create(0, "m", MapKind::Hash, placement, &init).unwrap();
        let mut applied: BTreeMap<u64, u64> = init.iter().copied().collect();
        let mut committed = applied.clone();
        let mut epoch = 0;
        for &(op, key, delta, sm) in &ops {
            match op {
                0 => {
                    reg.update(0, key, delta, Origin::Host).unwrap();
                    *applied.entry(key).or_insert(0) += delta;
                    *committed.entry(key).or_insert(0) += delta;
                }
                1 => {
                    reg.update(0, key, delta, Origin::Warp { sm, warp: 0 }).unwrap();
                    *applied.entry(key).or_insert(0) += delta;
                }
                2 => {
                    let (v, e) = reg.lookup(0, key, ReadDomain::Host).unwrap();
                    prop_assert_eq!(v, committed.get(&key).copied().unwrap_or(0));
                    prop_assert!(e >= epoch);
                }
                _ => {
                    let e = reg.snapshot_merge(0).unwrap();
                    prop_assert!(e > epoch);
                    epoch = e;
                    committed = applied.clone();
                }
            }
        }
        reg.merge_all();
        let got: BTreeMap<u64, u64> = reg.get(0).unwrap().canonical.iter().filter(|(_, v)| **v != 0).map(|(k, v)| (*k, *v)).collect();
        let want: BTreeMap<u64, u64> = applied.into_iter().filter(|(_, v)| *v != 0).collect();
        prop_assert_eq!(got, want);
    }
}
