//! Scenario execution: every simulator on one nanosecond clock.
//!
//! Order within a run: the device kernel (if any) runs first and its
//! prefetch requests warm memory; the merged trace then drives memory
//! accesses and queue operations in time order; the scheduler drains; sched
//! launch starts fire the device `enter` hook; finally the block kernel runs.
//! Scheduler and block times are µs and are scaled to ns in the combined log.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::report::*;
use super::scenario::{BlockAssignment, CostDistribution, Scenario, ScenarioError};
use super::trace::{gen_trace, GenParams, Trace, TraceEvent, TraceOp};
use crate::block::{Assignment, BlockKernel, BlockRun, BlockSched};
use crate::device::{instrument, run_hook, DeviceHandlers, ExecMode, KernelRun, KernelSpec, Launch, RegistryMaps, WarpContext};
use crate::ir::{Hook, PolicyProgram};
use crate::log::EventLog;
use crate::mem::{MemSim, REGION_SIZE};
use crate::par::Exec;
use crate::policy::PolicyDomain;
use crate::sched::{KernelLaunch, LatencySummary, SchedError, SchedSim, TenantClass};
use crate::xmaps::MapRegistry;

/// Everything a run produces.
pub struct RunOutput {
    pub report: MetricsReport,
    pub log: EventLog,
    pub registry: MapRegistry,
    pub block: Option<BlockRun>,
    pub kernel: Option<KernelRun>,
    pub launches: Vec<KernelLaunch>,
}

/// An extra device program attached for the run, with a label for its maps.
#[derive(Clone, Debug)]
pub struct Probe {
    pub name: String,
    pub program: PolicyProgram,
}

fn run_err(e: impl std::fmt::Display) -> ScenarioError {
    ScenarioError::Run(e.to_string())
}

pub fn run_scenario(sc: &Scenario) -> Result<RunOutput, ScenarioError> {
    run_with_probes(sc, &[])
}

/// Run independent scenarios, in parallel unless `exec` is sequential.
pub fn run_batch(scenarios: &[Scenario], exec: Exec) -> Vec<Result<RunOutput, ScenarioError>> {
    exec.map(scenarios, run_scenario)
}

/// Every access, queue and launch event of the scenario, merged in time order.
pub fn build_trace(sc: &Scenario, queue_ids: &BTreeMap<u32, Vec<u32>>) -> Result<Trace, ScenarioError> {
    let mut parts = Vec::new();
    if let Some(path) = &sc.trace_file {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.clone(), source })?;
        parts.push(Trace::from_tsv(&text).map_err(run_err)?);
    }
    for t in &sc.tenants {
        if let Some(a) = &t.access {
            let p = GenParams { working_set: t.working_set, events: a.events, tenant: t.id, gap_ns: a.gap_ns, start_ns: a.start_ns };
            parts.push(gen_trace(a.pattern, &p, sc.seed).map_err(run_err)?);
        }
        if let Some(l) = &t.launch {
            let queues = &queue_ids[&t.id];
            let events = (0..l.launches)
                .map(|i| TraceEvent {
                    time_ns: (l.start_us + i * l.gap_us) * 1000,
                    tenant: t.id,
                    op: TraceOp::Launch { queue: queues[(i % queues.len() as u64) as usize], work_us: l.work_us },
                })
                .collect();
            parts.push(Trace { events });
        }
    }
    Ok(Trace::merge(parts))
}

fn block_kernel(sc: &Scenario) -> Result<Option<BlockKernel>, ScenarioError> {
    let Some(b) = &sc.block else { return Ok(None) };
    let kernel = match b.distribution {
        CostDistribution::HeavyTail { fraction, multiplier } => {
            BlockKernel::clustered_heavy_tail(b.units, b.workers, fraction, b.base_us, multiplier).map_err(run_err)?
        }
        dist => {
            let mut rng = ChaCha8Rng::seed_from_u64(sc.seed ^ 0xB10C);
            let costs: Vec<u64> = (0..b.units)
                .map(|_| match dist {
                    CostDistribution::Moderate { spread } => rng.random_range(b.base_us..=b.base_us * spread.max(1)),
                    _ => b.base_us,
                })
                .collect();
            let assignment = match b.assignment {
                BlockAssignment::RoundRobin => Assignment::RoundRobin,
                BlockAssignment::Blocked => Assignment::Blocked,
                BlockAssignment::Skew { share } => {
                    let heavy = ((b.units as f64) * share).round() as usize;
                    let rest = b.workers.saturating_sub(1).max(1);
                    Assignment::Explicit(
                        (0..b.units)
                            .map(|i| if i < heavy || b.workers == 1 { 0 } else { 1 + (i - heavy) as u32 % rest })
                            .collect(),
                    )
                }
            };
            BlockKernel::register(&costs, b.workers, &assignment).map_err(run_err)?
        }
    };
    Ok(Some(kernel))
}

/// Fire the device `enter` hook once per started scheduler launch, with
/// kernel id = launch id + 1 (0 is the block kernel) and time_us = start.
fn launch_entries(launches: &[KernelLaunch], handlers: &DeviceHandlers, registry: &mut MapRegistry, sms: u32) -> Result<(u64, u64), ScenarioError> {
    let Some((prog, ids)) = handlers.handlers.get(&Hook::Enter) else { return Ok((0, 0)) };
    let (mut calls, mut cost) = (0, 0);
    for l in launches {
        let Some(start) = l.start_us else { continue };
        let sm = l.queue % sms;
        let mut ctx = WarpContext::new(Hook::Enter, sm, 0, 1);
        ctx.set_uniform("kernel_id", l.id as u64 + 1)
            .and_then(|c| c.set_uniform("time_us", start))
            .map_err(run_err)?;
        let mut maps = RegistryMaps { registry, ids, sm, warp: 0, now_ns: start * 1000 };
        let res = run_hook(prog, &ctx, &mut maps, ExecMode::WarpLeader).map_err(run_err)?;
        calls += 1;
        cost += res.cost_ns;
    }
    registry.merge_all();
    Ok((calls, cost))
}

pub fn run_with_probes(sc: &Scenario, probes: &[Probe]) -> Result<RunOutput, ScenarioError> {
    let problems = sc.validate();
    if !problems.is_empty() {
        return Err(ScenarioError::Invalid(problems));
    }
    let mut mem = MemSim::new(sc.device.mem).map_err(run_err)?;
    let mut sched = SchedSim::new(sc.sched).map_err(run_err)?;
    let mut registry = MapRegistry::new(sc.device.sms);
    let mut handlers = DeviceHandlers::default();

    for p in &sc.policies {
        if let Some(m) = p.mem_policy().map_err(run_err)? {
            mem.attach(m).map_err(run_err)?;
        }
        if let Some(s) = p.sched_policy().map_err(run_err)? {
            sched.attach(s).map_err(run_err)?;
        }
        if p.domain() != PolicyDomain::Host {
            p.attach_device(&mut handlers, &mut registry).map_err(run_err)?;
        }
    }
    for probe in probes {
        if handlers.handlers.contains_key(&probe.program.hook) {
            return Err(run_err(format!("probe {} conflicts with a policy on {}", probe.name, probe.program.hook)));
        }
        let mut ids = Vec::new();
        for m in &probe.program.maps {
            let id = registry.next_id();
            registry.create(id, &format!("{}.{}", probe.name, m.name), m.kind, m.placement, &[]).map_err(run_err)?;
            ids.push(id);
        }
        handlers.attach(probe.program.clone(), ids).map_err(run_err)?;
    }

    // allocations back to back in tenant order
    let mut bases = BTreeMap::new();
    for t in &sc.tenants {
        mem.set_tenant_priority(t.id, t.priority);
        if t.working_set > 0 {
            let regions = t.working_set.div_ceil(REGION_SIZE);
            bases.insert(t.id, (mem.allocate(t.id, t.working_set), regions));
        }
    }

    // generated launch streams get their queues up front
    let mut queue_ids: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for t in &sc.tenants {
        if let Some(l) = &t.launch {
            let attrs = l.attrs.unwrap_or(sc.sched.default_attrs);
            for _ in 0..l.queues {
                let q = sched.queue_create(t.id, t.class, attrs, 0).map_err(run_err)?;
                queue_ids.entry(t.id).or_default().push(q.queue());
            }
        }
    }

    let mut kernel_summary = None;
    let mut kernel_run = None;
    if let Some(k) = &sc.kernel {
        let spec = KernelSpec::parse(&k.spec).map_err(run_err)?;
        let inst = instrument(&spec, &k.points);
        let launch = Launch { sms: sc.device.sms, warps_per_sm: k.warps_per_sm, active_mask: k.active_mask, kernel_id: 0, block_id: 0 };
        let run = crate::device::run_kernel(&inst, &handlers, launch, &mut registry, k.mode, 0).map_err(run_err)?;
        let (first, regions) = bases[&k.tenant];
        let first = (first / REGION_SIZE) as u32;
        let mut bytes = 0;
        for &r in &run.prefetch_requests {
            if r < regions {
                bytes += mem.device_prefetch(first + r as u32, 0).map_err(run_err)?;
            }
        }
        kernel_summary = Some(KernelSummary {
            hook_calls: run.hook_calls,
            cost_ns: run.cost_ns,
            prefetch_requests: run.prefetch_requests.len() as u64,
            prefetched_bytes: bytes,
        });
        kernel_run = Some(run);
    }

    let trace = build_trace(sc, &queue_ids)?;
    let mut classes: BTreeMap<u32, TenantClass> = sc.tenants.iter().map(|t| (t.id, t.class)).collect();
    for ev in &trace.events {
        match ev.op {
            TraceOp::Access { offset } => {
                let &(base, regions) = bases.get(&ev.tenant).ok_or_else(|| run_err(format!("tenant {} has no allocation", ev.tenant)))?;
                let addr = base + offset % (regions * REGION_SIZE);
                mem.access(addr, ev.tenant, ev.time_ns).map_err(run_err)?;
            }
            TraceOp::QueueCreate { class, attrs } => {
                classes.entry(ev.tenant).or_insert(class);
                sched.queue_create(ev.tenant, class, attrs.unwrap_or(sc.sched.default_attrs), ev.time_ns / 1000).map_err(run_err)?;
            }
            TraceOp::Launch { queue, work_us } => match sched.submit(queue, work_us, ev.time_ns / 1000) {
                Ok(_) => {}
                Err(e @ (SchedError::Rejected(_) | SchedError::Destroyed(_))) => {
                    log::debug!("launch at {} dropped: {e}", ev.time_ns);
                    sched.log.push(ev.time_ns / 1000, "sched", "SUBMIT_DROPPED", Some(queue as u64), None, Some(ev.tenant), "", 0);
                }
                Err(e) => return Err(run_err(e)),
            },
            TraceOp::QueueDestroy { queue } => {
                sched.queue_destroy(queue, ev.time_ns / 1000).map_err(run_err)?;
            }
        }
    }
    sched.drain();

    let (entry_calls, entry_cost) = launch_entries(sched.launches(), &handlers, &mut registry, sc.device.sms)?;

    let mut block_log = EventLog::new();
    let mut block_summary = None;
    let mut block_run = None;
    if let Some(kernel) = block_kernel(sc)? {
        let cfg = sc.block.as_ref().expect("block workload").config;
        let mut bs = BlockSched::new(&kernel, cfg);
        let run = bs.run(&handlers, &mut registry).map_err(run_err)?;
        block_summary = Some(BlockSummary {
            units: kernel.units.len() as u64,
            workers: kernel.workers,
            makespan_us: run.makespan_us,
            fixed_makespan_us: kernel.fixed_makespan(),
            steals: run.total_steals(),
            stolen_work_us: run.stolen_work_us.iter().sum(),
            busy_us: run.busy_us.clone(),
        });
        block_log = std::mem::take(&mut bs.log);
        block_run = Some(run);
    }

    let mut log = std::mem::take(&mut mem.log);
    for mut other in [std::mem::take(&mut sched.log), block_log] {
        for r in &mut other.records {
            r.time *= 1000;
        }
        log.extend(other);
    }
    log.sort_by_time();

    let report = MetricsReport {
        schema_version: SCHEMA_VERSION,
        scenario: sc.name.clone(),
        seed: sc.seed,
        oversubscription: sc.oversubscription(),
        policies: sc.policies.iter().map(|p| PolicyRow { name: p.name.clone(), kind: p.kind.name().into(), tag: p.tag().into() }).collect(),
        tenants: tenant_rows(sc, &mem, &sched, &classes),
        memory: MemorySummary {
            stats: mem.stats,
            total_time_ns: mem.total_time_ns(),
            resident_bytes: mem.tenants().values().map(|t| t.resident_bytes).sum(),
        },
        classes: [TenantClass::Lc, TenantClass::Be]
            .into_iter()
            .filter(|c| sched.launches().iter().any(|l| l.class == *c))
            .map(|c| ClassRow { class: c.name().into(), latency: LatencySummary::of(sched.latencies(c)), throughput: sched.throughput(c) })
            .collect(),
        queues: sched
            .queues()
            .map(|q| QueueRow {
                queue: q.id,
                tenant: q.tenant,
                class: q.class,
                state: q.state,
                attrs: q.attrs,
                latency: LatencySummary::of(sched.queue_latencies(q.id)),
            })
            .collect(),
        sched: sched.stats,
        block: block_summary,
        kernel: kernel_summary,
        maps: registry
            .dump()
            .into_iter()
            .map(|r| MapEntry { map: r.map, name: r.name, epoch: r.epoch, key: r.key, value: r.value })
            .collect(),
        hooks: HookAccounting {
            mem_hook_calls: mem.stats.hook_calls,
            mem_overhead_ns: mem.stats.hook_overhead_ns,
            sched_hook_calls: sched.stats.hook_calls,
            device_hook_calls: kernel_run.as_ref().map_or(0, |k| k.hook_calls)
                + block_run.as_ref().map_or(0, |b| b.hook_calls)
                + entry_calls,
            device_cost_ns: kernel_run.as_ref().map_or(0, |k| k.cost_ns) + block_run.as_ref().map_or(0, |b| b.hook_cost_ns) + entry_cost,
            violations: mem.stats.violations + sched.stats.violations,
        },
    };
    Ok(RunOutput { report, log, registry, block: block_run, kernel: kernel_run, launches: sched.launches().to_vec() })
}

fn tenant_rows(sc: &Scenario, mem: &MemSim, sched: &SchedSim, classes: &BTreeMap<u32, TenantClass>) -> Vec<TenantRow> {
    let mut ids: Vec<u32> = classes.keys().copied().collect();
    ids.extend(mem.tenants().keys());
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter()
        .map(|id| {
            let m = mem.tenants().get(&id).copied().unwrap_or_default();
            let spec = sc.tenants.iter().find(|t| t.id == id);
            let queues: Vec<u32> = sched.queues().filter(|q| q.tenant == id).map(|q| q.id).collect();
            let mut lat: Vec<u64> = queues.iter().flat_map(|&q| sched.queue_latencies(q)).collect();
            lat.sort_unstable();
            TenantRow {
                tenant: id,
                class: classes.get(&id).map_or("BE", |c| c.name()).into(),
                priority: spec.map_or(m.priority, |s| s.priority),
                accesses: m.accesses,
                hits: m.hits,
                minor_faults: m.minor_faults,
                major_faults: m.major_faults,
                faults: m.faults(),
                migrated_bytes: m.migrated_bytes,
                prefetched_pages: m.prefetched_pages,
                hit_rate: m.hit_rate(),
                completion_ns: m.time_ns,
                launches: sched.launches().iter().filter(|l| queues.contains(&l.queue)).count() as u64,
                launch_p99_us: crate::sched::percentile(&lat, 99.0),
            }
        })
        .collect()
}
