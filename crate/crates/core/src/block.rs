//! Device-side work-stealing block scheduler.
//!
//! Persistent workers pop units from the head of their own deque; an idle
//! worker asks its should_try_steal handler and, if allowed, takes the tail
//! unit of the largest deque (lowest id on ties), paying a fixed steal cost.
//! A worker whose handler declines retires.
//!
//! Units may share a contention group. Running units of one group share that
//! group's throughput, and each extra concurrent unit adds a thrash penalty,
//! so k concurrent units progress at 1 / (k * (1 + penalty * (k - 1))) each.
//! Ungrouped units always progress at rate 1.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::{run_hook, DeviceError, DeviceHandlers, ExecMode, RegistryMaps, WarpContext};
use crate::ir::Hook;
use crate::log::EventLog;
use crate::xmaps::MapRegistry;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BlockError {
    #[error("need at least one worker")]
    NoWorkers,
    #[error("need at least one work unit")]
    NoUnits,
    #[error("assignment names worker {0}, beyond the worker count")]
    BadHome(u32),
    #[error("assignment has {got} entries for {want} units")]
    AssignmentLen { got: usize, want: usize },
    #[error(transparent)]
    Device(#[from] DeviceError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnitState {
    Queued,
    Running,
    Done,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkUnit {
    pub id: u32,
    pub cost_us: u64,
    pub home: u32,
    /// Units of one group contend with each other while running.
    pub group: Option<u32>,
    pub state: UnitState,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Assignment {
    RoundRobin,
    /// Contiguous chunks, worker 0 first.
    Blocked,
    Explicit(Vec<u32>),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub steal_cost_us: u64,
    pub contention_penalty: f64,
    /// Workers map onto SMs round-robin for map shards.
    pub sms: u32,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig { steal_cost_us: 2, contention_penalty: 0.25, sms: 4 }
    }
}

/// Units plus their home partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockKernel {
    pub workers: u32,
    pub units: Vec<WorkUnit>,
}

impl BlockKernel {
    pub fn register(costs: &[u64], workers: u32, assignment: &Assignment) -> Result<BlockKernel, BlockError> {
        if workers == 0 {
            return Err(BlockError::NoWorkers);
        }
        if costs.is_empty() {
            return Err(BlockError::NoUnits);
        }
        let n = costs.len();
        let homes: Vec<u32> = match assignment {
            Assignment::RoundRobin => (0..n).map(|i| (i % workers as usize) as u32).collect(),
            Assignment::Blocked => {
                let per = n.div_ceil(workers as usize);
                (0..n).map(|i| (i / per) as u32).collect()
            }
            Assignment::Explicit(h) => {
                if h.len() != n {
                    return Err(BlockError::AssignmentLen { got: h.len(), want: n });
                }
                if let Some(&bad) = h.iter().find(|&&w| w >= workers) {
                    return Err(BlockError::BadHome(bad));
                }
                h.clone()
            }
        };
        let units = costs
            .iter()
            .zip(homes)
            .enumerate()
            .map(|(i, (&cost_us, home))| WorkUnit { id: i as u32, cost_us, home, group: None, state: UnitState::Queued })
            .collect();
        Ok(BlockKernel { workers, units })
    }

    /// `fraction` of the units cost `multiplier` × `base_us` and are clustered
    /// on the first `fraction` of the workers, where they form one contention
    /// group per home worker; the rest are spread round-robin.
    pub fn clustered_heavy_tail(units: usize, workers: u32, fraction: f64, base_us: u64, multiplier: u64) -> Result<BlockKernel, BlockError> {
        if workers == 0 {
            return Err(BlockError::NoWorkers);
        }
        if units == 0 {
            return Err(BlockError::NoUnits);
        }
        let heavy = ((units as f64 * fraction).round() as usize).clamp(1, units);
        let hot = ((workers as f64 * fraction).ceil() as u32).clamp(1, workers);
        let mut out = Vec::with_capacity(units);
        for i in 0..heavy {
            let home = i as u32 % hot;
            out.push(WorkUnit { id: i as u32, cost_us: base_us * multiplier, home, group: Some(home), state: UnitState::Queued });
        }
        for j in 0..units - heavy {
            let id = (heavy + j) as u32;
            out.push(WorkUnit { id, cost_us: base_us, home: j as u32 % workers, group: None, state: UnitState::Queued });
        }
        Ok(BlockKernel { workers, units: out })
    }

    /// Makespan without stealing: the largest home partition.
    pub fn fixed_makespan(&self) -> u64 {
        let mut sums = vec![0u64; self.workers as usize];
        for u in &self.units {
            sums[u.home as usize] += u.cost_us;
        }
        sums.into_iter().max().unwrap_or(0)
    }

    pub fn total_cost(&self) -> u64 {
        self.units.iter().map(|u| u.cost_us).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct UnitSpan {
    pub unit: u32,
    pub worker: u32,
    pub start_us: f64,
    pub end_us: f64,
    pub stolen: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BlockRun {
    pub makespan_us: f64,
    /// Executed unit cost plus steal cost, per worker.
    pub busy_us: Vec<u64>,
    pub steals: Vec<u64>,
    pub stolen_work_us: Vec<u64>,
    pub spans: Vec<UnitSpan>,
    pub hook_calls: u64,
    pub hook_cost_ns: u64,
}

impl BlockRun {
    pub fn total_steals(&self) -> u64 {
        self.steals.iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Phase {
    /// Decide at the current time.
    Idle,
    /// The stolen unit arrives at `until`.
    Stealing { until: f64, unit: u32 },
    Arrived { unit: u32 },
    Running { unit: u32, left: f64, start: f64, stolen: bool },
    Retired,
}

/// One scheduler instance over a registered kernel.
pub struct BlockSched {
    pub config: BlockConfig,
    pub units: Vec<WorkUnit>,
    deques: Vec<VecDeque<u32>>,
    pub log: EventLog,
}

const EPS: f64 = 1e-9;

impl BlockSched {
    pub fn new(kernel: &BlockKernel, config: BlockConfig) -> BlockSched {
        let mut deques = vec![VecDeque::new(); kernel.workers as usize];
        for u in &kernel.units {
            deques[u.home as usize].push_back(u.id);
        }
        BlockSched { config, units: kernel.units.clone(), deques, log: EventLog::new() }
    }

    pub fn deque_lens(&self) -> Vec<usize> {
        self.deques.iter().map(|d| d.len()).collect()
    }

    fn victim(&self) -> Option<usize> {
        let (mut best, mut len) = (None, 0);
        for (w, d) in self.deques.iter().enumerate() {
            if d.len() > len {
                best = Some(w);
                len = d.len();
            }
        }
        best
    }

    /// Take the tail unit of the largest deque (lowest id on ties).
    pub fn steal(&mut self, _thief: u32) -> Option<u32> {
        let v = self.victim()?;
        self.deques[v].pop_back()
    }

    /// Run every unit to completion under the attached device handlers.
    pub fn run(&mut self, handlers: &DeviceHandlers, registry: &mut MapRegistry) -> Result<BlockRun, BlockError> {
        let workers = self.deques.len();
        let mut phase = vec![Phase::Idle; workers];
        let mut run = BlockRun {
            busy_us: vec![0; workers],
            steals: vec![0; workers],
            stolen_work_us: vec![0; workers],
            ..Default::default()
        };
        let mut now = 0.0f64;
        let p = self.config.contention_penalty;

        loop {
            // decisions at `now`, in worker order
            for w in 0..workers {
                let next = match phase[w] {
                    Phase::Idle => self.deques[w].pop_front().map(|u| (u, false)),
                    Phase::Arrived { unit } => Some((unit, true)),
                    _ => continue,
                };
                if let Some((u, stolen)) = next {
                    self.units[u as usize].state = UnitState::Running;
                    self.hook(handlers, registry, &mut run, Hook::Enter, w, Some(u), now)?;
                    self.hook(handlers, registry, &mut run, Hook::Probe, w, Some(u), now)?;
                    let left = self.units[u as usize].cost_us as f64;
                    phase[w] = Phase::Running { unit: u, left, start: now, stolen };
                    self.log.push(now as u64, "block", "START", Some(w as u64), Some(u as u64), None, "", 0);
                    continue;
                }
                let Some(v) = self.victim() else {
                    phase[w] = Phase::Retired;
                    continue;
                };
                let tail = *self.deques[v].back().expect("victim has units");
                let tail_cost = self.units[tail as usize].cost_us;
                let yes = match handlers.handlers.contains_key(&Hook::ShouldTrySteal) {
                    true => self.hook(handlers, registry, &mut run, Hook::ShouldTrySteal, w, Some(tail), now)?.is_some_and(|r| r != 0),
                    false => false,
                };
                if !yes {
                    phase[w] = Phase::Retired;
                    self.log.push(now as u64, "block", "RETIRE", Some(w as u64), None, None, "", 0);
                    continue;
                }
                let u = self.deques[v].pop_back().expect("victim has units");
                run.steals[w] += 1;
                run.stolen_work_us[w] += tail_cost;
                run.busy_us[w] += self.config.steal_cost_us;
                self.log.push(now as u64, "block", "STEAL", Some(w as u64), Some(u as u64), None, format!("from:{v}"), 0);
                phase[w] = Phase::Stealing { until: now + self.config.steal_cost_us as f64, unit: u };
            }

            // rates of running units
            let mut group_running = std::collections::BTreeMap::<u32, u32>::new();
            for ph in &phase {
                if let Phase::Running { unit, .. } = ph {
                    if let Some(g) = self.units[*unit as usize].group {
                        *group_running.entry(g).or_default() += 1;
                    }
                }
            }
            let rates: Vec<f64> = phase
                .iter()
                .map(|ph| match ph {
                    Phase::Running { unit, .. } => match self.units[*unit as usize].group {
                        None => 1.0,
                        Some(g) => {
                            let k = group_running[&g] as f64;
                            1.0 / (k * (1.0 + p * (k - 1.0)))
                        }
                    },
                    _ => 0.0,
                })
                .collect();

            // next event
            let mut next = f64::INFINITY;
            for (w, ph) in phase.iter().enumerate() {
                match *ph {
                    Phase::Running { left, .. } => next = next.min(now + left / rates[w]),
                    Phase::Stealing { until, .. } => next = next.min(until),
                    _ => {}
                }
            }
            if !next.is_finite() {
                break;
            }
            let dt = next - now;
            let done_before = run.spans.len();
            now = next;
            for w in 0..workers {
                match phase[w] {
                    Phase::Running { unit, left, start, stolen } => {
                        let left = left - dt * rates[w];
                        if left <= EPS * (1.0 + self.units[unit as usize].cost_us as f64) {
                            self.units[unit as usize].state = UnitState::Done;
                            run.busy_us[w] += self.units[unit as usize].cost_us;
                            run.spans.push(UnitSpan { unit, worker: w as u32, start_us: start, end_us: now, stolen });
                            self.log.push(now as u64, "block", "DONE", Some(w as u64), Some(unit as u64), None, "", 0);
                            phase[w] = Phase::Idle;
                        } else {
                            phase[w] = Phase::Running { unit, left, start, stolen };
                        }
                    }
                    Phase::Stealing { until, unit } if until <= now => phase[w] = Phase::Arrived { unit },
                    _ => {}
                }
            }
            // exit hooks after all completions at this instant
            let finished: Vec<(usize, u32)> = run.spans[done_before..].iter().map(|s| (s.worker as usize, s.unit)).collect();
            for (w, u) in finished {
                self.hook(handlers, registry, &mut run, Hook::Retprobe, w, Some(u), now)?;
                self.hook(handlers, registry, &mut run, Hook::Exit, w, Some(u), now)?;
            }
        }
        registry.merge_all();
        run.makespan_us = run.spans.iter().map(|s| s.end_us).fold(0.0, f64::max);
        Ok(run)
    }

    #[allow(clippy::too_many_arguments)]
    fn hook(
        &mut self,
        handlers: &DeviceHandlers,
        registry: &mut MapRegistry,
        run: &mut BlockRun,
        hook: Hook,
        w: usize,
        unit: Option<u32>,
        now: f64,
    ) -> Result<Option<i64>, BlockError> {
        let Some((prog, ids)) = handlers.handlers.get(&hook) else { return Ok(None) };
        let sms = self.config.sms.max(1);
        let (sm, warp) = (w as u32 % sms, w as u32 / sms);
        // block-level events fire once, from the block's leader lane
        let mut ctx = WarpContext::new(hook, sm, warp, 1);
        let u = unit.map(|u| self.units[u as usize]);
        let tail_cost = self.victim().and_then(|v| self.deques[v].back()).map_or(0, |&t| self.units[t as usize].cost_us);
        ctx.set_uniform("worker_id", w as u64)?
            .set_uniform("unit_id", u.map_or(0, |u| u.id as u64))?
            .set_uniform("unit_cost_us", u.map_or(0, |u| u.cost_us))?
            .set_uniform("local_queue_len", self.deques[w].len() as u64)?
            .set_uniform("steals_performed", run.steals[w])?
            .set_uniform("stolen_work_us", run.stolen_work_us[w])?
            .set_uniform("busy_us", run.busy_us[w])?
            .set_uniform("time_us", now as u64)?
            .set_uniform("victim_tail_cost_us", tail_cost)?;
        let mut maps = RegistryMaps { registry, ids, sm, warp, now_ns: (now * 1000.0) as u64 };
        let res = run_hook(prog, &ctx, &mut maps, ExecMode::WarpLeader)?;
        run.hook_calls += 1;
        run.hook_cost_ns += res.cost_ns;
        Ok(Some(res.ret))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{assemble, PolicyProgram};
    use crate::verifier::verify_default;

    fn verified(src: &str) -> PolicyProgram {
        let mut p = assemble(src).unwrap();
        assert!(verify_default(&mut p).accepted());
        p
    }

    fn greedy() -> DeviceHandlers {
        let mut h = DeviceHandlers::default();
        h.attach(verified(".hook should_try_steal\nmov r0, 1\nexit"), vec![]).unwrap();
        h
    }

    fn run(k: &BlockKernel, h: &DeviceHandlers, cfg: BlockConfig) -> BlockRun {
        BlockSched::new(k, cfg).run(h, &mut MapRegistry::new(4)).unwrap()
    }

    #[test]
    fn assignments() {
        let k = BlockKernel::register(&[1, 2, 3, 4, 5], 2, &Assignment::RoundRobin).unwrap();
        assert_eq!(k.units.iter().map(|u| u.home).collect::<Vec<_>>(), vec![0, 1, 0, 1, 0]);
        let k = BlockKernel::register(&[1, 2, 3, 4, 5], 2, &Assignment::Blocked).unwrap();
        assert_eq!(k.units.iter().map(|u| u.home).collect::<Vec<_>>(), vec![0, 0, 0, 1, 1]);
        assert_eq!(k.fixed_makespan(), 9);
        assert!(matches!(BlockKernel::register(&[1], 2, &Assignment::Explicit(vec![2])), Err(BlockError::BadHome(2))));
        assert!(matches!(BlockKernel::register(&[], 2, &Assignment::RoundRobin), Err(BlockError::NoUnits)));
    }

    #[test]
    fn fixed_work_matches_partition_sums() {
        let k = BlockKernel::register(&[10, 20, 30, 5], 2, &Assignment::Blocked).unwrap();
        let r = run(&k, &DeviceHandlers::default(), BlockConfig::default());
        assert_eq!(r.makespan_us, k.fixed_makespan() as f64);
        assert_eq!(r.total_steals(), 0);
        assert_eq!(r.busy_us, vec![30, 35]);
    }

    #[test]
    fn steal_takes_tail_of_largest_deque() {
        let k = BlockKernel::register(&[1, 2, 3, 4, 5, 6], 3, &Assignment::Explicit(vec![0, 1, 1, 2, 2, 2])).unwrap();
        let mut s = BlockSched::new(&k, BlockConfig::default());
        assert_eq!(s.steal(0), Some(5));
        // tie between workers 1 and 2: lowest id wins
        assert_eq!(s.steal(0), Some(2));
        assert_eq!(s.deque_lens(), vec![1, 1, 2]);
    }

    #[test]
    fn greedy_balances_and_accounts_steals() {
        let k = BlockKernel::register(&[10; 8], 2, &Assignment::Explicit(vec![0; 8])).unwrap();
        let cfg = BlockConfig { steal_cost_us: 2, ..Default::default() };
        let r = run(&k, &greedy(), cfg);
        assert!(r.makespan_us < k.fixed_makespan() as f64);
        let work: u64 = r.busy_us.iter().sum();
        assert_eq!(work, k.total_cost() + r.total_steals() * 2);
        assert_eq!(r.spans.len(), 8);
        assert!(r.hook_calls > 0);
    }

    #[test]
    fn free_stealing_never_loses() {
        let k = BlockKernel::register(&[7, 1, 1, 30, 2, 9, 4], 3, &Assignment::Explicit(vec![0, 0, 0, 0, 1, 1, 0])).unwrap();
        let r = run(&k, &greedy(), BlockConfig { steal_cost_us: 0, ..Default::default() });
        assert!(r.makespan_us <= k.fixed_makespan() as f64);
    }

    #[test]
    fn contention_slows_group_members() {
        // two group members on different workers run concurrently
        let mut k = BlockKernel::register(&[100, 100], 2, &Assignment::RoundRobin).unwrap();
        for u in &mut k.units {
            u.group = Some(0);
        }
        let r = run(&k, &DeviceHandlers::default(), BlockConfig::default());
        // each at rate 1 / (2 * 1.25)
        assert!((r.makespan_us - 250.0).abs() < 1e-6);
        assert_eq!(r.busy_us, vec![100, 100]);
    }

    #[test]
    fn clustered_heavy_tail_shape() {
        let k = BlockKernel::clustered_heavy_tail(100, 10, 0.1, 10, 20).unwrap();
        let heavy: Vec<_> = k.units.iter().filter(|u| u.cost_us == 200).collect();
        assert_eq!(heavy.len(), 10);
        assert!(heavy.iter().all(|u| u.home == 0 && u.group == Some(0)));
    }
}
