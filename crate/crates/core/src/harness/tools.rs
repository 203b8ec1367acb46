//! Observability tools: device programs attached alongside a scenario's
//! policies, with their maps turned into reports afterwards.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use super::run::{run_with_probes, Probe, RunOutput};
use super::scenario::{Scenario, ScenarioError};
use crate::ir::assemble;
use crate::sched::{LatencySummary, TenantClass};
use crate::verifier::verify_default;

/// Finish time per block, recorded by the exit hook.
pub const KERNELRETSNOOP_SRC: &str = "\
.hook exit
.map finish hash global
    ldctxdw r2, unit_id
    ldctxdw r3, time_us
    mov r1, 0
    call map_update
    mov r0, 0
    exit
";

/// Units started per SM x warp.
pub const THREADHIST_ENTER_SRC: &str = "\
.hook enter
.map units per_warp sm
    ldctxdw r2, sm_id
    lsh r2, 32
    ldctxdw r6, warp_id
    add r2, r6
    mov r1, 0
    mov r3, 1
    call map_update
    mov r0, 0
    exit
";

/// Busy µs per SM x warp.
pub const THREADHIST_PROBE_SRC: &str = "\
.hook probe
.map busy per_warp sm
    ldctxdw r2, sm_id
    lsh r2, 32
    ldctxdw r6, warp_id
    add r2, r6
    ldctxdw r3, unit_cost_us
    mov r1, 0
    call map_update
    mov r0, 0
    exit
";

/// Device entry time of each host launch; kernel 0 is the block kernel.
pub const LAUNCHLATE_SRC: &str = "\
.hook enter
.map entry hash global
    ldctxdw r2, kernel_id
    jeq r2, 0, out
    ldctxdw r3, time_us
    mov r1, 0
    call map_update
out:
    mov r0, 0
    exit
";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Tool {
    KernelRetSnoop,
    ThreadHist,
    LaunchLate,
}

impl Tool {
    pub const ALL: [Tool; 3] = [Tool::KernelRetSnoop, Tool::ThreadHist, Tool::LaunchLate];

    pub fn name(self) -> &'static str {
        match self {
            Tool::KernelRetSnoop => "kernelretsnoop",
            Tool::ThreadHist => "threadhist",
            Tool::LaunchLate => "launchlate",
        }
    }

    pub fn from_name(s: &str) -> Option<Tool> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }

    pub fn sources(self) -> &'static [&'static str] {
        match self {
            Tool::KernelRetSnoop => &[KERNELRETSNOOP_SRC],
            Tool::ThreadHist => &[THREADHIST_ENTER_SRC, THREADHIST_PROBE_SRC],
            Tool::LaunchLate => &[LAUNCHLATE_SRC],
        }
    }

    /// Assembled and verified tool programs.
    pub fn probes(self) -> Vec<Probe> {
        self.sources()
            .iter()
            .map(|src| {
                let mut program = assemble(src).expect("tool program assembles");
                let report = verify_default(&mut program);
                assert!(report.accepted(), "{} rejected: {report}", self.name());
                Probe { name: self.name().into(), program }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockFinish {
    pub unit: u64,
    pub finish_us: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WarpActivity {
    pub sm: u32,
    pub warp: u32,
    pub worker: u32,
    pub units: u64,
    pub busy_us: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LaunchLatency {
    pub launch: u32,
    pub queue: u32,
    pub class: TenantClass,
    pub submit_us: u64,
    pub entry_us: u64,
    pub latency_us: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum ToolReport {
    KernelRetSnoop { finishes: Vec<BlockFinish>, spread_us: u64 },
    /// `ratio` is max over min busy time; None when some worker did nothing.
    ThreadHist { cells: Vec<WarpActivity>, ratio: Option<f64> },
    LaunchLate { launches: Vec<LaunchLatency>, by_class: BTreeMap<String, LatencySummary> },
}

fn map_values(out: &RunOutput, name: &str) -> BTreeMap<u64, u64> {
    out.registry.by_name(name).map(|m| m.canonical.iter().map(|(&k, &v)| (k, v)).collect()).unwrap_or_default()
}

pub fn run_tool(tool: Tool, sc: &Scenario) -> Result<(ToolReport, RunOutput), ScenarioError> {
    let out = run_with_probes(sc, &tool.probes())?;
    let report = match tool {
        Tool::KernelRetSnoop => {
            let finishes: Vec<BlockFinish> = match &out.block {
                // the map holds one sum per unit; units finishing at 0 never write
                Some(b) => {
                    let m = map_values(&out, "kernelretsnoop.finish");
                    (0..b.spans.len() as u64).map(|u| BlockFinish { unit: u, finish_us: m.get(&u).copied().unwrap_or(0) }).collect()
                }
                None => Vec::new(),
            };
            let max = finishes.iter().map(|f| f.finish_us).max().unwrap_or(0);
            let min = finishes.iter().map(|f| f.finish_us).min().unwrap_or(0);
            ToolReport::KernelRetSnoop { finishes, spread_us: max - min }
        }
        Tool::ThreadHist => {
            let units = map_values(&out, "threadhist.units");
            let busy = map_values(&out, "threadhist.busy");
            let sms = sc.device.sms.max(1);
            let workers = sc.block.as_ref().map_or(0, |b| b.workers);
            let cells: Vec<WarpActivity> = (0..workers)
                .map(|w| {
                    let (sm, warp) = (w % sms, w / sms);
                    let key = (sm as u64) << 32 | warp as u64;
                    WarpActivity { sm, warp, worker: w, units: units.get(&key).copied().unwrap_or(0), busy_us: busy.get(&key).copied().unwrap_or(0) }
                })
                .collect();
            let max = cells.iter().map(|c| c.busy_us).max().unwrap_or(0);
            let min = cells.iter().map(|c| c.busy_us).min().unwrap_or(0);
            let ratio = (min > 0).then(|| max as f64 / min as f64);
            ToolReport::ThreadHist { cells, ratio }
        }
        Tool::LaunchLate => {
            let entry = map_values(&out, "launchlate.entry");
            let submits: BTreeMap<u64, u64> =
                out.log.of_kind("sched", "SUBMIT").filter_map(|r| r.sub.map(|l| (l, r.time / 1000))).collect();
            let launches: Vec<LaunchLatency> = out
                .launches
                .iter()
                .filter_map(|l| {
                    let entry_us = *entry.get(&(l.id as u64 + 1))?;
                    let submit_us = *submits.get(&(l.id as u64))?;
                    Some(LaunchLatency { launch: l.id, queue: l.queue, class: l.class, submit_us, entry_us, latency_us: entry_us - submit_us })
                })
                .collect();
            let mut by_class = BTreeMap::new();
            for c in [TenantClass::Lc, TenantClass::Be] {
                let v: Vec<u64> = launches.iter().filter(|l| l.class == c).map(|l| l.latency_us).collect();
                if !v.is_empty() {
                    by_class.insert(c.name().to_string(), LatencySummary::of(v));
                }
            }
            ToolReport::LaunchLate { launches, by_class }
        }
    };
    Ok((report, out))
}

impl ToolReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tool report serializes")
    }

    /// Plain-text table for terminals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        match self {
            ToolReport::KernelRetSnoop { finishes, spread_us } => {
                let _ = writeln!(s, "unit\tfinish_us");
                for f in finishes {
                    let _ = writeln!(s, "{}\t{}", f.unit, f.finish_us);
                }
                let _ = writeln!(s, "spread_us\t{spread_us}");
            }
            ToolReport::ThreadHist { cells, ratio } => {
                let _ = writeln!(s, "sm\twarp\tworker\tunits\tbusy_us");
                for c in cells {
                    let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", c.sm, c.warp, c.worker, c.units, c.busy_us);
                }
                match ratio {
                    Some(r) => writeln!(s, "max/min\t{r:.2}"),
                    None => writeln!(s, "max/min\tinf"),
                }
                .ok();
            }
            ToolReport::LaunchLate { launches, by_class } => {
                let _ = writeln!(s, "launch\tqueue\tclass\tsubmit_us\tentry_us\tlatency_us");
                for l in launches {
                    let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}\t{}", l.launch, l.queue, l.class.name(), l.submit_us, l.entry_us, l.latency_us);
                }
                for (c, sum) in by_class {
                    let _ = writeln!(s, "{c}\tp50={}\tp99={}\tmean={:.1}", sum.p50_us, sum.p99_us, sum.mean_us);
                }
            }
        }
        s
    }
}
