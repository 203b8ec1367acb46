//! Scenario files: `[section]` headers over `key = value` lines.
//!
//! ```text
//! name = stride-rq1
//! seed = 7
//!
//! [device]
//! capacity = 64MB
//!
//! [tenant.0]
//! working_set = 80MB
//! pattern = STRIDE(64KB)
//! events = 6400
//!
//! [policy]
//! name = stride
//! kind = STRIDE
//! ```
//!
//! Sections: top level, `[device]`, `[sched]`, `[tenant.N]`, `[trace]`,
//! `[block]`, `[kernel]` and repeated `[policy]`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::trace::Pattern;
use crate::block::BlockConfig;
use crate::device::{ExecMode, HookPoint};
use crate::mem::MemConfig;
use crate::policy::{build, parse_u64, Params, PolicyKind, PolicySpec};
use crate::sched::{QueueAttrs, SchedConfig, TenantClass};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario is invalid:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("run failed: {0}")]
    Run(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub mem: MemConfig,
    pub sms: u32,
    pub workers: u32,
}

impl Default for DeviceSpec {
    fn default() -> Self {
        DeviceSpec { mem: MemConfig::default(), sms: 4, workers: 8 }
    }
}

/// Memory access stream of one tenant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccessWorkload {
    pub pattern: Pattern,
    pub events: u64,
    pub gap_ns: u64,
    pub start_ns: u64,
}

/// Kernel launch stream of one tenant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaunchWorkload {
    pub queues: u32,
    pub launches: u64,
    pub work_us: u64,
    /// 0 submits every launch at `start_us`.
    pub gap_us: u64,
    pub start_us: u64,
    pub attrs: Option<QueueAttrs>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TenantSpec {
    pub id: u32,
    pub class: TenantClass,
    pub priority: u64,
    pub working_set: u64,
    pub access: Option<AccessWorkload>,
    pub launch: Option<LaunchWorkload>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum CostDistribution {
    Uniform,
    /// `fraction` of units at `multiplier` × base, clustered on the same
    /// fraction of workers.
    HeavyTail { fraction: f64, multiplier: u64 },
    /// Costs drawn uniformly from base to `spread` × base.
    Moderate { spread: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum BlockAssignment {
    RoundRobin,
    Blocked,
    /// Worker 0 holds `share` of the units, the rest round-robin.
    Skew { share: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockWorkload {
    pub units: usize,
    pub workers: u32,
    pub base_us: u64,
    pub distribution: CostDistribution,
    pub assignment: BlockAssignment,
    pub config: BlockConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KernelWorkload {
    pub spec: String,
    pub points: Vec<HookPoint>,
    pub mode: ExecMode,
    pub warps_per_sm: u32,
    pub active_mask: u32,
    /// Tenant whose allocation the kernel's addresses index.
    pub tenant: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub device: DeviceSpec,
    pub sched: SchedConfig,
    pub tenants: Vec<TenantSpec>,
    pub trace_file: Option<PathBuf>,
    pub block: Option<BlockWorkload>,
    pub kernel: Option<KernelWorkload>,
    pub policies: Vec<PolicySpec>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "scenario".into(),
            seed: 0,
            device: DeviceSpec::default(),
            sched: SchedConfig::default(),
            tenants: Vec::new(),
            trace_file: None,
            block: None,
            kernel: None,
            policies: Vec::new(),
        }
    }
}

type Section = (String, usize, BTreeMap<String, (usize, String)>);

fn sections(text: &str, errors: &mut Vec<String>) -> Vec<Section> {
    let mut out: Vec<Section> = vec![(String::new(), 0, BTreeMap::new())];
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            out.push((name.trim().to_string(), i + 1, BTreeMap::new()));
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            errors.push(format!("line {}: expected key = value", i + 1));
            continue;
        };
        let cur = out.last_mut().expect("top section");
        if cur.2.insert(k.trim().to_string(), (i + 1, v.trim().to_string())).is_some() {
            errors.push(format!("line {}: duplicate key `{}`", i + 1, k.trim()));
        }
    }
    out
}

/// Typed reads from one section; failures accumulate instead of aborting.
struct Reader<'a> {
    name: &'a str,
    keys: &'a BTreeMap<String, (usize, String)>,
    used: Vec<&'a str>,
    errors: &'a mut Vec<String>,
}

impl<'a> Reader<'a> {
    fn raw(&mut self, key: &'a str) -> Option<(usize, &'a str)> {
        self.used.push(key);
        self.keys.get(key).map(|(l, v)| (*l, v.as_str()))
    }

    fn err(&mut self, line: usize, msg: String) {
        self.errors.push(format!("line {line}: [{}] {msg}", self.name));
    }

    fn u64(&mut self, key: &'a str, default: u64) -> u64 {
        match self.raw(key) {
            None => default,
            Some((l, v)) => parse_u64(v).unwrap_or_else(|| {
                self.err(l, format!("{key}: `{v}` is not a non-negative integer"));
                default
            }),
        }
    }

    fn f64(&mut self, key: &'a str, default: f64) -> f64 {
        match self.raw(key) {
            None => default,
            Some((l, v)) => v.parse().unwrap_or_else(|_| {
                self.err(l, format!("{key}: `{v}` is not a number"));
                default
            }),
        }
    }

    fn string(&mut self, key: &'a str) -> Option<String> {
        self.raw(key).map(|(_, v)| v.to_string())
    }

    fn finish(self) {
        for (k, (l, _)) in self.keys {
            if !self.used.contains(&k.as_str()) {
                self.errors.push(format!("line {l}: [{}] unknown key `{k}`", self.name));
            }
        }
    }
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.into(), source })?;
        let mut sc = Scenario::parse(&text)?;
        if let Some(t) = &sc.trace_file {
            if t.is_relative() {
                sc.trace_file = Some(path.parent().unwrap_or(Path::new(".")).join(t));
            }
        }
        Ok(sc)
    }

    /// Parse and validate; every problem found is reported at once.
    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        let mut errors = Vec::new();
        let secs = sections(text, &mut errors);
        let mut sc = Scenario::default();
        for (name, line, keys) in &secs {
            let mut r = Reader { name, keys, used: Vec::new(), errors: &mut errors };
            match name.as_str() {
                "" => {
                    sc.name = r.string("name").unwrap_or_else(|| "scenario".into());
                    sc.seed = r.u64("seed", 0);
                    r.finish();
                }
                "device" => {
                    let m = &mut sc.device.mem;
                    m.capacity_bytes = r.u64("capacity", m.capacity_bytes);
                    m.pcie_gbps = r.u64("pcie_gbps", m.pcie_gbps);
                    m.t_dev_ns = r.u64("t_dev_ns", m.t_dev_ns);
                    m.migrate_base_ns = r.u64("migrate_base_ns", m.migrate_base_ns);
                    m.prefetch_cap_pages = r.u64("prefetch_cap_pages", m.prefetch_cap_pages as u64) as usize;
                    m.hit_sample = r.u64("hit_sample", m.hit_sample);
                    m.hook_overhead_ns = r.u64("hook_overhead_ns", m.hook_overhead_ns);
                    sc.device.sms = r.u64("sms", 4) as u32;
                    sc.device.workers = r.u64("workers", 8) as u32;
                    r.finish();
                }
                "sched" => {
                    sc.sched.switch_us = r.u64("switch_us", sc.sched.switch_us);
                    sc.sched.tick_us = r.u64("tick_us", sc.sched.tick_us);
                    let d = &mut sc.sched.default_attrs;
                    d.priority = r.u64("priority", d.priority);
                    d.timeslice_us = r.u64("timeslice_us", d.timeslice_us);
                    d.interleave = r.u64("interleave", d.interleave);
                    r.finish();
                }
                "trace" => {
                    sc.trace_file = r.string("file").map(PathBuf::from);
                    r.finish();
                }
                "block" => {
                    sc.block = Some(parse_block(&mut r));
                    r.finish();
                }
                "kernel" => {
                    sc.kernel = parse_kernel(&mut r, *line);
                    r.finish();
                }
                "policy" => {
                    let params = Params(keys.iter().map(|(k, (_, v))| (k.clone(), v.clone())).collect());
                    let mut params = params;
                    match params.0.remove("kind") {
                        None => errors.push(format!("line {line}: [policy] missing `kind`")),
                        Some(k) => match PolicyKind::from_name(&k) {
                            None => errors.push(format!("line {line}: [policy] unknown kind `{k}`")),
                            Some(kind) => match build(kind, params) {
                                Ok(p) => sc.policies.push(p),
                                Err(e) => errors.push(format!("line {line}: [policy] {e}")),
                            },
                        },
                    }
                }
                other => match other.strip_prefix("tenant.").and_then(|n| n.parse::<u32>().ok()) {
                    Some(id) => {
                        let t = parse_tenant(&mut r, id, *line);
                        r.finish();
                        if sc.tenants.iter().any(|x| x.id == id) {
                            errors.push(format!("line {line}: tenant {id} defined twice"));
                        }
                        sc.tenants.push(t);
                    }
                    None => errors.push(format!("line {line}: unknown section [{other}]")),
                },
            }
        }
        sc.tenants.sort_by_key(|t| t.id);
        // sections may come in any order
        if let Some(b) = &mut sc.block {
            b.config.sms = sc.device.sms;
            if b.workers == 0 {
                b.workers = sc.device.workers;
            }
        }
        sc.validate_into(&mut errors);
        if errors.is_empty() {
            Ok(sc)
        } else {
            Err(ScenarioError::Invalid(errors))
        }
    }

    /// All validation failures, empty when the scenario can run.
    pub fn validate(&self) -> Vec<String> {
        let mut e = Vec::new();
        self.validate_into(&mut e);
        e
    }

    fn validate_into(&self, errors: &mut Vec<String>) {
        if let Err(e) = self.device.mem.validate() {
            errors.push(format!("device: {e}"));
        }
        if self.device.sms == 0 || self.device.workers == 0 {
            errors.push("device: sms and workers must be positive".into());
        }
        if self.sched.tick_us == 0 {
            errors.push("sched: tick_us must be positive".into());
        }
        if let Err(e) = self.sched.default_attrs.validate() {
            errors.push(format!("sched: {e}"));
        }
        for t in &self.tenants {
            if t.priority > 100 {
                errors.push(format!("tenant {}: priority must lie in 0..=100", t.id));
            }
            if t.access.is_some() && t.working_set == 0 {
                errors.push(format!("tenant {}: an access pattern needs a working_set", t.id));
            }
            if let Some(l) = &t.launch {
                if l.queues == 0 {
                    errors.push(format!("tenant {}: queues must be positive", t.id));
                }
            }
        }
        if let Some(b) = &self.block {
            if b.units == 0 {
                errors.push("block: units must be positive".into());
            }
        }
        if let Some(k) = &self.kernel {
            if let Err(e) = crate::device::KernelSpec::parse(&k.spec) {
                errors.push(format!("kernel: {e}"));
            }
            if !self.tenants.iter().any(|t| t.id == k.tenant && t.working_set > 0) {
                errors.push(format!("kernel: tenant {} has no allocation", k.tenant));
            }
        }
        let mut slots: BTreeMap<crate::ir::Hook, &str> = BTreeMap::new();
        for p in &self.policies {
            for h in p.hooks() {
                if let Some(other) = slots.insert(h, &p.name) {
                    errors.push(format!("policies `{other}` and `{}` both attach to {h}", p.name));
                }
            }
        }
    }

    /// Working set over device capacity.
    pub fn oversubscription(&self) -> f64 {
        let ws: u64 = self.tenants.iter().map(|t| t.working_set).sum();
        ws as f64 / self.device.mem.capacity_bytes as f64
    }
}

fn parse_tenant<'a>(r: &mut Reader<'a>, id: u32, line: usize) -> TenantSpec {
    let class = match r.string("class") {
        None => TenantClass::Be,
        Some(c) => TenantClass::from_name(&c).unwrap_or_else(|| {
            r.err(line, format!("unknown class `{c}`"));
            TenantClass::Be
        }),
    };
    let priority = r.u64("priority", 50);
    let working_set = r.u64("working_set", 0);
    let access = r.string("pattern").and_then(|p| match Pattern::parse(&p) {
        Ok(pattern) => Some(pattern),
        Err(e) => {
            r.err(line, e.to_string());
            None
        }
    });
    let events = r.u64("events", 0);
    let gap_ns = r.u64("gap_ns", 1000);
    let start_ns = r.u64("start_ns", 0);
    let access = access.map(|pattern| AccessWorkload { pattern, events, gap_ns, start_ns });
    let launches = r.u64("launches", 0);
    let queues = r.u64("queues", 1) as u32;
    let work_us = r.u64("work_us", 100);
    let gap_us = r.u64("launch_gap_us", 0);
    let start_us = r.u64("launch_start_us", 0);
    let ts = r.raw("timeslice_us").map(|_| ());
    let attrs = ts.map(|_| QueueAttrs {
        priority: r.u64("queue_priority", 50),
        timeslice_us: r.u64("timeslice_us", 1000),
        interleave: r.u64("interleave", 1),
    });
    if attrs.is_none() {
        r.used.extend(["queue_priority", "interleave"]);
    }
    let launch = (launches > 0).then_some(LaunchWorkload { queues, launches, work_us, gap_us, start_us, attrs });
    TenantSpec { id, class, priority, working_set, access, launch }
}

fn parse_block<'a>(r: &mut Reader<'a>) -> BlockWorkload {
    let units = r.u64("units", 100) as usize;
    let base_us = r.u64("base_us", 10);
    let distribution = match r.string("distribution").as_deref() {
        None | Some("uniform") => CostDistribution::Uniform,
        Some("heavy_tail") => CostDistribution::HeavyTail { fraction: r.f64("fraction", 0.1), multiplier: r.u64("multiplier", 100) },
        Some("moderate") => CostDistribution::Moderate { spread: r.u64("spread", 3) },
        Some(other) => {
            r.err(0, format!("unknown distribution `{other}`"));
            CostDistribution::Uniform
        }
    };
    let assignment = match r.string("assignment").as_deref() {
        None | Some("round_robin") => BlockAssignment::RoundRobin,
        Some("blocked") => BlockAssignment::Blocked,
        Some("skew") => BlockAssignment::Skew { share: r.f64("share", 0.99) },
        Some(other) => {
            r.err(0, format!("unknown assignment `{other}`"));
            BlockAssignment::RoundRobin
        }
    };
    r.used.extend(["fraction", "multiplier", "spread", "share"]);
    let mut config = BlockConfig::default();
    config.steal_cost_us = r.u64("steal_cost_us", config.steal_cost_us);
    config.contention_penalty = r.f64("contention_penalty", config.contention_penalty);
    let workers = r.u64("workers", 0) as u32;
    BlockWorkload { units, workers, base_us, distribution, assignment, config }
}

fn parse_kernel<'a>(r: &mut Reader<'a>, line: usize) -> Option<KernelWorkload> {
    let spec = r.string("spec").map(|s| s.replace(';', "\n"));
    let points = r
        .string("hooks")
        .unwrap_or_else(|| "mem_instruction".into())
        .split(',')
        .filter_map(|p| {
            let p = p.trim();
            HookPoint::parse(p).map_err(|e| r.err(line, e.to_string())).ok()
        })
        .collect();
    let mode = match r.string("mode").as_deref() {
        None | Some("warp_leader") => ExecMode::WarpLeader,
        Some("per_lane") => ExecMode::PerLane,
        Some(m) => {
            r.err(line, format!("unknown mode `{m}`"));
            ExecMode::WarpLeader
        }
    };
    let warps_per_sm = r.u64("warps_per_sm", 4) as u32;
    let active_mask = r.u64("active_mask", u32::MAX as u64) as u32;
    let tenant = r.u64("tenant", 0) as u32;
    let Some(spec) = spec else {
        r.err(line, "missing `spec`".into());
        return None;
    };
    Some(KernelWorkload { spec, points, mode, warps_per_sm, active_mask, tenant })
}
