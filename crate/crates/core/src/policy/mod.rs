//! Catalog of ready-made policies and the textual policy file format.
//!
//! A policy file holds one or more `[policy]` sections of `key = value`
//! lines. `name` and `kind` are required; every other key is a parameter.
//!
//! ```text
//! [policy]
//! name = lc-first
//! kind = DYN_TIMESLICE
//! timeslice = LC:1000000,BE:200
//! ```

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::device::DeviceHandlers;
use crate::host::IrHandlers;
use crate::ir::{assemble, Domain, Hook, PolicyProgram};
use crate::mem::{IrMemPolicy, MemPolicy};
use crate::sched::{IrSchedPolicy, SchedPolicy, TenantClass};
use crate::verifier::verify_default;
use crate::xmaps::MapRegistry;

pub mod block;
pub mod evict;
pub mod prefetch;
pub mod sched;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("unknown policy kind `{0}`")]
    UnknownKind(String),
    #[error("{kind} is not {family} policy")]
    WrongFamily { kind: PolicyKind, family: &'static str },
    #[error("parameter `{key}`: {msg}")]
    Param { key: String, msg: String },
    #[error("missing parameter `{0}`")]
    Missing(String),
    #[error("built-in program for {kind} failed verification: {report}")]
    Verify { kind: PolicyKind, report: String },
    #[error("policy file line {line}: {msg}")]
    File { line: usize, msg: String },
    #[error("map setup: {0}")]
    Maps(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PolicyKind {
    Fifo,
    Lfu,
    QuotaLru,
    AdaptiveSeq,
    Stride,
    Tree,
    L2StrideDevice,
    DynTimeslice,
    PreemptCtrl,
    Fixed,
    Greedy,
    MaxSteals,
    LatencyBudget,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Eviction,
    Prefetch,
    Sched,
    Block,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyDomain {
    Host,
    Device,
    Both,
}

const KINDS: [(PolicyKind, &str, &str); 13] = [
    (PolicyKind::Fifo, "FIFO", "Global FIFO Eviction"),
    (PolicyKind::Lfu, "LFU", "Global LFU Eviction"),
    (PolicyKind::QuotaLru, "QUOTA_LRU", "Multi-tenant Quota LRU"),
    (PolicyKind::AdaptiveSeq, "ADAPTIVE_SEQ", "Adaptive Seq. Prefetch"),
    (PolicyKind::Stride, "STRIDE", "Stride Prefetch"),
    (PolicyKind::Tree, "TREE", "Tree-based Prefetch"),
    (PolicyKind::L2StrideDevice, "L2_STRIDE_DEVICE", "GPU L2 Stride Prefetch"),
    (PolicyKind::DynTimeslice, "DYN_TIMESLICE", "Dynamic Timeslice"),
    (PolicyKind::PreemptCtrl, "PREEMPT_CTRL", "Preemption Control"),
    (PolicyKind::Fixed, "FIXED", "FixedWork"),
    (PolicyKind::Greedy, "GREEDY", "Greedy Steal"),
    (PolicyKind::MaxSteals, "MAX_STEALS", "MaxSteals (CLC)"),
    (PolicyKind::LatencyBudget, "LATENCY_BUDGET", "LatencyBudget (CLC)"),
];

impl PolicyKind {
    pub fn all() -> impl Iterator<Item = PolicyKind> {
        KINDS.iter().map(|k| k.0)
    }

    pub fn name(self) -> &'static str {
        KINDS.iter().find(|k| k.0 == self).map(|k| k.1).unwrap_or("?")
    }

    /// Row label of the policy support matrix.
    pub fn tag(self) -> &'static str {
        KINDS.iter().find(|k| k.0 == self).map(|k| k.2).unwrap_or("?")
    }

    pub fn from_name(s: &str) -> Option<PolicyKind> {
        let s = s.trim().to_ascii_uppercase().replace('-', "_");
        KINDS.iter().find(|k| k.1 == s).map(|k| k.0)
    }

    pub fn family(self) -> Family {
        use PolicyKind::*;
        match self {
            Fifo | Lfu | QuotaLru => Family::Eviction,
            AdaptiveSeq | Stride | Tree | L2StrideDevice => Family::Prefetch,
            DynTimeslice | PreemptCtrl => Family::Sched,
            Fixed | Greedy | MaxSteals | LatencyBudget => Family::Block,
        }
    }

    pub fn domain(self) -> PolicyDomain {
        match self {
            PolicyKind::L2StrideDevice => PolicyDomain::Both,
            k if k.family() == Family::Block => PolicyDomain::Device,
            _ => PolicyDomain::Host,
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// String parameters with typed accessors.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Params(pub BTreeMap<String, String>);

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.0.insert(key.to_string(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64, PolicyError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => parse_u64(v).ok_or_else(|| bad(key, format!("`{v}` is not a non-negative integer"))),
        }
    }

    /// A required strictly positive integer.
    pub fn positive(&self, key: &str, default: Option<u64>) -> Result<u64, PolicyError> {
        let v = match (self.get(key), default) {
            (None, Some(d)) => d,
            (None, None) => return Err(PolicyError::Missing(key.into())),
            (Some(s), _) => {
                let neg = s.trim().starts_with('-');
                match parse_u64(s) {
                    Some(v) if !neg => v,
                    _ => return Err(bad(key, format!("`{s}` must be a positive integer"))),
                }
            }
        };
        if v == 0 {
            return Err(bad(key, "must be positive".into()));
        }
        Ok(v)
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, PolicyError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.trim().parse().map_err(|_| bad(key, format!("`{v}` is not a number"))),
        }
    }

    /// `lo..hi`, half-open.
    pub fn band_or(&self, key: &str, default: (u64, u64)) -> Result<(u64, u64), PolicyError> {
        let Some(v) = self.get(key) else { return Ok(default) };
        let (lo, hi) = v.split_once("..").ok_or_else(|| bad(key, format!("`{v}` is not lo..hi")))?;
        match (parse_u64(lo), parse_u64(hi)) {
            (Some(lo), Some(hi)) if lo < hi => Ok((lo, hi)),
            _ => Err(bad(key, format!("`{v}` is not an increasing range"))),
        }
    }

    /// Keys of the form `prefix.N` as a map from N.
    pub fn indexed(&self, prefix: &str) -> Result<BTreeMap<u32, String>, PolicyError> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.0 {
            if let Some(rest) = k.strip_prefix(prefix).and_then(|r| r.strip_prefix('.')) {
                let i: u32 = rest.parse().map_err(|_| bad(k, "index must be an integer".into()))?;
                out.insert(i, v.clone());
            }
        }
        Ok(out)
    }

    /// `LC:1000,BE:200` as a class map.
    pub fn class_map(&self, key: &str) -> Result<BTreeMap<TenantClass, u64>, PolicyError> {
        let v = self.get(key).ok_or_else(|| PolicyError::Missing(key.into()))?;
        let mut out = BTreeMap::new();
        for part in v.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (c, n) = part.split_once(':').ok_or_else(|| bad(key, format!("`{part}` is not CLASS:VALUE")))?;
            let class = TenantClass::from_name(c.trim()).ok_or_else(|| bad(key, format!("unknown class `{}`", c.trim())))?;
            let n = parse_u64(n).ok_or_else(|| bad(key, format!("`{n}` is not an integer")))?;
            out.insert(class, n);
        }
        Ok(out)
    }
}

fn bad(key: &str, msg: String) -> PolicyError {
    PolicyError::Param { key: key.to_string(), msg }
}

/// Integer with optional `_` separators and KB/MB/GB suffixes.
pub fn parse_u64(s: &str) -> Option<u64> {
    let s = s.trim().replace('_', "");
    let upper = s.to_ascii_uppercase();
    for (suffix, mul) in [("KB", 1u64 << 10), ("MB", 1 << 20), ("GB", 1 << 30)] {
        if let Some(n) = upper.strip_suffix(suffix) {
            return n.trim().parse::<u64>().ok()?.checked_mul(mul);
        }
    }
    upper.parse().ok()
}

/// A built catalog policy. Construction is pure; handler instances are
/// created fresh on every attach.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicySpec {
    pub name: String,
    pub kind: PolicyKind,
    pub params: Params,
    /// Verified policy programs, host and device.
    pub programs: Vec<PolicyProgram>,
}

impl PolicySpec {
    pub fn tag(&self) -> &'static str {
        self.kind.tag()
    }

    pub fn domain(&self) -> PolicyDomain {
        self.kind.domain()
    }

    /// Hooks the policy occupies, host and device.
    pub fn hooks(&self) -> Vec<Hook> {
        let mut h: Vec<Hook> = self.programs.iter().map(|p| p.hook).collect();
        h.extend(self.native_hooks());
        h.sort();
        h.dedup();
        h
    }

    fn native_hooks(&self) -> Vec<Hook> {
        match self.kind {
            PolicyKind::QuotaLru => vec![Hook::GpuEvictPrepare],
            PolicyKind::AdaptiveSeq | PolicyKind::Stride | PolicyKind::Tree | PolicyKind::L2StrideDevice => vec![Hook::GpuPrefetch],
            _ => vec![],
        }
    }

    fn host_programs(&self) -> Vec<PolicyProgram> {
        self.programs.iter().filter(|p| p.hook.domain() == Domain::Host).cloned().collect()
    }

    fn device_programs(&self) -> Vec<PolicyProgram> {
        self.programs.iter().filter(|p| p.hook.domain() == Domain::Device).cloned().collect()
    }

    /// A fresh memory-side handler set, if this policy has one.
    pub fn mem_policy(&self) -> Result<Option<Box<dyn MemPolicy>>, PolicyError> {
        let name = self.name.clone();
        Ok(Some(match self.kind {
            PolicyKind::Fifo | PolicyKind::Lfu => {
                let handlers = IrHandlers::new(self.host_programs()).map_err(PolicyError::Maps)?;
                Box::new(IrMemPolicy { name, handlers })
            }
            PolicyKind::QuotaLru => Box::new(evict::QuotaLru::from_params(&self.params)?),
            PolicyKind::Stride => Box::new(prefetch::Stride::from_params(&self.params)?),
            PolicyKind::AdaptiveSeq => Box::new(prefetch::AdaptiveSeq::from_params(&self.params)?),
            PolicyKind::Tree => Box::new(prefetch::Tree::from_params(&self.params)?),
            PolicyKind::L2StrideDevice => Box::new(prefetch::DeviceRequestExpander::from_params(&self.params)?),
            _ => return Ok(None),
        }))
    }

    /// A fresh scheduling handler set, if this policy has one.
    pub fn sched_policy(&self) -> Result<Option<Box<dyn SchedPolicy>>, PolicyError> {
        if self.kind.family() != Family::Sched {
            return Ok(None);
        }
        let handlers = IrHandlers::new(self.host_programs()).map_err(PolicyError::Maps)?;
        let inner = IrSchedPolicy { name: self.name.clone(), handlers };
        Ok(Some(match self.kind {
            PolicyKind::PreemptCtrl => Box::new(sched::PreemptCtrl { inner }),
            _ => Box::new(inner),
        }))
    }

    /// Attach the device programs, creating their maps in `registry`.
    pub fn attach_device(&self, handlers: &mut DeviceHandlers, registry: &mut MapRegistry) -> Result<(), PolicyError> {
        for prog in self.device_programs() {
            let mut ids = Vec::new();
            for m in &prog.maps {
                let id = registry.next_id();
                registry.create(id, &format!("{}.{}", self.name, m.name), m.kind, m.placement, &[]).map_err(|e| PolicyError::Maps(e.to_string()))?;
                ids.push(id);
            }
            handlers.attach(prog, ids).map_err(|e| PolicyError::Maps(e.to_string()))?;
        }
        Ok(())
    }
}

/// Assemble and verify a built-in program.
pub(crate) fn program(kind: PolicyKind, src: &str) -> Result<PolicyProgram, PolicyError> {
    let mut p = assemble(src).map_err(|e| PolicyError::Verify { kind, report: e.to_string() })?;
    let report = verify_default(&mut p);
    if !report.accepted() {
        return Err(PolicyError::Verify { kind, report: report.to_string() });
    }
    Ok(p)
}

fn expect_family(kind: PolicyKind, family: Family, label: &'static str) -> Result<(), PolicyError> {
    if kind.family() == family {
        Ok(())
    } else {
        Err(PolicyError::WrongFamily { kind, family: label })
    }
}

pub fn build_eviction(kind: PolicyKind, params: Params) -> Result<PolicySpec, PolicyError> {
    expect_family(kind, Family::Eviction, "an eviction")?;
    build(kind, params)
}

pub fn build_prefetch(kind: PolicyKind, params: Params) -> Result<PolicySpec, PolicyError> {
    expect_family(kind, Family::Prefetch, "a prefetch")?;
    build(kind, params)
}

pub fn build_sched(kind: PolicyKind, params: Params) -> Result<PolicySpec, PolicyError> {
    expect_family(kind, Family::Sched, "a scheduling")?;
    build(kind, params)
}

pub fn build_block(kind: PolicyKind, params: Params) -> Result<PolicySpec, PolicyError> {
    expect_family(kind, Family::Block, "a block")?;
    build(kind, params)
}

/// Build any catalog policy; parameters are validated here.
pub fn build(kind: PolicyKind, params: Params) -> Result<PolicySpec, PolicyError> {
    let programs = match kind {
        PolicyKind::Fifo => vec![],
        PolicyKind::Lfu => vec![program(kind, evict::LFU_SRC)?],
        PolicyKind::QuotaLru => {
            evict::QuotaLru::from_params(&params)?;
            vec![]
        }
        PolicyKind::Stride => {
            prefetch::Stride::from_params(&params)?;
            vec![]
        }
        PolicyKind::AdaptiveSeq => {
            prefetch::AdaptiveSeq::from_params(&params)?;
            vec![]
        }
        PolicyKind::Tree => {
            prefetch::Tree::from_params(&params)?;
            vec![]
        }
        PolicyKind::L2StrideDevice => {
            prefetch::DeviceRequestExpander::from_params(&params)?;
            vec![program(kind, prefetch::L2_STRIDE_SRC)?]
        }
        PolicyKind::DynTimeslice | PolicyKind::PreemptCtrl => vec![program(kind, &sched::timeslice_src(&params)?)?],
        PolicyKind::Fixed | PolicyKind::Greedy | PolicyKind::MaxSteals | PolicyKind::LatencyBudget => {
            vec![program(kind, &block::steal_src(kind, &params)?)?]
        }
    };
    let name = params.get("name").map_or_else(|| kind.name().to_ascii_lowercase(), str::to_string);
    Ok(PolicySpec { name, kind, params, programs })
}

/// Parse a policy file into built policies.
pub fn parse_policy_file(text: &str) -> Result<Vec<PolicySpec>, PolicyError> {
    let mut sections: Vec<(usize, Params)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line == "[policy]" {
            sections.push((i + 1, Params::new()));
            continue;
        }
        if line.starts_with('[') {
            return Err(PolicyError::File { line: i + 1, msg: format!("unknown section {line}") });
        }
        let (k, v) = line.split_once('=').ok_or_else(|| PolicyError::File { line: i + 1, msg: "expected key = value".into() })?;
        if sections.is_empty() {
            sections.push((i + 1, Params::new()));
        }
        let cur = &mut sections.last_mut().expect("section exists").1;
        if cur.0.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(PolicyError::File { line: i + 1, msg: format!("duplicate key `{}`", k.trim()) });
        }
    }
    let mut out = Vec::new();
    for (line, mut params) in sections {
        let kind_name = params.0.remove("kind").ok_or(PolicyError::File { line, msg: "missing `kind`".into() })?;
        let kind = PolicyKind::from_name(&kind_name).ok_or(PolicyError::UnknownKind(kind_name))?;
        if !params.0.contains_key("name") {
            return Err(PolicyError::File { line, msg: "missing `name`".into() });
        }
        out.push(build(kind, params)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
