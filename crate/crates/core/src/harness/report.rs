//! Metrics report: per-tenant memory counters, launch latency, block
//! makespans, map contents and hook accounting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::log::EventLog;
use crate::mem::{MemStats, PAGE_SIZE};
use crate::sched::{LatencySummary, QueueAttrs, QueueState, SchedStats, TenantClass};

/// Bumped whenever a field is added, removed or renamed.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub scenario: String,
    pub seed: u64,
    /// Working set over device capacity.
    pub oversubscription: f64,
    pub policies: Vec<PolicyRow>,
    pub tenants: Vec<TenantRow>,
    pub memory: MemorySummary,
    pub classes: Vec<ClassRow>,
    pub queues: Vec<QueueRow>,
    pub sched: SchedStats,
    pub block: Option<BlockSummary>,
    pub kernel: Option<KernelSummary>,
    pub maps: Vec<MapEntry>,
    pub hooks: HookAccounting,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyRow {
    pub name: String,
    pub kind: String,
    pub tag: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TenantRow {
    pub tenant: u32,
    pub class: String,
    pub priority: u64,
    pub accesses: u64,
    pub hits: u64,
    pub minor_faults: u64,
    pub major_faults: u64,
    pub faults: u64,
    pub migrated_bytes: u64,
    pub prefetched_pages: u64,
    pub hit_rate: f64,
    /// Summed access latency of the tenant's stream.
    pub completion_ns: u64,
    pub launches: u64,
    pub launch_p99_us: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MemorySummary {
    pub stats: MemStats,
    pub total_time_ns: u64,
    pub resident_bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: String,
    pub latency: LatencySummary,
    /// Completed work µs per µs of wall time.
    pub throughput: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueRow {
    pub queue: u32,
    pub tenant: u32,
    pub class: TenantClass,
    pub state: QueueState,
    pub attrs: QueueAttrs,
    pub latency: LatencySummary,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub units: u64,
    pub workers: u32,
    pub makespan_us: f64,
    /// Makespan if nothing were stolen.
    pub fixed_makespan_us: u64,
    pub steals: u64,
    pub stolen_work_us: u64,
    pub busy_us: Vec<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KernelSummary {
    pub hook_calls: u64,
    pub cost_ns: u64,
    pub prefetch_requests: u64,
    pub prefetched_bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapEntry {
    pub map: u32,
    pub name: String,
    pub epoch: u64,
    pub key: u64,
    pub value: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HookAccounting {
    pub mem_hook_calls: u64,
    pub mem_overhead_ns: u64,
    pub sched_hook_calls: u64,
    pub device_hook_calls: u64,
    pub device_cost_ns: u64,
    pub violations: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

impl Format {
    pub fn from_name(s: &str) -> Option<Format> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Some(Format::Json),
            "csv" => Some(Format::Csv),
            _ => None,
        }
    }
}

pub const CSV_HEADER: &str = "tenant,class,priority,accesses,hits,minor_faults,major_faults,faults,migrated_bytes,prefetched_pages,hit_rate,completion_ns,launches,launch_p99_us";

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<MetricsReport, String> {
        let r: MetricsReport = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(format!("schema version {} (expected {SCHEMA_VERSION})", r.schema_version));
        }
        Ok(r)
    }

    /// Per-tenant table, one row per tenant.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for t in &self.tenants {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{:.6},{},{},{}",
                t.tenant,
                t.class,
                t.priority,
                t.accesses,
                t.hits,
                t.minor_faults,
                t.major_faults,
                t.faults,
                t.migrated_bytes,
                t.prefetched_pages,
                t.hit_rate,
                t.completion_ns,
                t.launches,
                t.launch_p99_us
            );
        }
        out
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Json => self.to_json(),
            Format::Csv => self.to_csv(),
        }
    }

    pub fn tenant(&self, id: u32) -> Option<&TenantRow> {
        self.tenants.iter().find(|t| t.id() == id)
    }

    pub fn class(&self, class: TenantClass) -> Option<&ClassRow> {
        self.classes.iter().find(|c| c.class == class.name())
    }

    pub fn total_faults(&self) -> u64 {
        self.memory.stats.minor_faults + self.memory.stats.major_faults
    }

    /// Cross-check counters against the event log.
    pub fn reconcile(&self, log: &EventLog) -> Result<(), String> {
        let migrations = log.of_kind("mem", "MIGRATE").count() as u64;
        let tenant_bytes: u64 = self.tenants.iter().map(|t| t.migrated_bytes).sum();
        if tenant_bytes != migrations * PAGE_SIZE {
            return Err(format!("tenant migrated bytes {tenant_bytes} != {migrations} migrations x {PAGE_SIZE}"));
        }
        let accesses = log.of_kind("mem", "ACCESS").count() as u64;
        if accesses != self.memory.stats.accesses {
            return Err(format!("{accesses} ACCESS records, {} counted", self.memory.stats.accesses));
        }
        let hits = log.of_kind("mem", "ACCESS").filter(|r| r.outcome == "HIT").count() as u64;
        if hits != self.memory.stats.hits {
            return Err(format!("{hits} HIT records, {} counted", self.memory.stats.hits));
        }
        let hooks = log.of_kind("mem", "HOOK").count() as u64;
        if hooks != self.hooks.mem_hook_calls {
            return Err(format!("{hooks} HOOK records, {} counted", self.hooks.mem_hook_calls));
        }
        Ok(())
    }
}

impl TenantRow {
    fn id(&self) -> u32 {
        self.tenant
    }
}
