//! Unified-memory simulator: 2MB regions of 4KB pages, a kernel-owned
//! eviction list, fault-driven migration over a PCIe cost model, and the four
//! programmable memory hooks.
//!
//! The victim end of the eviction list is its head. Activation appends at the
//! tail, so with no policy the list is FIFO by activation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::host::{IrHandlers, PolicyFault};
use crate::ir::helpers::ids;
use crate::ir::{context_schema, ContextBuf, Hook, ProgramType};
use crate::log::EventLog;

pub const PAGE_SIZE: u64 = 4096;
pub const PAGES_PER_REGION: usize = 512;
pub const REGION_SIZE: u64 = PAGE_SIZE * PAGES_PER_REGION as u64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemError {
    #[error("unknown region {0}")]
    UnknownRegion(u32),
    #[error("address {0:#x} is outside every allocation")]
    Unmapped(u64),
    #[error("region {0} is already on the eviction list")]
    AlreadyActive(u32),
    #[error("hook {0} already has a handler")]
    SlotTaken(Hook),
    #[error("{0} is not a host memory hook")]
    NotMemHook(Hook),
    #[error("invalid memory config: {0}")]
    Config(String),
}

/// Cost and sizing knobs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemConfig {
    pub capacity_bytes: u64,
    /// Latency of an access that hits device memory.
    pub t_dev_ns: u64,
    /// Fixed cost of one migration batch.
    pub migrate_base_ns: u64,
    /// PCIe bandwidth in GB/s, i.e. bytes per ns.
    pub pcie_gbps: u64,
    pub prefetch_cap_pages: usize,
    /// gpu_access fires on one hit in this many.
    pub hit_sample: u64,
    pub hook_overhead_ns: u64,
}

impl Default for MemConfig {
    fn default() -> Self {
        MemConfig {
            capacity_bytes: 64 << 20,
            t_dev_ns: 200,
            migrate_base_ns: 3000,
            pcie_gbps: 16,
            prefetch_cap_pages: 64,
            hit_sample: 64,
            hook_overhead_ns: 50,
        }
    }
}

impl MemConfig {
    pub fn validate(&self) -> Result<(), MemError> {
        if self.capacity_bytes < REGION_SIZE {
            return Err(MemError::Config("capacity must hold at least one 2MB region".into()));
        }
        if self.pcie_gbps == 0 || self.hit_sample == 0 {
            return Err(MemError::Config("pcie_gbps and hit_sample must be positive".into()));
        }
        Ok(())
    }

    pub fn migration_ns(&self, bytes: u64) -> u64 {
        if bytes == 0 {
            0
        } else {
            self.migrate_base_ns + bytes / self.pcie_gbps
        }
    }
}

/// Decision codes written by host memory handlers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u64)]
pub enum MemDecision {
    Default = 0,
    /// gpu_access: skip the gpu_prefetch handler for this fault.
    BypassDefault = 1,
    /// The handler reordered the eviction list.
    Reordered = 2,
}

impl MemDecision {
    pub fn from_code(c: u64) -> Option<MemDecision> {
        match c {
            0 => Some(MemDecision::Default),
            1 => Some(MemDecision::BypassDefault),
            2 => Some(MemDecision::Reordered),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MemDecision::Default => "DEFAULT",
            MemDecision::BypassDefault => "BYPASS_DEFAULT",
            MemDecision::Reordered => "REORDERED",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
struct PageSet([u64; PAGES_PER_REGION / 64]);

impl PageSet {
    fn get(&self, p: usize) -> bool {
        self.0[p / 64] >> (p % 64) & 1 == 1
    }

    fn set(&mut self, p: usize, v: bool) {
        if v {
            self.0[p / 64] |= 1 << (p % 64);
        } else {
            self.0[p / 64] &= !(1 << (p % 64));
        }
    }

    fn count(&self) -> u32 {
        self.0.iter().map(|w| w.count_ones()).sum()
    }

    fn clear(&mut self) {
        self.0 = [0; PAGES_PER_REGION / 64];
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pub id: u32,
    pub base_addr: u64,
    pub tenant: u32,
    pub access_count: u64,
    pub last_access_ns: u64,
    resident: PageSet,
    prefetched_unused: PageSet,
}

impl Region {
    pub fn is_resident(&self, page: usize) -> bool {
        self.resident.get(page)
    }

    pub fn resident_pages(&self) -> u32 {
        self.resident.count()
    }

    /// Global page number of page `page` of this region.
    pub fn page_number(&self, page: usize) -> u64 {
        self.base_addr / PAGE_SIZE + page as u64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Link {
    prev: Option<u32>,
    next: Option<u32>,
    member: bool,
}

/// Doubly linked ordering of region ids. Head is the victim end.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EvictionList {
    links: Vec<Link>,
    head: Option<u32>,
    tail: Option<u32>,
    len: usize,
}

impl EvictionList {
    pub fn new(regions: usize) -> Self {
        EvictionList { links: vec![Link::default(); regions], head: None, tail: None, len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn contains(&self, r: u32) -> bool {
        self.links.get(r as usize).is_some_and(|l| l.member)
    }

    pub fn head(&self) -> Option<u32> {
        self.head
    }

    pub fn order(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.len);
        let mut cur = self.head;
        while let Some(r) = cur {
            out.push(r);
            cur = self.links[r as usize].next;
        }
        out
    }

    fn unlink(&mut self, r: u32) {
        let Link { prev, next, .. } = self.links[r as usize];
        match prev {
            Some(p) => self.links[p as usize].next = next,
            None => self.head = next,
        }
        match next {
            Some(n) => self.links[n as usize].prev = prev,
            None => self.tail = prev,
        }
        self.links[r as usize] = Link::default();
        self.len -= 1;
    }

    fn link_tail(&mut self, r: u32) {
        self.links[r as usize] = Link { prev: self.tail, next: None, member: true };
        match self.tail {
            Some(t) => self.links[t as usize].next = Some(r),
            None => self.head = Some(r),
        }
        self.tail = Some(r);
        self.len += 1;
    }

    fn link_head(&mut self, r: u32) {
        self.links[r as usize] = Link { prev: None, next: self.head, member: true };
        match self.head {
            Some(h) => self.links[h as usize].prev = Some(r),
            None => self.tail = Some(r),
        }
        self.head = Some(r);
        self.len += 1;
    }

    /// Kernel-side insertion.
    fn insert_tail(&mut self, r: u32) {
        debug_assert!(!self.contains(r));
        self.link_tail(r);
    }

    /// Kernel-side removal.
    fn remove(&mut self, r: u32) {
        if self.contains(r) {
            self.unlink(r);
        }
    }

    /// Relink a member at the victim end. Returns false if `r` is not a member.
    pub fn move_head(&mut self, r: u32) -> bool {
        if !self.contains(r) {
            return false;
        }
        self.unlink(r);
        self.link_head(r);
        true
    }

    /// Relink a member at the protected end. Returns false if `r` is not a member.
    pub fn move_tail(&mut self, r: u32) -> bool {
        if !self.contains(r) {
            return false;
        }
        self.unlink(r);
        self.link_tail(r);
        true
    }

    /// A list holding exactly `order`, for tests and replays.
    pub fn from_order(regions: usize, order: &[u32]) -> Self {
        let mut l = EvictionList::new(regions);
        for &r in order {
            l.insert_tail(r);
        }
        l
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AccessKind {
    Hit,
    MinorFault,
    MajorFault,
}

impl AccessKind {
    pub fn name(self) -> &'static str {
        match self {
            AccessKind::Hit => "HIT",
            AccessKind::MinorFault => "MINOR_FAULT",
            AccessKind::MajorFault => "MAJOR_FAULT",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessOutcome {
    pub kind: AccessKind,
    pub latency_ns: u64,
    pub migrated_bytes: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TenantMem {
    /// 0 (highest) to 100 (lowest).
    pub priority: u64,
    pub resident_bytes: u64,
    pub accesses: u64,
    pub hits: u64,
    pub minor_faults: u64,
    pub major_faults: u64,
    pub migrated_bytes: u64,
    pub prefetched_pages: u64,
    pub time_ns: u64,
}

impl TenantMem {
    pub fn faults(&self) -> u64 {
        self.minor_faults + self.major_faults
    }

    pub fn hit_rate(&self) -> f64 {
        if self.accesses == 0 {
            0.0
        } else {
            self.hits as f64 / self.accesses as f64
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemStats {
    pub accesses: u64,
    pub hits: u64,
    pub minor_faults: u64,
    pub major_faults: u64,
    pub migrated_bytes: u64,
    pub prefetched_pages: u64,
    pub evictions: u64,
    pub hook_calls: u64,
    pub hook_overhead_ns: u64,
    pub violations: u64,
    /// Prefetched pages evicted before any access.
    pub wasted_prefetch_pages: u64,
    /// Link time of device-requested prefetches, not charged to any access.
    pub background_ns: u64,
}

impl MemStats {
    pub fn faults(&self) -> u64 {
        self.minor_faults + self.major_faults
    }

    pub fn hit_rate(&self) -> f64 {
        if self.accesses == 0 {
            0.0
        } else {
            self.hits as f64 / self.accesses as f64
        }
    }
}

/// Read-only state visible to native handlers.
pub struct MemView<'a> {
    pub regions: &'a [Region],
    pub tenants: &'a BTreeMap<u32, TenantMem>,
    pub config: &'a MemConfig,
}

/// Kfuncs available to one host memory handler invocation.
pub struct MemKfuncs<'a> {
    list: &'a mut EvictionList,
    pub view: MemView<'a>,
    prefetch: Vec<u64>,
    calls: u64,
    limit: u64,
}

impl MemKfuncs<'_> {
    fn charge(&mut self) -> Result<(), PolicyFault> {
        self.calls += 1;
        if self.calls > self.limit {
            Err(PolicyFault::Budget("helper-call"))
        } else {
            Ok(())
        }
    }

    pub fn list(&self) -> &EvictionList {
        self.list
    }

    pub fn move_head(&mut self, region: u32) -> Result<(), PolicyFault> {
        self.charge()?;
        if self.list.move_head(region) {
            Ok(())
        } else {
            Err(PolicyFault::Kfunc(format!("move_head: region {region} not on the eviction list")))
        }
    }

    pub fn move_tail(&mut self, region: u32) -> Result<(), PolicyFault> {
        self.charge()?;
        if self.list.move_tail(region) {
            Ok(())
        } else {
            Err(PolicyFault::Kfunc(format!("move_tail: region {region} not on the eviction list")))
        }
    }

    /// Request `count` pages starting at global page number `first`.
    pub fn prefetch_pages(&mut self, first: u64, count: u64) -> Result<(), PolicyFault> {
        self.charge()?;
        let cap = self.view.config.prefetch_cap_pages as u64;
        let room = cap.saturating_sub(self.prefetch.len() as u64);
        self.prefetch.extend(first..first.saturating_add(count.min(room)));
        Ok(())
    }

    fn dispatch(&mut self, id: u32, args: [u64; 5]) -> Result<u64, PolicyFault> {
        match id {
            ids::MOVE_HEAD => self.move_head(args[0] as u32).map(|_| 0),
            ids::MOVE_TAIL => self.move_tail(args[0] as u32).map(|_| 0),
            ids::PREFETCH_PAGES => self.prefetch_pages(args[0], args[1]).map(|_| 0),
            ids::TRACE_RECORD => Ok(0),
            other => Err(PolicyFault::Kfunc(format!("kfunc {other} is not available to memory handlers"))),
        }
    }
}

/// A host memory policy: native code or verified programs.
pub trait MemPolicy: Send {
    fn name(&self) -> &str;

    /// Hooks this policy occupies.
    fn hooks(&self) -> Vec<Hook>;

    /// Handle one hook; the decision goes into the context's decision field.
    fn invoke(&mut self, hook: Hook, ctx: &mut ContextBuf, k: &mut MemKfuncs<'_>) -> Result<(), PolicyFault>;

    /// Kernel notification after a region is evicted.
    fn evicted(&mut self, _region: u32, _unused_prefetched: u32) {}
}

/// Memory policy made of verified host programs.
pub struct IrMemPolicy {
    pub name: String,
    pub handlers: IrHandlers,
}

impl MemPolicy for IrMemPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn hooks(&self) -> Vec<Hook> {
        self.handlers.hooks()
    }

    fn invoke(&mut self, hook: Hook, ctx: &mut ContextBuf, k: &mut MemKfuncs<'_>) -> Result<(), PolicyFault> {
        let now = ctx.get("time_ns");
        self.handlers.run(hook, ctx, now, &mut |id, args| k.dispatch(id, args)).map(|_| ())
    }
}

struct Invocation {
    decision: MemDecision,
    prefetch: Vec<u64>,
}

/// The memory simulator. All mutation goes through `access`, `activate`,
/// `evict` and the prefetch entry points; hook overhead is charged to the
/// operation that triggered the hook.
pub struct MemSim {
    pub config: MemConfig,
    regions: Vec<Region>,
    list: EvictionList,
    resident_bytes: u64,
    tenants: BTreeMap<u32, TenantMem>,
    policies: Vec<Box<dyn MemPolicy>>,
    slots: BTreeMap<Hook, usize>,
    pub log: EventLog,
    pub stats: MemStats,
    hit_counter: u64,
}

impl MemSim {
    pub fn new(config: MemConfig) -> Result<MemSim, MemError> {
        config.validate()?;
        Ok(MemSim {
            config,
            regions: Vec::new(),
            list: EvictionList::new(0),
            resident_bytes: 0,
            tenants: BTreeMap::new(),
            policies: Vec::new(),
            slots: BTreeMap::new(),
            log: EventLog::new(),
            stats: MemStats::default(),
            hit_counter: 0,
        })
    }

    /// Reserve whole 2MB regions for `bytes` owned by `tenant`; returns the
    /// base address. Allocations are laid out back to back from address 0.
    pub fn allocate(&mut self, tenant: u32, bytes: u64) -> u64 {
        let base = self.regions.len() as u64 * REGION_SIZE;
        let n = bytes.div_ceil(REGION_SIZE).max(1);
        for _ in 0..n {
            let id = self.regions.len() as u32;
            self.regions.push(Region {
                id,
                base_addr: id as u64 * REGION_SIZE,
                tenant,
                access_count: 0,
                last_access_ns: 0,
                resident: PageSet::default(),
                prefetched_unused: PageSet::default(),
            });
        }
        self.list.links.resize(self.regions.len(), Link::default());
        self.tenants.entry(tenant).or_default();
        base
    }

    pub fn set_tenant_priority(&mut self, tenant: u32, priority: u64) {
        self.tenants.entry(tenant).or_default().priority = priority.min(100);
    }

    pub fn attach(&mut self, policy: Box<dyn MemPolicy>) -> Result<(), MemError> {
        let hooks = policy.hooks();
        for &h in &hooks {
            if h.program_type() != ProgramType::GpuMem {
                return Err(MemError::NotMemHook(h));
            }
            if self.slots.contains_key(&h) {
                return Err(MemError::SlotTaken(h));
            }
        }
        let idx = self.policies.len();
        self.policies.push(policy);
        for h in hooks {
            self.slots.insert(h, idx);
        }
        Ok(())
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn region(&self, id: u32) -> Result<&Region, MemError> {
        self.regions.get(id as usize).ok_or(MemError::UnknownRegion(id))
    }

    pub fn list(&self) -> &EvictionList {
        &self.list
    }

    pub fn tenants(&self) -> &BTreeMap<u32, TenantMem> {
        &self.tenants
    }

    pub fn resident_bytes(&self) -> u64 {
        self.resident_bytes
    }

    /// Σ per-tenant access time plus background link time.
    pub fn total_time_ns(&self) -> u64 {
        self.tenants.values().map(|t| t.time_ns).sum::<u64>() + self.stats.background_ns
    }

    pub fn region_of(&self, addr: u64) -> Result<(u32, usize), MemError> {
        let r = addr / REGION_SIZE;
        if r >= self.regions.len() as u64 {
            return Err(MemError::Unmapped(addr));
        }
        Ok((r as u32, ((addr % REGION_SIZE) / PAGE_SIZE) as usize))
    }

    /// Resident-byte accounting and list membership.
    pub fn check_invariants(&self) -> Result<(), String> {
        let pages: u64 = self.regions.iter().map(|r| r.resident_pages() as u64).sum();
        if pages * PAGE_SIZE != self.resident_bytes {
            return Err(format!("resident bytes {} != {} pages", self.resident_bytes, pages));
        }
        if self.resident_bytes > self.config.capacity_bytes {
            return Err(format!("resident bytes {} exceed capacity", self.resident_bytes));
        }
        for r in &self.regions {
            if self.list.contains(r.id) != (r.resident_pages() > 0) {
                return Err(format!("region {} list membership disagrees with residency", r.id));
            }
        }
        if self.list.order().len() != self.list.len() {
            return Err("eviction list length mismatch".into());
        }
        Ok(())
    }

    fn tenant_mut(&mut self, t: u32) -> &mut TenantMem {
        self.tenants.entry(t).or_default()
    }

    fn invoke(&mut self, hook: Hook, mut ctx: ContextBuf, time: u64) -> Option<Invocation> {
        let &i = self.slots.get(&hook)?;
        let snapshot = self.list.clone();
        let limit = crate::verifier::HookBudget::default_for(hook).max_helper_calls;
        let mut k = MemKfuncs {
            list: &mut self.list,
            view: MemView { regions: &self.regions, tenants: &self.tenants, config: &self.config },
            prefetch: Vec::new(),
            calls: 0,
            limit,
        };
        let res = self.policies[i].invoke(hook, &mut ctx, &mut k);
        let prefetch = std::mem::take(&mut k.prefetch);
        self.stats.hook_calls += 1;
        self.stats.hook_overhead_ns += self.config.hook_overhead_ns;
        let region = ctx.schema().field("region_id").map(|_| ctx.get("region_id"));
        let res = res.and_then(|_| MemDecision::from_code(ctx.decision()).ok_or(PolicyFault::BadDecision(ctx.decision())));
        match res {
            Ok(d) => {
                self.log.push(time, "mem", "HOOK", region, None, None, format!("{hook}:{}", d.name()), 0);
                Some(Invocation { decision: d, prefetch })
            }
            Err(f) => {
                self.list = snapshot;
                self.stats.violations += 1;
                self.log.push(time, "mem", "HOOK", region, None, None, format!("{hook}:VIOLATION"), 0);
                log::debug!("{hook} handler fault: {f}");
                Some(Invocation { decision: MemDecision::Default, prefetch: Vec::new() })
            }
        }
    }

    fn ctx(&self, hook: Hook, r: u32, time: u64) -> ContextBuf {
        let reg = &self.regions[r as usize];
        let tenant = self.tenants.get(&reg.tenant).copied().unwrap_or_default();
        let mut c = context_schema(hook).new_context();
        c.set("region_id", r as u64).set("tenant", reg.tenant as u64).set("time_ns", time);
        let s = c.schema().clone();
        let mut put = |name: &str, v: u64| {
            if s.field(name).is_some() {
                c.set(name, v);
            }
        };
        put("access_count", reg.access_count);
        put("resident_pages", reg.resident_pages() as u64);
        put("last_access_ns", reg.last_access_ns);
        put("tenant_resident_bytes", tenant.resident_bytes);
        put("tenant_priority", tenant.priority);
        c
    }

    fn evict_region(&mut self, v: u32, time: u64) {
        let reg = &mut self.regions[v as usize];
        let n = reg.resident_pages() as u64;
        let unused = reg.prefetched_unused.count();
        let tenant = reg.tenant;
        reg.resident.clear();
        reg.prefetched_unused.clear();
        self.resident_bytes -= n * PAGE_SIZE;
        self.tenant_mut(tenant).resident_bytes -= n * PAGE_SIZE;
        self.list.remove(v);
        self.stats.evictions += 1;
        self.stats.wasted_prefetch_pages += unused as u64;
        self.log.push(time, "mem", "EVICT", Some(v as u64), None, Some(tenant), "", n * PAGE_SIZE);
        for p in &mut self.policies {
            p.evicted(v, unused);
        }
    }

    /// One eviction decision: let the handler reorder the candidates, then
    /// evict the first unprotected region from the victim end.
    fn evict_one(&mut self, protect: &BTreeSet<u32>, time: u64, latency: &mut u64) -> Option<u32> {
        let candidates: Vec<u32> = self.list.order().into_iter().filter(|r| !protect.contains(r)).collect();
        if candidates.is_empty() {
            return None;
        }
        if self.slots.contains_key(&Hook::GpuEvictPrepare) {
            let round = self.list.clone();
            let len = self.list.len() as u64;
            let before = self.stats.violations;
            for (pos, &c) in candidates.iter().enumerate() {
                let mut ctx = self.ctx(Hook::GpuEvictPrepare, c, time);
                ctx.set("list_pos", pos as u64).set("list_len", len);
                self.invoke(Hook::GpuEvictPrepare, ctx, time);
                *latency += self.config.hook_overhead_ns;
                if self.stats.violations != before {
                    // fall back to kernel order for this decision
                    self.list = round;
                    break;
                }
            }
        }
        let victim = self.list.order().into_iter().find(|r| !protect.contains(r))?;
        self.evict_region(victim, time);
        Some(victim)
    }

    fn ensure_free(&mut self, bytes: u64, protect: &BTreeSet<u32>, time: u64, latency: &mut u64) -> bool {
        while self.config.capacity_bytes - self.resident_bytes < bytes {
            if self.evict_one(protect, time, latency).is_none() {
                return false;
            }
        }
        true
    }

    /// Migrate one page in; activates the region if needed.
    fn bring_in(&mut self, r: u32, page: usize, prefetched: bool, protect: &BTreeSet<u32>, time: u64, latency: &mut u64) -> bool {
        if self.regions[r as usize].is_resident(page) || !self.ensure_free(PAGE_SIZE, protect, time, latency) {
            return false;
        }
        let reg = &mut self.regions[r as usize];
        reg.resident.set(page, true);
        reg.prefetched_unused.set(page, prefetched);
        let tenant = reg.tenant;
        self.resident_bytes += PAGE_SIZE;
        let t = self.tenant_mut(tenant);
        t.resident_bytes += PAGE_SIZE;
        t.migrated_bytes += PAGE_SIZE;
        if prefetched {
            t.prefetched_pages += 1;
            self.stats.prefetched_pages += 1;
        }
        self.stats.migrated_bytes += PAGE_SIZE;
        let how = if prefetched { "PREFETCH" } else { "FAULT" };
        self.log.push(time, "mem", "MIGRATE", Some(r as u64), Some(page as u64), Some(tenant), how, PAGE_SIZE);
        if !self.list.contains(r) {
            self.list.insert_tail(r);
            self.log.push(time, "mem", "ACTIVATE", Some(r as u64), None, Some(tenant), "", 0);
            let ctx = self.ctx(Hook::GpuActivate, r, time);
            if self.invoke(Hook::GpuActivate, ctx, time).is_some() {
                *latency += self.config.hook_overhead_ns;
            }
        }
        true
    }

    /// Migrate the listed global page numbers, skipping resident and unmapped
    /// pages, until the device cannot make room without evicting `protect`.
    fn migrate_list(&mut self, pages: &[u64], protect: &mut BTreeSet<u32>, time: u64, latency: &mut u64) -> u64 {
        let mut bytes = 0;
        for &pn in pages {
            let r = pn / PAGES_PER_REGION as u64;
            if r >= self.regions.len() as u64 {
                continue;
            }
            let (r, page) = (r as u32, (pn % PAGES_PER_REGION as u64) as usize);
            if self.regions[r as usize].is_resident(page) {
                continue;
            }
            protect.insert(r);
            if !self.bring_in(r, page, true, protect, time, latency) {
                break;
            }
            bytes += PAGE_SIZE;
        }
        bytes
    }

    /// One device access by `tenant` at `time`.
    pub fn access(&mut self, addr: u64, tenant: u32, time: u64) -> Result<AccessOutcome, MemError> {
        let (r, page) = self.region_of(addr)?;
        let reg = &mut self.regions[r as usize];
        reg.access_count += 1;
        reg.last_access_ns = time;
        let mut latency = self.config.t_dev_ns;
        self.stats.accesses += 1;

        if reg.is_resident(page) {
            reg.prefetched_unused.set(page, false);
            self.stats.hits += 1;
            self.hit_counter += 1;
            if self.hit_counter % self.config.hit_sample == 0 {
                let mut ctx = self.ctx(Hook::GpuAccess, r, time);
                ctx.set("fault_addr", addr).set("page_index", page as u64);
                if self.invoke(Hook::GpuAccess, ctx, time).is_some() {
                    latency += self.config.hook_overhead_ns;
                }
            }
            let t = self.tenant_mut(tenant);
            t.accesses += 1;
            t.hits += 1;
            t.time_ns += latency;
            self.log.push(time, "mem", "ACCESS", Some(r as u64), Some(page as u64), Some(tenant), "HIT", 0);
            return Ok(AccessOutcome { kind: AccessKind::Hit, latency_ns: latency, migrated_bytes: 0 });
        }

        let kind = if self.list.contains(r) { AccessKind::MinorFault } else { AccessKind::MajorFault };
        let mut ctx = self.ctx(Hook::GpuAccess, r, time);
        ctx.set("fault_addr", addr).set("page_index", page as u64).set("is_fault", 1);
        let mut prefetch = Vec::new();
        let mut bypass = false;
        if let Some(inv) = self.invoke(Hook::GpuAccess, ctx, time) {
            latency += self.config.hook_overhead_ns;
            bypass = inv.decision == MemDecision::BypassDefault;
            prefetch = inv.prefetch;
        }
        if !bypass {
            let mut ctx = self.ctx(Hook::GpuPrefetch, r, time);
            ctx.set("fault_addr", addr).set("page_index", page as u64);
            if let Some(inv) = self.invoke(Hook::GpuPrefetch, ctx, time) {
                latency += self.config.hook_overhead_ns;
                prefetch.extend(inv.prefetch);
            }
        }
        prefetch.truncate(self.config.prefetch_cap_pages);

        let mut protect = BTreeSet::from([r]);
        let ok = self.bring_in(r, page, false, &protect, time, &mut latency);
        debug_assert!(ok, "a 2MB-capable device always fits the faulting page");
        let mut bytes = if ok { PAGE_SIZE } else { 0 };
        bytes += self.migrate_list(&prefetch, &mut protect, time, &mut latency);
        latency += self.config.migration_ns(bytes);

        match kind {
            AccessKind::MinorFault => self.stats.minor_faults += 1,
            _ => self.stats.major_faults += 1,
        }
        let t = self.tenant_mut(tenant);
        t.accesses += 1;
        t.time_ns += latency;
        match kind {
            AccessKind::MinorFault => t.minor_faults += 1,
            _ => t.major_faults += 1,
        }
        self.log.push(time, "mem", "ACCESS", Some(r as u64), Some(page as u64), Some(tenant), kind.name(), bytes);
        Ok(AccessOutcome { kind, latency_ns: latency, migrated_bytes: bytes })
    }

    /// Put a region on the device by migrating its first page.
    pub fn activate(&mut self, region: u32, tenant: u32, time: u64) -> Result<(), MemError> {
        self.region(region)?;
        if self.list.contains(region) {
            return Err(MemError::AlreadyActive(region));
        }
        let mut latency = 0;
        self.bring_in(region, 0, false, &BTreeSet::from([region]), time, &mut latency);
        latency += self.config.migration_ns(PAGE_SIZE);
        self.tenant_mut(tenant).time_ns += latency;
        Ok(())
    }

    /// Evict whole regions from the victim end until `needed_bytes` are freed
    /// or the device is empty.
    pub fn evict(&mut self, needed_bytes: u64, time: u64) -> Vec<u32> {
        let mut freed = 0;
        let mut victims = Vec::new();
        let mut latency = 0;
        while freed < needed_bytes {
            let before = self.resident_bytes;
            match self.evict_one(&BTreeSet::new(), time, &mut latency) {
                Some(v) => victims.push(v),
                None => break,
            }
            freed += before - self.resident_bytes;
        }
        self.stats.background_ns += latency;
        victims
    }

    /// Kernel-initiated prefetch of global page numbers; returns migrated bytes.
    pub fn prefetch_pages(&mut self, pages: &[u64], time: u64) -> u64 {
        let mut latency = 0;
        let cap = &pages[..pages.len().min(self.config.prefetch_cap_pages)];
        let bytes = self.migrate_list(cap, &mut BTreeSet::new(), time, &mut latency);
        self.stats.background_ns += latency + self.config.migration_ns(bytes);
        bytes
    }

    /// A device-side gdev_mem_prefetch request for `region`: the host
    /// gpu_prefetch handler decides which pages to bring in.
    pub fn device_prefetch(&mut self, region: u32, time: u64) -> Result<u64, MemError> {
        let reg = self.region(region)?;
        let Some(page) = (0..PAGES_PER_REGION).find(|&p| !reg.is_resident(p)) else {
            return Ok(0);
        };
        let addr = reg.base_addr + page as u64 * PAGE_SIZE;
        let mut ctx = self.ctx(Hook::GpuPrefetch, region, time);
        ctx.set("fault_addr", addr).set("page_index", page as u64).set("device_request", 1);
        self.log.push(time, "mem", "DEVICE_PREFETCH", Some(region as u64), Some(page as u64), None, "", 0);
        let mut latency = 0;
        let mut pages = match self.invoke(Hook::GpuPrefetch, ctx, time) {
            Some(inv) => {
                latency += self.config.hook_overhead_ns;
                inv.prefetch
            }
            None => Vec::new(),
        };
        pages.truncate(self.config.prefetch_cap_pages);
        let bytes = self.migrate_list(&pages, &mut BTreeSet::from([region]), time, &mut latency);
        self.stats.background_ns += latency + self.config.migration_ns(bytes);
        Ok(bytes)
    }
}
