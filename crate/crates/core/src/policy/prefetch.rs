//! Prefetch policies. All of them occupy gpu_prefetch; only the device
//! request expander acts on requests raised by device programs.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use super::{Params, PolicyError};
use crate::host::PolicyFault;
use crate::ir::{ContextBuf, Hook};
use crate::mem::{MemKfuncs, MemPolicy, PAGES_PER_REGION, PAGE_SIZE};

/// Device half of the L2 stride prefetcher. The warp's lowest lane address is
/// its base; when the base moved forward since the warp's previous access,
/// the region one stride ahead is requested. Every lane carries the same
/// delta, so `max` aggregation stores it once per warp.
pub const L2_STRIDE_SRC: &str = "\
.hook access
.map last hash global
.agg max
    ldctxdw r1, lane_addr
    call warp_reduce_min
    mov r6, r0
    ldctxdw r7, sm_id
    lsh r7, 16
    ldctxdw r8, warp_id
    add r7, r8
    mov r1, 0
    mov r2, r7
    call map_lookup
    mov r8, r0
    mov r1, 0
    mov r2, r7
    mov r3, r6
    sub r3, r8
    call map_update
    jeq r8, 0, out
    jle r6, r8, out
    mov r1, r6
    sub r1, r8
    add r1, r6
    rsh r1, 21
    call gdev_mem_prefetch
out:
    mov r0, 0
    exit
";

fn is_device_request(ctx: &ContextBuf) -> bool {
    ctx.get("device_request") != 0
}

fn fault_page(ctx: &ContextBuf) -> u64 {
    ctx.get("fault_addr") / PAGE_SIZE
}

/// Host half of the L2 stride prefetcher: a device request for a region
/// brings in `expand` pages from its first missing page.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceRequestExpander {
    pub expand: u64,
}

impl DeviceRequestExpander {
    pub fn from_params(p: &Params) -> Result<Self, PolicyError> {
        Ok(DeviceRequestExpander { expand: p.positive("expand_pages", Some(32))? })
    }
}

impl MemPolicy for DeviceRequestExpander {
    fn name(&self) -> &str {
        "l2_stride_device"
    }

    fn hooks(&self) -> Vec<Hook> {
        vec![Hook::GpuPrefetch]
    }

    fn invoke(&mut self, _hook: Hook, ctx: &mut ContextBuf, k: &mut MemKfuncs<'_>) -> Result<(), PolicyFault> {
        if is_device_request(ctx) {
            k.prefetch_pages(fault_page(ctx), self.expand)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct StrideState {
    last: Option<u64>,
    deltas: VecDeque<i64>,
    stride: Option<i64>,
    /// First fault expected after the last prefetched run.
    expect: Option<u64>,
}

/// Constant-stride detector over each tenant's fault stream.
///
/// `history` equal, nonzero deltas confirm a stride; a fault just past the
/// previously prefetched run continues it. Prefetch depth halves whenever a
/// region holding our prefetched pages is evicted with some of them unused.
#[derive(Clone, Debug, PartialEq)]
pub struct Stride {
    pub history: usize,
    pub depth: u64,
    tenants: BTreeMap<u32, StrideState>,
    touched: BTreeSet<u32>,
}

impl Stride {
    pub fn from_params(p: &Params) -> Result<Self, PolicyError> {
        let history = p.positive("history", Some(3))? as usize;
        let depth = p.positive("depth", Some(32))?;
        if depth > 64 {
            return Err(PolicyError::Param { key: "depth".into(), msg: "at most 64 pages".into() });
        }
        Ok(Stride { history, depth, tenants: BTreeMap::new(), touched: BTreeSet::new() })
    }

    /// Feed one fault; returns the pages to prefetch.
    pub fn observe(&mut self, tenant: u32, page: u64) -> Vec<u64> {
        let (history, depth) = (self.history, self.depth);
        let st = self.tenants.entry(tenant).or_default();
        let continues = st.expect == Some(page) && st.stride.is_some();
        if !continues {
            if let Some(last) = st.last {
                st.deltas.push_back(page as i64 - last as i64);
                while st.deltas.len() > history {
                    st.deltas.pop_front();
                }
            }
            let d = st.deltas.front().copied().unwrap_or(0);
            st.stride = (st.deltas.len() == history && d != 0 && st.deltas.iter().all(|&x| x == d)).then_some(d);
        }
        st.last = Some(page);
        st.expect = None;
        let Some(s) = st.stride else { return Vec::new() };
        let pages: Vec<u64> = (1..=depth as i64).map(|i| page as i64 + s * i).take_while(|&p| p >= 0).map(|p| p as u64).collect();
        let next = page as i64 + s * (pages.len() as i64 + 1);
        st.expect = (next >= 0).then_some(next as u64);
        pages
    }
}

impl MemPolicy for Stride {
    fn name(&self) -> &str {
        "stride"
    }

    fn hooks(&self) -> Vec<Hook> {
        vec![Hook::GpuPrefetch]
    }

    fn invoke(&mut self, _hook: Hook, ctx: &mut ContextBuf, k: &mut MemKfuncs<'_>) -> Result<(), PolicyFault> {
        if is_device_request(ctx) {
            return Ok(());
        }
        for p in self.observe(ctx.get("tenant") as u32, fault_page(ctx)) {
            self.touched.insert((p / PAGES_PER_REGION as u64) as u32);
            k.prefetch_pages(p, 1)?;
        }
        Ok(())
    }

    fn evicted(&mut self, region: u32, unused_prefetched: u32) {
        if self.touched.remove(&region) && unused_prefetched > 0 {
            self.depth = (self.depth / 2).max(1);
        }
    }
}

/// Sequential next-N prefetch. N moves between `min_window` and
/// `max_window` with the locality of recent faults and backs off as the
/// recent migration rate approaches the link bandwidth.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveSeq {
    pub min_window: u64,
    pub max_window: u64,
    pub window_events: usize,
    /// (time_ns, page, migrated bytes) of recent faults.
    recent: VecDeque<(u64, u64, u64)>,
}

impl AdaptiveSeq {
    pub fn from_params(p: &Params) -> Result<Self, PolicyError> {
        let min_window = p.u64_or("min_window", 4)?;
        let max_window = p.positive("max_window", Some(64))?;
        let window_events = p.positive("window_events", Some(10))? as usize;
        if min_window > max_window {
            return Err(PolicyError::Param { key: "min_window".into(), msg: "exceeds max_window".into() });
        }
        Ok(AdaptiveSeq { min_window, max_window, window_events, recent: VecDeque::new() })
    }

    /// Window for a fault at `page`, `time`, with link bandwidth `gbps`.
    pub fn window(&self, time: u64, page: u64, gbps: u64) -> u64 {
        if self.recent.is_empty() {
            return self.max_window;
        }
        let mut prev = self.recent.iter().map(|e| e.1).chain([page]);
        let mut last = prev.next().expect("non-empty");
        let (mut near, mut pairs) = (0u64, 0u64);
        for p in prev {
            pairs += 1;
            if p > last && p - last <= self.max_window {
                near += 1;
            }
            last = p;
        }
        let locality = near as f64 / pairs as f64;
        let first = self.recent.front().expect("non-empty").0;
        let bytes: u64 = self.recent.iter().map(|e| e.2).sum();
        let span = time.saturating_sub(first);
        // GB/s is bytes per ns
        let util = if span == 0 { 1.0 } else { bytes as f64 / span as f64 / gbps.max(1) as f64 };
        let scale = locality * (1.0 - util.min(1.0));
        self.min_window + ((self.max_window - self.min_window) as f64 * scale).round() as u64
    }
}

impl MemPolicy for AdaptiveSeq {
    fn name(&self) -> &str {
        "adaptive_seq"
    }

    fn hooks(&self) -> Vec<Hook> {
        vec![Hook::GpuPrefetch]
    }

    fn invoke(&mut self, _hook: Hook, ctx: &mut ContextBuf, k: &mut MemKfuncs<'_>) -> Result<(), PolicyFault> {
        if is_device_request(ctx) {
            return Ok(());
        }
        let (time, page) = (ctx.get("time_ns"), fault_page(ctx));
        let n = self.window(time, page, k.view.config.pcie_gbps);
        if n > 0 {
            k.prefetch_pages(page + 1, n)?;
        }
        self.recent.push_back((time, page, (n + 1) * PAGE_SIZE));
        while self.recent.len() > self.window_events {
            self.recent.pop_front();
        }
        Ok(())
    }
}

const CHUNKS: usize = 32;

/// Buddy-tree prefetch within a region. Leaves are `granule_pages` chunks
/// with decayed fault counts; on a fault the largest enclosing subtree whose
/// share of warm leaves exceeds `threshold` is brought in, and its leaves
/// become warm. Only tenants whose
/// priority lies in `band` are served.
#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    pub band: (u64, u64),
    pub granule_pages: usize,
    pub threshold: f64,
    pub epoch_faults: u64,
    hot: BTreeMap<u32, [u32; CHUNKS]>,
    faults: u64,
}

impl Tree {
    pub fn from_params(p: &Params) -> Result<Self, PolicyError> {
        let band = p.band_or("band", (0, 101))?;
        let granule = p.positive("granule_pages", Some(16))? as usize;
        if granule * CHUNKS != PAGES_PER_REGION {
            return Err(PolicyError::Param { key: "granule_pages".into(), msg: format!("must be {}", PAGES_PER_REGION / CHUNKS) });
        }
        let threshold = p.f64_or("threshold", 0.5)?;
        if !(0.0..1.0).contains(&threshold) {
            return Err(PolicyError::Param { key: "threshold".into(), msg: "must lie in [0, 1)".into() });
        }
        let epoch_faults = p.positive("epoch_faults", Some(256))?;
        Ok(Tree { band, granule_pages: granule, threshold, epoch_faults, hot: BTreeMap::new(), faults: 0 })
    }

    /// Record a fault and return the chosen subtree as (first chunk, chunk count).
    pub fn observe(&mut self, region: u32, page: usize) -> (usize, usize) {
        let leaf = page / self.granule_pages;
        let hot = self.hot.entry(region).or_insert([0; CHUNKS]);
        hot[leaf] = hot[leaf].saturating_add(1);
        let mut chosen = (leaf, 1);
        let mut size = 2;
        while size <= CHUNKS {
            let start = leaf - leaf % size;
            let warm = hot[start..start + size].iter().filter(|&&c| c > 0).count();
            if warm as f64 / size as f64 > self.threshold {
                chosen = (start, size);
            }
            size *= 2;
        }
        // the chosen subtree is brought in, so its leaves count as warm
        for c in &mut hot[chosen.0..chosen.0 + chosen.1] {
            *c = (*c).max(1);
        }
        self.faults += 1;
        if self.faults % self.epoch_faults == 0 {
            for counts in self.hot.values_mut() {
                counts.iter_mut().for_each(|c| *c /= 2);
            }
        }
        chosen
    }
}

impl MemPolicy for Tree {
    fn name(&self) -> &str {
        "tree"
    }

    fn hooks(&self) -> Vec<Hook> {
        vec![Hook::GpuPrefetch]
    }

    fn invoke(&mut self, _hook: Hook, ctx: &mut ContextBuf, k: &mut MemKfuncs<'_>) -> Result<(), PolicyFault> {
        let prio = ctx.get("tenant_priority");
        if is_device_request(ctx) || !(self.band.0..self.band.1).contains(&prio) {
            return Ok(());
        }
        let region = ctx.get("region_id") as u32;
        let page = ctx.get("page_index") as usize;
        let (start, count) = self.observe(region, page);
        let (lo, hi) = (start * self.granule_pages, (start + count) * self.granule_pages);
        let reg = &k.view.regions[region as usize];
        // forward from the fault first, then the part behind it
        let order: Vec<usize> = (page + 1..hi).chain(lo..page).collect();
        let missing: Vec<u64> = order.into_iter().filter(|&p| !reg.is_resident(p)).map(|p| reg.page_number(p)).collect();
        let mut runs: Vec<(u64, u64)> = Vec::new();
        for p in missing {
            match runs.last_mut() {
                Some((first, n)) if *first + *n == p => *n += 1,
                _ => runs.push((p, 1)),
            }
        }
        for (first, n) in runs.into_iter().take(8) {
            k.prefetch_pages(first, n)?;
        }
        Ok(())
    }
}
