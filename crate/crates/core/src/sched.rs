//! Hardware-queue scheduling: queue lifecycle hooks, attribute kfuncs,
//! runlist rounds with per-queue timeslices, and cooperative preemption.
//!
//! Times are microseconds.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::host::{IrHandlers, PolicyFault};
use crate::ir::helpers::ids;
use crate::ir::{context_schema, ContextBuf, Hook, ProgramType};
use crate::log::EventLog;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchedError {
    #[error("unknown queue {0}")]
    UnknownQueue(u32),
    #[error("queue {0} was already destroyed")]
    Destroyed(u32),
    #[error("queue {0} was rejected and accepts no launches")]
    Rejected(u32),
    #[error("hook {0} already has a handler")]
    SlotTaken(Hook),
    #[error("{0} is not a scheduling hook")]
    NotSchedHook(Hook),
    #[error("invalid attributes: {0}")]
    Attrs(String),
    #[error("advance needs a positive duration")]
    ZeroAdvance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TenantClass {
    Lc,
    Be,
}

impl TenantClass {
    pub fn code(self) -> u64 {
        match self {
            TenantClass::Lc => 0,
            TenantClass::Be => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TenantClass::Lc => "LC",
            TenantClass::Be => "BE",
        }
    }

    pub fn from_name(s: &str) -> Option<TenantClass> {
        match s.to_ascii_uppercase().as_str() {
            "LC" => Some(TenantClass::Lc),
            "BE" => Some(TenantClass::Be),
            _ => None,
        }
    }
}

/// Attribute ids accepted by bpf_gpu_set_attr.
pub mod attr {
    pub const PRIORITY: u64 = 0;
    pub const TIMESLICE_US: u64 = 1;
    pub const INTERLEAVE: u64 = 2;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueAttrs {
    /// 0 (highest) to 100 (lowest).
    pub priority: u64,
    pub timeslice_us: u64,
    pub interleave: u64,
}

impl Default for QueueAttrs {
    fn default() -> Self {
        QueueAttrs { priority: 50, timeslice_us: 1000, interleave: 1 }
    }
}

impl QueueAttrs {
    pub fn validate(&self) -> Result<(), SchedError> {
        if self.timeslice_us == 0 || self.interleave == 0 || self.priority > 100 {
            return Err(SchedError::Attrs(format!("{self:?}")));
        }
        Ok(())
    }

    fn set(&mut self, id: u64, value: u64) -> Result<(), PolicyFault> {
        let mut next = *self;
        match id {
            attr::PRIORITY => next.priority = value,
            attr::TIMESLICE_US => next.timeslice_us = value,
            attr::INTERLEAVE => next.interleave = value,
            other => return Err(PolicyFault::Kfunc(format!("unknown attribute {other}"))),
        }
        next.validate().map_err(|e| PolicyFault::Kfunc(e.to_string()))?;
        *self = next;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueueState {
    Active,
    Rejected,
    Destroyed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct QueueDescriptor {
    pub id: u32,
    pub tenant: u32,
    pub class: TenantClass,
    pub attrs: QueueAttrs,
    pub pending: VecDeque<u32>,
    pub state: QueueState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct KernelLaunch {
    pub id: u32,
    pub queue: u32,
    pub class: TenantClass,
    pub submit_us: u64,
    pub start_us: Option<u64>,
    pub end_us: Option<u64>,
    pub work_us: u64,
    pub remaining_us: u64,
    pub cancelled: bool,
}

impl KernelLaunch {
    /// Time from submission to first occupying the engine.
    pub fn latency_us(&self) -> Option<u64> {
        self.start_us.map(|s| s - self.submit_us)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Admission {
    Accepted(u32),
    /// The queue exists in state REJECTED; `retry_after_us` is the handler's hint.
    Rejected { queue: u32, retry_after_us: u64 },
}

impl Admission {
    pub fn queue(self) -> u32 {
        match self {
            Admission::Accepted(q) | Admission::Rejected { queue: q, .. } => q,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchedEventKind {
    Start,
    Complete,
    SliceEnd,
    Switch,
    Preempt,
    PreemptNoop,
    Cancel,
}

impl SchedEventKind {
    pub fn name(self) -> &'static str {
        match self {
            SchedEventKind::Start => "START",
            SchedEventKind::Complete => "COMPLETE",
            SchedEventKind::SliceEnd => "SLICE_END",
            SchedEventKind::Switch => "SWITCH",
            SchedEventKind::Preempt => "PREEMPT",
            SchedEventKind::PreemptNoop => "PREEMPT_NOOP",
            SchedEventKind::Cancel => "CANCEL",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SchedEvent {
    pub time: u64,
    pub kind: SchedEventKind,
    pub queue: u32,
    pub launch: Option<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedConfig {
    pub switch_us: u64,
    pub tick_us: u64,
    pub default_attrs: QueueAttrs,
}

impl Default for SchedConfig {
    fn default() -> Self {
        SchedConfig { switch_us: 5, tick_us: 10, default_attrs: QueueAttrs::default() }
    }
}

/// Kfuncs available to one scheduling handler invocation.
pub struct SchedKfuncs<'a> {
    attrs: Option<&'a mut QueueAttrs>,
    rejected: bool,
    preempt: Vec<u32>,
    pub queues: &'a BTreeMap<u32, QueueDescriptor>,
    pub running: Option<u32>,
}

impl SchedKfuncs<'_> {
    /// Only valid inside task_init, before the queue is first scheduled.
    pub fn set_attr(&mut self, id: u64, value: u64) -> Result<(), PolicyFault> {
        match self.attrs.as_deref_mut() {
            Some(a) => a.set(id, value),
            None => Err(PolicyFault::Kfunc("set_attr outside task_init".into())),
        }
    }

    pub fn reject_bind(&mut self) -> Result<(), PolicyFault> {
        if self.attrs.is_none() {
            return Err(PolicyFault::Kfunc("reject_bind outside task_init".into()));
        }
        self.rejected = true;
        Ok(())
    }

    pub fn preempt(&mut self, queue: u32) -> Result<(), PolicyFault> {
        self.preempt.push(queue);
        Ok(())
    }

    fn dispatch(&mut self, id: u32, args: [u64; 5]) -> Result<u64, PolicyFault> {
        match id {
            ids::SET_ATTR => self.set_attr(args[0], args[1]).map(|_| 0),
            ids::REJECT_BIND => self.reject_bind().map(|_| 0),
            ids::SCHED_PREEMPT => self.preempt(args[0] as u32).map(|_| 0),
            ids::TRACE_RECORD => Ok(0),
            other => Err(PolicyFault::Kfunc(format!("kfunc {other} is not available to scheduling handlers"))),
        }
    }
}

/// A host scheduling policy.
pub trait SchedPolicy: Send {
    fn name(&self) -> &str;

    fn hooks(&self) -> Vec<Hook>;

    fn invoke(&mut self, hook: Hook, ctx: &mut ContextBuf, k: &mut SchedKfuncs<'_>) -> Result<i64, PolicyFault>;

    /// Policy tick after a launch is submitted to `queue`.
    fn on_submit(&mut self, _queue: &QueueDescriptor, _k: &mut SchedKfuncs<'_>) -> Result<(), PolicyFault> {
        Ok(())
    }
}

/// Scheduling policy made of verified host programs.
pub struct IrSchedPolicy {
    pub name: String,
    pub handlers: IrHandlers,
}

impl SchedPolicy for IrSchedPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn hooks(&self) -> Vec<Hook> {
        self.handlers.hooks()
    }

    fn invoke(&mut self, hook: Hook, ctx: &mut ContextBuf, k: &mut SchedKfuncs<'_>) -> Result<i64, PolicyFault> {
        let now = ctx.get("time_ns");
        self.handlers.run(hook, ctx, now, &mut |id, args| k.dispatch(id, args)).map(|o| o.ret)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Running {
    queue: u32,
    ready_at: u64,
    slice_end: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedStats {
    pub hook_calls: u64,
    pub violations: u64,
    pub switches: u64,
    pub preemptions: u64,
    pub cancelled: u64,
}

/// Nearest-rank percentile of an ascending slice; 0 when empty.
pub fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub count: u64,
    pub mean_us: f64,
    pub p50_us: u64,
    pub p90_us: u64,
    pub p99_us: u64,
}

impl LatencySummary {
    pub fn of(mut v: Vec<u64>) -> Self {
        v.sort_unstable();
        let mean = if v.is_empty() { 0.0 } else { v.iter().sum::<u64>() as f64 / v.len() as f64 };
        LatencySummary {
            count: v.len() as u64,
            mean_us: mean,
            p50_us: percentile(&v, 50.0),
            p90_us: percentile(&v, 90.0),
            p99_us: percentile(&v, 99.0),
        }
    }
}

pub struct SchedSim {
    pub config: SchedConfig,
    queues: BTreeMap<u32, QueueDescriptor>,
    launches: Vec<KernelLaunch>,
    policies: Vec<Box<dyn SchedPolicy>>,
    slots: BTreeMap<Hook, usize>,
    now: u64,
    round: Vec<u32>,
    pos: usize,
    current: Option<Running>,
    last_queue: Option<u32>,
    preempt_at: Option<u64>,
    events: Vec<SchedEvent>,
    pub log: EventLog,
    pub stats: SchedStats,
}

impl SchedSim {
    pub fn new(config: SchedConfig) -> Result<SchedSim, SchedError> {
        config.default_attrs.validate()?;
        if config.tick_us == 0 {
            return Err(SchedError::Attrs("tick_us must be positive".into()));
        }
        Ok(SchedSim {
            config,
            queues: BTreeMap::new(),
            launches: Vec::new(),
            policies: Vec::new(),
            slots: BTreeMap::new(),
            now: 0,
            round: Vec::new(),
            pos: 0,
            current: None,
            last_queue: None,
            preempt_at: None,
            events: Vec::new(),
            log: EventLog::new(),
            stats: SchedStats::default(),
        })
    }

    pub fn attach(&mut self, policy: Box<dyn SchedPolicy>) -> Result<(), SchedError> {
        let hooks = policy.hooks();
        for &h in &hooks {
            if h.program_type() != ProgramType::GpuSched {
                return Err(SchedError::NotSchedHook(h));
            }
            if self.slots.contains_key(&h) {
                return Err(SchedError::SlotTaken(h));
            }
        }
        let idx = self.policies.len();
        self.policies.push(policy);
        for h in hooks {
            self.slots.insert(h, idx);
        }
        Ok(())
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn queue(&self, id: u32) -> Result<&QueueDescriptor, SchedError> {
        self.queues.get(&id).ok_or(SchedError::UnknownQueue(id))
    }

    pub fn queues(&self) -> impl Iterator<Item = &QueueDescriptor> {
        self.queues.values()
    }

    pub fn launches(&self) -> &[KernelLaunch] {
        &self.launches
    }

    /// Queue currently holding the engine.
    pub fn running(&self) -> Option<u32> {
        self.current.map(|r| r.queue)
    }

    fn emit(&mut self, kind: SchedEventKind, queue: u32, launch: Option<u32>) {
        let tenant = self.queues.get(&queue).map(|q| q.tenant);
        self.log.push(self.now, "sched", kind.name(), Some(queue as u64), launch.map(u64::from), tenant, "", 0);
        self.events.push(SchedEvent { time: self.now, kind, queue, launch });
    }

    fn apply_preempts(&mut self, targets: Vec<u32>) {
        for q in targets {
            if let Err(e) = self.preempt_now(q) {
                log::debug!("policy preempt of {q}: {e}");
                self.stats.violations += 1;
            }
        }
    }

    /// Create a queue, running the task_init handler before it can be scheduled.
    pub fn queue_create(&mut self, tenant: u32, class: TenantClass, requested: QueueAttrs, time: u64) -> Result<Admission, SchedError> {
        requested.validate()?;
        self.run_until(time);
        let id = self.queues.len() as u32;
        let tenant_queues = self.queues.values().filter(|q| q.tenant == tenant && q.state == QueueState::Active).count();
        let mut attrs = requested;
        let mut rejected = false;
        let mut retry = 0;
        let mut preempts = Vec::new();
        if let Some(&i) = self.slots.get(&Hook::TaskInit) {
            let mut ctx = context_schema(Hook::TaskInit).new_context();
            ctx.set("queue_id", id as u64)
                .set("tenant", tenant as u64)
                .set("tenant_class", class.code())
                .set("priority", requested.priority)
                .set("timeslice_us", requested.timeslice_us)
                .set("interleave", requested.interleave)
                .set("time_ns", self.now * 1000)
                .set("tenant_queues", tenant_queues as u64);
            let running = self.running();
            let mut k = SchedKfuncs { attrs: Some(&mut attrs), rejected: false, preempt: Vec::new(), queues: &self.queues, running };
            let res = self.policies[i].invoke(Hook::TaskInit, &mut ctx, &mut k);
            let (was_rejected, p) = (k.rejected, std::mem::take(&mut k.preempt));
            self.stats.hook_calls += 1;
            match res {
                Ok(ret) => {
                    rejected = was_rejected || ret < 0;
                    retry = ctx.decision();
                    preempts = p;
                }
                Err(f) => {
                    log::debug!("task_init handler fault: {f}");
                    self.stats.violations += 1;
                    attrs = requested;
                }
            }
        }
        let state = if rejected { QueueState::Rejected } else { QueueState::Active };
        self.queues.insert(id, QueueDescriptor { id, tenant, class, attrs, pending: VecDeque::new(), state });
        let outcome = if rejected { "REJECTED" } else { "ACTIVE" };
        self.log.push(self.now, "sched", "QUEUE_CREATE", Some(id as u64), None, Some(tenant), outcome, 0);
        self.apply_preempts(preempts);
        Ok(if rejected { Admission::Rejected { queue: id, retry_after_us: retry } } else { Admission::Accepted(id) })
    }

    /// Destroy a queue; its pending launches are cancelled.
    pub fn queue_destroy(&mut self, id: u32, time: u64) -> Result<u64, SchedError> {
        self.run_until(time);
        let q = self.queues.get(&id).ok_or(SchedError::UnknownQueue(id))?;
        if q.state == QueueState::Destroyed {
            return Err(SchedError::Destroyed(id));
        }
        let pending = q.pending.len() as u64;
        if let Some(&i) = self.slots.get(&Hook::TaskDestroy) {
            let mut ctx = context_schema(Hook::TaskDestroy).new_context();
            ctx.set("queue_id", id as u64)
                .set("tenant", q.tenant as u64)
                .set("tenant_class", q.class.code())
                .set("pending", pending)
                .set("time_ns", self.now * 1000);
            let running = self.running();
            let mut k = SchedKfuncs { attrs: None, rejected: false, preempt: Vec::new(), queues: &self.queues, running };
            let res = self.policies[i].invoke(Hook::TaskDestroy, &mut ctx, &mut k);
            let p = std::mem::take(&mut k.preempt);
            self.stats.hook_calls += 1;
            match res {
                Ok(_) => self.apply_preempts(p),
                Err(f) => {
                    log::debug!("task_destroy handler fault: {f}");
                    self.stats.violations += 1;
                }
            }
        }
        let q = self.queues.get_mut(&id).expect("checked above");
        q.state = QueueState::Destroyed;
        let cancelled: Vec<u32> = q.pending.drain(..).collect();
        for l in &cancelled {
            self.launches[*l as usize].cancelled = true;
            self.emit(SchedEventKind::Cancel, id, Some(*l));
        }
        self.stats.cancelled += pending;
        if self.running() == Some(id) {
            self.current = None;
            self.preempt_at = None;
        }
        self.log.push(self.now, "sched", "QUEUE_DESTROY", Some(id as u64), None, None, "", pending);
        Ok(pending)
    }

    /// Enqueue a kernel launch of `work_us` on `queue` at `time`.
    pub fn submit(&mut self, queue: u32, work_us: u64, time: u64) -> Result<u32, SchedError> {
        self.run_until(time);
        let q = self.queues.get_mut(&queue).ok_or(SchedError::UnknownQueue(queue))?;
        match q.state {
            QueueState::Active => {}
            QueueState::Rejected => return Err(SchedError::Rejected(queue)),
            QueueState::Destroyed => return Err(SchedError::Destroyed(queue)),
        }
        let id = self.launches.len() as u32;
        q.pending.push_back(id);
        let class = q.class;
        self.launches.push(KernelLaunch {
            id,
            queue,
            class,
            submit_us: self.now,
            start_us: None,
            end_us: None,
            work_us,
            remaining_us: work_us,
            cancelled: false,
        });
        self.log.push(self.now, "sched", "SUBMIT", Some(queue as u64), Some(id as u64), None, class.name(), 0);
        let mut preempts = Vec::new();
        let running = self.running();
        let qd = self.queues[&queue].clone();
        for p in &mut self.policies {
            let mut k = SchedKfuncs { attrs: None, rejected: false, preempt: Vec::new(), queues: &self.queues, running };
            if let Err(f) = p.on_submit(&qd, &mut k) {
                log::debug!("policy tick fault: {f}");
                self.stats.violations += 1;
            }
            preempts.extend(k.preempt);
        }
        self.apply_preempts(preempts);
        Ok(id)
    }

    /// kfunc_preempt: forfeit the running queue's slice at the next tick.
    pub fn preempt(&mut self, queue: u32, time: u64) -> Result<(), SchedError> {
        self.run_until(time);
        self.preempt_now(queue)
    }

    fn preempt_now(&mut self, queue: u32) -> Result<(), SchedError> {
        if !self.queues.contains_key(&queue) {
            return Err(SchedError::UnknownQueue(queue));
        }
        if self.running() == Some(queue) {
            let tick = self.config.tick_us;
            self.preempt_at = Some((self.now / tick + 1) * tick);
        } else {
            self.emit(SchedEventKind::PreemptNoop, queue, None);
        }
        Ok(())
    }

    /// Run the engine for `dt_us` and return the events produced.
    pub fn advance(&mut self, dt_us: u64) -> Result<Vec<SchedEvent>, SchedError> {
        if dt_us == 0 {
            return Err(SchedError::ZeroAdvance);
        }
        self.run_until(self.now + dt_us);
        Ok(std::mem::take(&mut self.events))
    }

    /// Events produced since the last call.
    pub fn take_events(&mut self) -> Vec<SchedEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn has_pending(&self) -> bool {
        self.queues.values().any(|q| q.state == QueueState::Active && !q.pending.is_empty())
    }

    /// Run until every active queue is empty.
    pub fn drain(&mut self) {
        while self.has_pending() {
            let work: u64 = self
                .queues
                .values()
                .flat_map(|q| q.pending.iter())
                .map(|l| self.launches[*l as usize].remaining_us)
                .sum();
            self.run_until(self.now + work.max(1));
        }
    }

    fn rebuild_round(&mut self) {
        let mut active: Vec<&QueueDescriptor> = self.queues.values().filter(|q| q.state == QueueState::Active).collect();
        active.sort_by_key(|q| (q.attrs.priority, q.id));
        let reps = active.iter().map(|q| q.attrs.interleave).max().unwrap_or(0);
        self.round.clear();
        for rep in 0..reps {
            for q in &active {
                if q.attrs.interleave > rep {
                    self.round.push(q.id);
                }
            }
        }
        self.pos = 0;
    }

    fn runnable(&self, q: u32) -> bool {
        self.queues.get(&q).is_some_and(|q| q.state == QueueState::Active && !q.pending.is_empty())
    }

    fn select_next(&mut self) -> bool {
        for _ in 0..2 {
            while self.pos < self.round.len() {
                let q = self.round[self.pos];
                self.pos += 1;
                if self.runnable(q) {
                    let switch = match self.last_queue {
                        Some(last) if last != q => self.config.switch_us,
                        _ => 0,
                    };
                    if switch > 0 {
                        self.stats.switches += 1;
                        self.emit(SchedEventKind::Switch, q, None);
                    }
                    let ready_at = self.now + switch;
                    let ts = self.queues[&q].attrs.timeslice_us;
                    self.current = Some(Running { queue: q, ready_at, slice_end: ready_at + ts });
                    self.last_queue = Some(q);
                    return true;
                }
            }
            self.rebuild_round();
        }
        // engine goes idle; the next start pays no switch
        self.last_queue = None;
        false
    }

    fn rotate(&mut self) {
        self.current = None;
        self.preempt_at = None;
    }

    fn run_until(&mut self, target: u64) {
        loop {
            // arrivals at `target` are enqueued before the next selection
            if self.now >= target {
                return;
            }
            if self.current.is_none() && !self.select_next() {
                self.now = target;
                return;
            }
            let r = self.current.expect("selected above");
            if self.now < r.ready_at {
                self.now = r.ready_at.min(target);
                continue;
            }
            let Some(&lid) = self.queues[&r.queue].pending.front() else {
                self.rotate();
                continue;
            };
            if self.launches[lid as usize].start_us.is_none() {
                self.launches[lid as usize].start_us = Some(self.now);
                self.emit(SchedEventKind::Start, r.queue, Some(lid));
            }
            let remaining = self.launches[lid as usize].remaining_us;
            let mut stop = (self.now + remaining).min(r.slice_end).min(target);
            if let Some(p) = self.preempt_at {
                stop = stop.min(p.max(self.now));
            }
            self.launches[lid as usize].remaining_us -= stop - self.now;
            self.now = stop;
            if self.launches[lid as usize].remaining_us == 0 {
                self.launches[lid as usize].end_us = Some(self.now);
                self.queues.get_mut(&r.queue).expect("running queue exists").pending.pop_front();
                self.emit(SchedEventKind::Complete, r.queue, Some(lid));
                if self.queues[&r.queue].pending.is_empty() {
                    self.rotate();
                }
                continue;
            }
            if self.preempt_at == Some(self.now) {
                self.stats.preemptions += 1;
                self.emit(SchedEventKind::Preempt, r.queue, Some(lid));
                self.rotate();
                // a fresh round with the preempted queue last
                self.rebuild_round();
                let (mut rest, mine): (Vec<u32>, Vec<u32>) = self.round.iter().partition(|&&q| q != r.queue);
                rest.extend(mine);
                self.round = rest;
                continue;
            }
            if self.now == r.slice_end {
                self.emit(SchedEventKind::SliceEnd, r.queue, Some(lid));
                self.rotate();
            }
        }
    }

    /// Launch latency of completed-or-started launches, by class.
    pub fn latencies(&self, class: TenantClass) -> Vec<u64> {
        self.launches.iter().filter(|l| l.class == class).filter_map(|l| l.latency_us()).collect()
    }

    pub fn queue_latencies(&self, queue: u32) -> Vec<u64> {
        self.launches.iter().filter(|l| l.queue == queue).filter_map(|l| l.latency_us()).collect()
    }

    /// Completed work of `class` per µs between its first submission and last completion.
    pub fn throughput(&self, class: TenantClass) -> f64 {
        let done: Vec<&KernelLaunch> = self.launches.iter().filter(|l| l.class == class && l.end_us.is_some()).collect();
        let Some(first) = done.iter().map(|l| l.submit_us).min() else { return 0.0 };
        let last = done.iter().filter_map(|l| l.end_us).max().unwrap_or(first);
        let work: u64 = done.iter().map(|l| l.work_us).sum();
        if last == first {
            0.0
        } else {
            work as f64 / (last - first) as f64
        }
    }
}
