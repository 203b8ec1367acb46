//! Device-side hook execution.
//!
//! [`ExecMode::PerLane`] interprets the handler once per active lane in
//! lockstep; it is the reference. [`ExecMode::WarpLeader`] runs a
//! contribution pass over the lanes, aggregates, and interprets the handler
//! once on the lowest active lane, broadcasting its result.
//!
//! In both modes map lookups observe the maps as they were when the hook was
//! entered, and map updates are applied when the invocation finishes.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::ir::helpers::{self, ids, AggOp, HelperKind};
use crate::ir::interp::{resolve_helper, Machine, Step};
use crate::ir::schema::{write_le, Uniformity};
use crate::ir::{context_schema, ContextSchema, Domain, Effect, ExecError, ExecLimits, Hook, LocalMaps, PolicyProgram};
use crate::xmaps::{MapRegistry, Origin, ReadDomain};

pub const WARP_SIZE: usize = 32;
/// Modelled cost of interpreting one instruction.
pub const NS_PER_INSN: u64 = 40;
/// Modelled cost of one warp aggregation.
pub const AGGREGATION_NS: u64 = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DeviceError {
    #[error("handler for {0} has not been verified")]
    NotVerified(Hook),
    #[error("handler is bound to {handler} but the context is for {ctx}")]
    SchemaMismatch { handler: Hook, ctx: Hook },
    #[error("{0} is not a device hook")]
    NotDevice(Hook),
    #[error("hook invoked with an empty active mask")]
    EmptyMask,
    #[error("field {0} is not a {1:?} field of this hook")]
    Field(String, Uniformity),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("unknown hook point `{0}`")]
    UnknownHookPoint(String),
    #[error("kernel spec line {line}: {msg}")]
    KernelSpec { line: usize, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum ExecMode {
    PerLane,
    WarpLeader,
}

/// Snapshot of one warp at a hook point.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WarpContext {
    pub hook: Hook,
    pub warp_id: u32,
    pub sm_id: u32,
    pub active_mask: u32,
    uniform: BTreeMap<&'static str, u64>,
    lanes: BTreeMap<&'static str, [u64; WARP_SIZE]>,
}

impl WarpContext {
    pub fn new(hook: Hook, sm_id: u32, warp_id: u32, active_mask: u32) -> Self {
        WarpContext { hook, warp_id, sm_id, active_mask, uniform: BTreeMap::new(), lanes: BTreeMap::new() }
    }

    fn field(&self, name: &str, want: Uniformity) -> Result<&'static str, DeviceError> {
        let schema = context_schema(self.hook);
        match schema.field(name) {
            Some(f) if f.uniformity == want && f.name != "decision" => Ok(f.name),
            _ => Err(DeviceError::Field(name.to_string(), want)),
        }
    }

    pub fn set_uniform(&mut self, name: &str, value: u64) -> Result<&mut Self, DeviceError> {
        let n = self.field(name, Uniformity::Uniform)?;
        self.uniform.insert(n, value);
        Ok(self)
    }

    pub fn set_lanes(&mut self, name: &str, values: [u64; WARP_SIZE]) -> Result<&mut Self, DeviceError> {
        let n = self.field(name, Uniformity::LaneVarying)?;
        self.lanes.insert(n, values);
        Ok(self)
    }

    pub fn uniform(&self, name: &str) -> u64 {
        self.uniform.get(name).copied().unwrap_or(0)
    }

    pub fn lane_value(&self, name: &str, lane: usize) -> u64 {
        self.lanes.get(name).map_or(0, |v| v[lane])
    }

    pub fn active_lanes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..WARP_SIZE).filter(|l| self.active_mask & (1 << l) != 0)
    }

    pub fn leader(&self) -> Option<usize> {
        leader_lane(self.active_mask)
    }

    /// Context bytes seen by `lane`.
    pub fn lane_bytes(&self, schema: &ContextSchema, lane: usize) -> Vec<u8> {
        let mut bytes = vec![0u8; schema.size()];
        for f in &schema.fields {
            let v = match f.name {
                "warp_id" => self.warp_id as u64,
                "sm_id" => self.sm_id as u64,
                "active_lanes" => self.active_mask as u64,
                "lane_id" => lane as u64,
                name if f.uniformity == Uniformity::Uniform => self.uniform(name),
                name => self.lane_value(name, lane),
            };
            write_le(&mut bytes[f.offset as usize..f.end()], v);
        }
        bytes
    }
}

/// Lowest set lane of a mask.
pub fn leader_lane(mask: u32) -> Option<usize> {
    (mask != 0).then(|| mask.trailing_zeros() as usize)
}

/// Reduction over the active lanes of `mask`.
pub fn aggregate(vals: &[u64; WARP_SIZE], mask: u32, op: AggOp) -> u64 {
    let active = (0..WARP_SIZE).filter(|l| mask & (1 << l) != 0).map(|l| (l, vals[l]));
    match op {
        AggOp::Sum => active.fold(0u64, |a, (_, v)| a.wrapping_add(v)),
        AggOp::Min => active.map(|(_, v)| v).min().unwrap_or(0),
        AggOp::Max => active.map(|(_, v)| v).max().unwrap_or(0),
        AggOp::Ballot => active.filter(|(_, v)| *v != 0).fold(0u64, |a, (l, _)| a | (1 << l)),
    }
}

/// Maps as seen from one warp.
pub trait WarpMaps {
    fn lookup(&mut self, map: u64, key: u64) -> Result<u64, ExecError>;
    fn update(&mut self, map: u64, key: u64, delta: u64) -> Result<(), ExecError>;
    fn now_ns(&self) -> u64 {
        0
    }
}

impl WarpMaps for LocalMaps {
    fn lookup(&mut self, map: u64, key: u64) -> Result<u64, ExecError> {
        crate::ir::HelperEnv::map_lookup(self, map, key)
    }

    fn update(&mut self, map: u64, key: u64, delta: u64) -> Result<(), ExecError> {
        crate::ir::HelperEnv::map_update(self, map, key, delta)
    }

    fn now_ns(&self) -> u64 {
        self.now_ns
    }
}

/// A program's declared maps bound to registry ids, for one warp.
pub struct RegistryMaps<'a> {
    pub registry: &'a mut MapRegistry,
    pub ids: &'a [u32],
    pub sm: u32,
    pub warp: u32,
    pub now_ns: u64,
}

impl RegistryMaps<'_> {
    fn id(&self, map: u64) -> Result<u32, ExecError> {
        self.ids.get(map as usize).copied().ok_or(ExecError::BadMap(map))
    }
}

impl WarpMaps for RegistryMaps<'_> {
    fn lookup(&mut self, map: u64, key: u64) -> Result<u64, ExecError> {
        let id = self.id(map)?;
        self.registry
            .lookup(id, key, ReadDomain::Device { sm: self.sm })
            .map(|(v, _)| v)
            .map_err(|e| ExecError::Aborted(e.to_string()))
    }

    fn update(&mut self, map: u64, key: u64, delta: u64) -> Result<(), ExecError> {
        let id = self.id(map)?;
        self.registry
            .update(id, key, delta, Origin::Warp { sm: self.sm, warp: self.warp })
            .map_err(|e| match e {
                crate::xmaps::XmapError::KeyRange { key, .. } => ExecError::KeyRange { map, key },
                e => ExecError::Aborted(e.to_string()),
            })
    }

    fn now_ns(&self) -> u64 {
        self.now_ns
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct HookResult {
    pub ret: i64,
    pub decision: u64,
    /// Decision as observed by each active lane, in lane order.
    pub lane_decisions: Vec<(usize, u64)>,
    pub effects: Vec<Effect>,
    pub cost_ns: u64,
    /// Instructions interpreted, summed over every interpretation.
    pub insns: u64,
    pub leader: usize,
}

/// Map updates staged during one invocation.
type Staged = Vec<(u64, u64, u64)>;

struct Lane<'p> {
    lane: usize,
    m: Machine<'p>,
    ctx: Vec<u8>,
    effects: Vec<Effect>,
    done: Option<u64>,
}

/// Per-call-site values gathered in the contribution pass.
#[derive(Default)]
struct Contributions {
    /// k-th map update: (map, key of the leader, per-lane deltas)
    updates: Vec<(u64, u64, [u64; WARP_SIZE])>,
    /// k-th collective result
    collectives: Vec<u64>,
}

fn check_handler(handler: &PolicyProgram, ctx: &WarpContext) -> Result<(), DeviceError> {
    if handler.hook.domain() != Domain::Device {
        return Err(DeviceError::NotDevice(handler.hook));
    }
    if handler.hook != ctx.hook {
        return Err(DeviceError::SchemaMismatch { handler: handler.hook, ctx: ctx.hook });
    }
    if !handler.is_verified() {
        return Err(DeviceError::NotVerified(handler.hook));
    }
    if ctx.active_mask == 0 {
        return Err(DeviceError::EmptyMask);
    }
    Ok(())
}

/// Run every active lane in lockstep. With `record` the per-lane update
/// deltas and collective results are captured and nothing is staged.
fn lockstep<'p>(
    handler: &'p PolicyProgram,
    ctx: &WarpContext,
    maps: &mut dyn WarpMaps,
    staged: &mut Staged,
    mut record: Option<&mut Contributions>,
) -> Result<Vec<Lane<'p>>, DeviceError> {
    let schema = context_schema(handler.hook);
    let mut lanes: Vec<Lane<'p>> = ctx
        .active_lanes()
        .map(|lane| Lane {
            lane,
            m: Machine::new(handler, ExecLimits::default()),
            ctx: ctx.lane_bytes(&schema, lane),
            effects: Vec::new(),
            done: None,
        })
        .collect();
    let now = maps.now_ns();
    loop {
        let pc = lanes[0].m.pc;
        if lanes.iter().any(|l| l.m.pc != pc || l.done.is_some() != lanes[0].done.is_some()) {
            return Err(ExecError::Divergence { pc }.into());
        }
        if lanes[0].done.is_some() {
            return Ok(lanes);
        }
        let mut steps = Vec::with_capacity(lanes.len());
        for l in lanes.iter_mut() {
            steps.push(l.m.step(&mut l.ctx, &mut l.effects)?);
        }
        match steps[0] {
            Step::Call { helper, .. } => {
                let spec = resolve_helper(handler, pc, helper)?;
                let args: Vec<[u64; 5]> = steps
                    .iter()
                    .map(|s| match s {
                        Step::Call { args, helper: h } if *h == helper => Ok(*args),
                        _ => Err(ExecError::Divergence { pc }),
                    })
                    .collect::<Result<_, _>>()?;
                let rets = call_lanes(spec, &lanes, &args, ctx.active_mask, now, maps, staged, record.as_deref_mut())?;
                for ((l, a), r) in lanes.iter_mut().zip(&args).zip(rets) {
                    if record.is_none() {
                        l.effects.push(Effect::Call { helper, args: [a[0], a[1], a[2]], ret: r });
                    }
                    l.m.finish_call(r);
                }
            }
            Step::Exit(_) => {
                for (l, s) in lanes.iter_mut().zip(&steps) {
                    if let Step::Exit(r) = s {
                        l.done = Some(*r);
                    }
                }
            }
            _ => {}
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn call_lanes(
    spec: &helpers::HelperSpec,
    lanes: &[Lane<'_>],
    args: &[[u64; 5]],
    mask: u32,
    now: u64,
    maps: &mut dyn WarpMaps,
    staged: &mut Staged,
    record: Option<&mut Contributions>,
) -> Result<Vec<u64>, ExecError> {
    let n = lanes.len();
    Ok(match spec.kind {
        HelperKind::WarpReduce(op) => {
            let mut vals = [0u64; WARP_SIZE];
            for (l, a) in lanes.iter().zip(args) {
                vals[l.lane] = a[0];
            }
            let v = aggregate(&vals, mask, op);
            if let Some(rec) = record {
                rec.collectives.push(v);
            }
            vec![v; n]
        }
        HelperKind::MapLookup => args.iter().map(|a| maps.lookup(a[0], a[1])).collect::<Result<_, _>>()?,
        HelperKind::MapUpdate => {
            match record {
                Some(rec) => {
                    let mut deltas = [0u64; WARP_SIZE];
                    for (l, a) in lanes.iter().zip(args) {
                        deltas[l.lane] = a[2];
                    }
                    rec.updates.push((args[0][0], args[0][1], deltas));
                }
                None => staged.extend(args.iter().map(|a| (a[0], a[1], a[2]))),
            }
            vec![0; n]
        }
        _ => lanes
            .iter()
            .map(|l| match spec.id {
                ids::KTIME_GET_NS => now,
                ids::GET_LANE_ID => l.lane as u64,
                _ => 0,
            })
            .collect(),
    })
}

fn apply(maps: &mut dyn WarpMaps, staged: Staged) -> Result<(), ExecError> {
    for (m, k, d) in staged {
        maps.update(m, k, d)?;
    }
    Ok(())
}

fn decision_of(handler: &PolicyProgram, bytes: &[u8]) -> u64 {
    let f = *context_schema(handler.hook).decision();
    crate::ir::schema::read_le(&bytes[f.offset as usize..f.end()])
}

fn per_lane(handler: &PolicyProgram, ctx: &WarpContext, maps: &mut dyn WarpMaps) -> Result<HookResult, DeviceError> {
    let mut staged = Vec::new();
    let lanes = lockstep(handler, ctx, maps, &mut staged, None)?;
    apply(maps, staged)?;
    let lane_decisions: Vec<(usize, u64)> = lanes.iter().map(|l| (l.lane, decision_of(handler, &l.ctx))).collect();
    let insns: u64 = lanes.iter().map(|l| l.m.insns).sum();
    Ok(HookResult {
        ret: lanes[0].done.unwrap_or(0) as i64,
        decision: lane_decisions[0].1,
        lane_decisions,
        effects: lanes.into_iter().flat_map(|l| l.effects).collect(),
        cost_ns: insns * NS_PER_INSN,
        insns,
        leader: leader_lane(ctx.active_mask).unwrap_or(0),
    })
}

fn warp_leader(handler: &PolicyProgram, ctx: &WarpContext, maps: &mut dyn WarpMaps) -> Result<HookResult, DeviceError> {
    // phase 1: lane-local contributions
    let mut contrib = Contributions::default();
    lockstep(handler, ctx, maps, &mut Vec::new(), Some(&mut contrib))?;

    // phase 2: aggregate each update's per-lane deltas
    let agg: Vec<(u64, u64, u64)> = contrib
        .updates
        .iter()
        .map(|(m, k, deltas)| (*m, *k, aggregate(deltas, ctx.active_mask, handler.aggregation)))
        .collect();

    // phase 3: the leader runs once, consuming aggregated values in order
    let leader = ctx.leader().ok_or(DeviceError::EmptyMask)?;
    let schema = context_schema(handler.hook);
    let mut bytes = ctx.lane_bytes(&schema, leader);
    let mut m = Machine::new(handler, ExecLimits::default());
    let mut effects = Vec::new();
    let mut staged = Vec::new();
    let (mut nu, mut nc) = (0usize, 0usize);
    let now = maps.now_ns();
    let ret = loop {
        match m.step(&mut bytes, &mut effects)? {
            Step::Call { helper, args } => {
                let spec = resolve_helper(handler, m.pc, helper)?;
                let (ret, shown) = match spec.kind {
                    HelperKind::WarpReduce(_) => {
                        let v = *contrib.collectives.get(nc).ok_or(ExecError::Divergence { pc: m.pc })?;
                        nc += 1;
                        (v, args)
                    }
                    HelperKind::MapUpdate => {
                        let (mm, k, d) = *agg.get(nu).ok_or(ExecError::Divergence { pc: m.pc })?;
                        nu += 1;
                        staged.push((mm, k, d));
                        (0, [mm, k, d, args[3], args[4]])
                    }
                    HelperKind::MapLookup => (maps.lookup(args[0], args[1])?, args),
                    _ => match spec.id {
                        ids::KTIME_GET_NS => (now, args),
                        ids::GET_LANE_ID => (leader as u64, args),
                        _ => (0, args),
                    },
                };
                effects.push(Effect::Call { helper, args: [shown[0], shown[1], shown[2]], ret });
                m.finish_call(ret);
            }
            Step::Exit(r) => break r,
            _ => {}
        }
    };
    apply(maps, staged)?;

    // phase 4: broadcast
    let decision = decision_of(handler, &bytes);
    let lane_decisions = ctx.active_lanes().map(|l| (l, decision)).collect();
    Ok(HookResult {
        ret: ret as i64,
        decision,
        lane_decisions,
        effects,
        cost_ns: m.insns * NS_PER_INSN + AGGREGATION_NS,
        insns: m.insns,
        leader,
    })
}

/// Execute a verified device handler for one warp.
pub fn run_hook(
    handler: &PolicyProgram,
    ctx: &WarpContext,
    maps: &mut dyn WarpMaps,
    mode: ExecMode,
) -> Result<HookResult, DeviceError> {
    check_handler(handler, ctx)?;
    match mode {
        ExecMode::PerLane => per_lane(handler, ctx, maps),
        ExecMode::WarpLeader => warp_leader(handler, ctx, maps),
    }
}

/// Branch outcomes of each active lane, in program order, for checking that a
/// handler's control flow is warp-uniform. Lanes run independently, so
/// divergence shows up as differing traces rather than an error.
pub fn lane_branch_traces(
    handler: &PolicyProgram,
    ctx: &WarpContext,
    maps: &LocalMaps,
) -> Result<Vec<Vec<(usize, bool)>>, DeviceError> {
    let schema = context_schema(handler.hook);
    let mut traces = Vec::new();
    // collectives need every lane's argument, so run lockstep but tolerate divergence
    let mut ms: Vec<(usize, Machine<'_>, Vec<u8>, Vec<(usize, bool)>, bool)> = ctx
        .active_lanes()
        .map(|l| (l, Machine::new(handler, ExecLimits::default()), ctx.lane_bytes(&schema, l), Vec::new(), false))
        .collect();
    let mut snapshot = maps.clone();
    let mut sink = Vec::new();
    while ms.iter().any(|m| !m.4) {
        let mut pending: Vec<(usize, u32, [u64; 5])> = Vec::new();
        for (i, (_, m, bytes, trace, done)) in ms.iter_mut().enumerate() {
            if *done {
                continue;
            }
            let pc = m.pc;
            match m.step(bytes, &mut sink)? {
                Step::Branch { taken } => trace.push((pc, taken)),
                Step::Call { helper, args } => pending.push((i, helper, args)),
                Step::Exit(_) => *done = true,
                Step::Next => {}
            }
            sink.clear();
        }
        // lanes that reached a call together share collectives
        let mut by_helper: BTreeMap<(usize, u32), Vec<(usize, [u64; 5])>> = BTreeMap::new();
        for (i, h, a) in pending {
            by_helper.entry((ms[i].1.pc, h)).or_default().push((i, a));
        }
        for ((_, h), group) in by_helper {
            let spec = helpers::helper(h).ok_or(ExecError::UnknownHelper { pc: 0, id: h })?;
            let mut vals = [0u64; WARP_SIZE];
            let mut mask = 0u32;
            for (i, a) in &group {
                vals[ms[*i].0] = a[0];
                mask |= 1 << ms[*i].0;
            }
            for (i, a) in group {
                let r = match spec.kind {
                    HelperKind::WarpReduce(op) => aggregate(&vals, mask, op),
                    HelperKind::MapLookup => crate::ir::HelperEnv::map_lookup(&mut snapshot, a[0], a[1]).unwrap_or(0),
                    _ if h == ids::GET_LANE_ID => ms[i].0 as u64,
                    _ if h == ids::KTIME_GET_NS => maps.now_ns,
                    _ => 0,
                };
                ms[i].1.finish_call(r);
            }
        }
    }
    for (_, _, _, trace, _) in ms {
        traces.push(trace);
    }
    Ok(traces)
}

// ---------------------------------------------------------------------------
// Kernel specs and instrumentation

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum KernelOp {
    Compute,
    /// Lane `l` in repetition `i` touches `base + l * lane_stride + i * iter_stride`.
    Load { base: u64, lane_stride: u64, iter_stride: u64 },
    Fence,
}

/// One line of a kernel spec: an op and its repeat count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct KernelLine {
    pub op: KernelOp,
    pub repeat: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct KernelSpec {
    pub lines: Vec<KernelLine>,
}

impl KernelSpec {
    /// Parse `<COMPUTE|LOAD|FENCE> [key=value ...] [xN]` lines.
    pub fn parse(text: &str) -> Result<KernelSpec, DeviceError> {
        let mut lines = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let t = raw.split('#').next().unwrap_or("").trim();
            if t.is_empty() {
                continue;
            }
            let err = |msg: String| DeviceError::KernelSpec { line, msg };
            let mut words = t.split_whitespace();
            let kind = words.next().unwrap_or("");
            let mut repeat = 1u32;
            let mut kv = BTreeMap::new();
            for w in words {
                if let Some(n) = w.strip_prefix('x') {
                    repeat = n.parse().map_err(|_| err(format!("bad repeat `{w}`")))?;
                } else if let Some((k, v)) = w.split_once('=') {
                    kv.insert(k, parse_u64(v).ok_or_else(|| err(format!("bad value `{v}`")))?);
                } else {
                    return Err(err(format!("unexpected `{w}`")));
                }
            }
            let op = match kind {
                "COMPUTE" => KernelOp::Compute,
                "FENCE" => KernelOp::Fence,
                "LOAD" => KernelOp::Load {
                    base: kv.remove("base").unwrap_or(0),
                    lane_stride: kv.remove("lane_stride").unwrap_or(4),
                    iter_stride: kv.remove("iter_stride").unwrap_or(128),
                },
                other => return Err(err(format!("unknown op `{other}`"))),
            };
            if let Some(k) = kv.keys().next() {
                return Err(err(format!("unknown key `{k}`")));
            }
            if repeat == 0 {
                return Err(err("repeat must be positive".into()));
            }
            lines.push(KernelLine { op, repeat });
        }
        Ok(KernelSpec { lines })
    }

    /// Expanded op stream, with each op's repetition index.
    pub fn ops(&self) -> Vec<(KernelOp, u32)> {
        self.lines.iter().flat_map(|l| (0..l.repeat).map(move |i| (l.op, i))).collect()
    }
}

fn parse_u64(s: &str) -> Option<u64> {
    match s.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16).ok(),
        None => s.parse().ok(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum HookPoint {
    Entry,
    MemInstruction,
    Fence,
}

impl HookPoint {
    pub fn parse(s: &str) -> Result<HookPoint, DeviceError> {
        match s {
            "entry" => Ok(HookPoint::Entry),
            "mem_instruction" | "mem" => Ok(HookPoint::MemInstruction),
            "fence" | "phase_boundary" => Ok(HookPoint::Fence),
            _ => Err(DeviceError::UnknownHookPoint(s.to_string())),
        }
    }

    pub fn hook(self) -> Hook {
        match self {
            HookPoint::Entry => Hook::Enter,
            HookPoint::MemInstruction => Hook::Access,
            HookPoint::Fence => Hook::Fence,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum KernelStep {
    Op { op: KernelOp, iter: u32 },
    Hook { point: HookPoint, op_index: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct InstrumentedKernel {
    pub steps: Vec<KernelStep>,
}

impl InstrumentedKernel {
    pub fn hook_calls(&self, point: HookPoint) -> usize {
        self.steps.iter().filter(|s| matches!(s, KernelStep::Hook { point: p, .. } if *p == point)).count()
    }

    pub fn ops(&self) -> impl Iterator<Item = (KernelOp, u32)> + '_ {
        self.steps.iter().filter_map(|s| match s {
            KernelStep::Op { op, iter } => Some((*op, *iter)),
            _ => None,
        })
    }
}

/// Insert hook invocations at the requested points, keeping op order.
pub fn instrument(spec: &KernelSpec, points: &[HookPoint]) -> InstrumentedKernel {
    let mut steps = Vec::new();
    for (i, (op, iter)) in spec.ops().into_iter().enumerate() {
        if i == 0 && points.contains(&HookPoint::Entry) {
            steps.push(KernelStep::Hook { point: HookPoint::Entry, op_index: 0 });
        }
        let point = match op {
            KernelOp::Load { .. } => Some(HookPoint::MemInstruction),
            KernelOp::Fence => Some(HookPoint::Fence),
            KernelOp::Compute => None,
        };
        if let Some(p) = point.filter(|p| points.contains(p)) {
            steps.push(KernelStep::Hook { point: p, op_index: i });
        }
        steps.push(KernelStep::Op { op, iter });
    }
    InstrumentedKernel { steps }
}

/// Geometry of a simulated launch: every SM runs `warps_per_sm` warps with
/// the same active mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Launch {
    pub sms: u32,
    pub warps_per_sm: u32,
    pub active_mask: u32,
    pub kernel_id: u64,
    pub block_id: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct KernelRun {
    pub hook_calls: u64,
    pub cost_ns: u64,
    /// Region ids requested through gdev_mem_prefetch, in issue order.
    pub prefetch_requests: Vec<u64>,
    pub effects: u64,
}

/// Attached device handlers plus the registry ids of their maps.
#[derive(Clone, Debug, Default)]
pub struct DeviceHandlers {
    pub handlers: BTreeMap<Hook, (PolicyProgram, Vec<u32>)>,
}

impl DeviceHandlers {
    pub fn attach(&mut self, prog: PolicyProgram, map_ids: Vec<u32>) -> Result<(), DeviceError> {
        if prog.hook.domain() != Domain::Device {
            return Err(DeviceError::NotDevice(prog.hook));
        }
        if !prog.is_verified() {
            return Err(DeviceError::NotVerified(prog.hook));
        }
        self.handlers.insert(prog.hook, (prog, map_ids));
        Ok(())
    }
}

/// Walk an instrumented kernel on every warp, invoking attached handlers, then
/// merge map shards at the kernel boundary.
pub fn run_kernel(
    kernel: &InstrumentedKernel,
    handlers: &DeviceHandlers,
    launch: Launch,
    registry: &mut MapRegistry,
    mode: ExecMode,
    start_ns: u64,
) -> Result<KernelRun, DeviceError> {
    let mut run = KernelRun::default();
    for sm in 0..launch.sms {
        for warp in 0..launch.warps_per_sm {
            let mut now = start_ns;
            for step in &kernel.steps {
                let KernelStep::Hook { point, op_index } = *step else {
                    now += 1000;
                    continue;
                };
                let Some((prog, ids)) = handlers.handlers.get(&point.hook()) else { continue };
                let mut ctx = WarpContext::new(prog.hook, sm, warp, launch.active_mask);
                let schema = context_schema(prog.hook);
                if schema.field("kernel_id").is_some() {
                    ctx.set_uniform("kernel_id", launch.kernel_id)?;
                    ctx.set_uniform("block_id", launch.block_id)?;
                }
                if schema.field("time_ns").is_some() {
                    ctx.set_uniform("time_ns", now)?;
                }
                if point == HookPoint::MemInstruction {
                    if let Some(KernelStep::Op { op: KernelOp::Load { base, lane_stride, iter_stride }, iter }) =
                        kernel.steps.iter().filter(|s| matches!(s, KernelStep::Op { .. })).nth(op_index)
                    {
                        let mut addrs = [0u64; WARP_SIZE];
                        for (l, a) in addrs.iter_mut().enumerate() {
                            *a = base + l as u64 * lane_stride + *iter as u64 * iter_stride;
                        }
                        ctx.set_lanes("lane_addr", addrs)?;
                        ctx.set_uniform("site", op_index as u64)?;
                    }
                }
                let mut maps = RegistryMaps { registry, ids, sm, warp, now_ns: now };
                let res = run_hook(prog, &ctx, &mut maps, mode)?;
                run.hook_calls += 1;
                run.cost_ns += res.cost_ns;
                run.effects += res.effects.len() as u64;
                for e in &res.effects {
                    if let Effect::Call { helper: ids::GDEV_MEM_PREFETCH, args, .. } = e {
                        run.prefetch_requests.push(args[0]);
                    }
                }
            }
        }
    }
    registry.merge_all();
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::assemble;
    use crate::verifier::verify_default;

    fn verified(src: &str) -> PolicyProgram {
        let mut p = assemble(src).unwrap();
        let r = verify_default(&mut p);
        assert!(r.accepted(), "{r}");
        p
    }

    const COUNTER: &str = ".hook access\n.map c hash global\nmov r1, 0\nmov r2, 0\nmov r3, 1\ncall map_update\nmov r0, 0\nexit";

    #[test]
    fn counter_handler_modes_agree() {
        let p = verified(COUNTER);
        let ctx = WarpContext::new(Hook::Access, 0, 0, u32::MAX);
        let mut a = LocalMaps::new(1);
        let mut b = LocalMaps::new(1);
        run_hook(&p, &ctx, &mut a, ExecMode::PerLane).unwrap();
        run_hook(&p, &ctx, &mut b, ExecMode::WarpLeader).unwrap();
        assert_eq!(a.get(0, 0), 32);
        assert_eq!(b.get(0, 0), 32);
    }

    #[test]
    fn single_lane_modes_identical() {
        let p = verified(COUNTER);
        let ctx = WarpContext::new(Hook::Access, 1, 3, 1 << 7);
        let mut a = LocalMaps::new(1);
        let mut b = LocalMaps::new(1);
        let x = run_hook(&p, &ctx, &mut a, ExecMode::PerLane).unwrap();
        let y = run_hook(&p, &ctx, &mut b, ExecMode::WarpLeader).unwrap();
        assert_eq!(x.effects, y.effects);
        assert_eq!(a, b);
    }

    #[test]
    fn leader_is_lowest_active_lane() {
        assert_eq!(leader_lane(0b1100), Some(2));
        assert_eq!(leader_lane(0), None);
        let p = verified(".hook access\ncall get_lane_id\nmov r1, r0\ncall warp_reduce_min\nexit");
        let ctx = WarpContext::new(Hook::Access, 0, 0, 0b1100);
        let r = run_hook(&p, &ctx, &mut LocalMaps::new(0), ExecMode::WarpLeader).unwrap();
        assert_eq!(r.leader, 2);
        assert_eq!(r.ret, 2);
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate(&[1; 32], u32::MAX, AggOp::Sum), 32);
        let addrs: [u64; 32] = std::array::from_fn(|l| 4096 * (l as u64 + 1));
        assert_eq!(aggregate(&addrs, u32::MAX, AggOp::Min), 4096);
        let mut pred = [0u64; 32];
        pred[0] = 1;
        pred[5] = 1;
        assert_eq!(aggregate(&pred, u32::MAX, AggOp::Ballot), 0x21);
        // inactive lanes do not count
        assert_eq!(aggregate(&pred, !1, AggOp::Ballot), 0x20);
    }

    #[test]
    fn lane_varying_delta_is_summed() {
        let p = verified(".hook access\n.map c hash global\nmov r1, 0\nmov r2, 9\ncall get_lane_id\nmov r3, r0\nmov r1, 0\nmov r2, 9\ncall map_update\nmov r0, 0\nexit");
        let ctx = WarpContext::new(Hook::Access, 0, 0, 0xf0);
        let mut a = LocalMaps::new(1);
        let mut b = LocalMaps::new(1);
        run_hook(&p, &ctx, &mut a, ExecMode::PerLane).unwrap();
        run_hook(&p, &ctx, &mut b, ExecMode::WarpLeader).unwrap();
        assert_eq!(a.get(0, 9), 4 + 5 + 6 + 7);
        assert_eq!(a, b);
    }

    #[test]
    fn leader_is_cheaper() {
        let p = verified(COUNTER);
        let ctx = WarpContext::new(Hook::Access, 0, 0, 0b11);
        let x = run_hook(&p, &ctx, &mut LocalMaps::new(1), ExecMode::PerLane).unwrap();
        let y = run_hook(&p, &ctx, &mut LocalMaps::new(1), ExecMode::WarpLeader).unwrap();
        assert_eq!(x.cost_ns, 2 * 6 * NS_PER_INSN);
        assert_eq!(y.cost_ns, 6 * NS_PER_INSN + AGGREGATION_NS);
    }

    #[test]
    fn decision_broadcast() {
        let p = verified(".hook access\nldctxdw r1, lane_addr\ncall warp_reduce_max\nstxdw [r10-8], r0\nldxdw r2, [r10-8]\nstctxdw decision, r2\nmov r0, 0\nexit");
        let mut ctx = WarpContext::new(Hook::Access, 0, 0, 0xff);
        ctx.set_lanes("lane_addr", std::array::from_fn(|l| l as u64 * 3)).unwrap();
        for mode in [ExecMode::PerLane, ExecMode::WarpLeader] {
            let r = run_hook(&p, &ctx, &mut LocalMaps::new(0), mode).unwrap();
            assert_eq!(r.decision, 21);
            assert!(r.lane_decisions.iter().all(|(_, d)| *d == 21));
            assert_eq!(r.lane_decisions.len(), 8);
        }
    }

    #[test]
    fn rejects_bad_invocations() {
        let p = assemble(COUNTER).unwrap();
        let ctx = WarpContext::new(Hook::Access, 0, 0, 1);
        assert_eq!(run_hook(&p, &ctx, &mut LocalMaps::new(1), ExecMode::PerLane), Err(DeviceError::NotVerified(Hook::Access)));
        let p = verified(COUNTER);
        let ctx = WarpContext::new(Hook::Fence, 0, 0, 1);
        assert!(matches!(run_hook(&p, &ctx, &mut LocalMaps::new(1), ExecMode::PerLane), Err(DeviceError::SchemaMismatch { .. })));
        let ctx = WarpContext::new(Hook::Access, 0, 0, 0);
        assert_eq!(run_hook(&p, &ctx, &mut LocalMaps::new(1), ExecMode::WarpLeader), Err(DeviceError::EmptyMask));
        let mut ctx = WarpContext::new(Hook::Access, 0, 0, 1);
        assert!(ctx.set_uniform("lane_addr", 1).is_err());
        assert!(ctx.set_lanes("warp_id", [0; 32]).is_err());
    }

    #[test]
    fn lookups_see_entry_snapshot() {
        // every lane reads the value before anyone's update lands
        let p = verified(".hook access\n.map c hash global\nmov r1, 0\nmov r2, 0\ncall map_lookup\nmov r3, r0\nadd r3, 1\nmov r1, 0\nmov r2, 1\ncall map_update\nmov r0, 0\nexit");
        let ctx = WarpContext::new(Hook::Access, 0, 0, 0xf);
        let mut m = LocalMaps::new(1);
        m.maps[0].insert(0, 10);
        let mut n = m.clone();
        run_hook(&p, &ctx, &mut m, ExecMode::PerLane).unwrap();
        run_hook(&p, &ctx, &mut n, ExecMode::WarpLeader).unwrap();
        assert_eq!(m.get(0, 1), 44);
        assert_eq!(m, n);
    }

    #[test]
    fn divergent_program_is_detected() {
        let p = assemble(".hook access\nldctxdw r1, lane_id\nmov r0, 0\njeq r1, 0, +1\nmov r0, 1\nexit").unwrap();
        let ctx = WarpContext::new(Hook::Access, 0, 0, 0b11);
        let traces = lane_branch_traces(&p, &ctx, &LocalMaps::new(0)).unwrap();
        assert_ne!(traces[0], traces[1]);
    }

    #[test]
    fn kernel_spec_and_instrumentation() {
        let spec = KernelSpec::parse("COMPUTE\nLOAD base=0x1000 lane_stride=4 x2\nFENCE\n").unwrap();
        assert_eq!(spec.ops().len(), 4);
        let k = instrument(&spec, &[HookPoint::Entry]);
        assert_eq!(k.hook_calls(HookPoint::Entry), 1);
        assert_eq!(k.steps[0], KernelStep::Hook { point: HookPoint::Entry, op_index: 0 });
        let k = instrument(&spec, &[HookPoint::MemInstruction]);
        assert_eq!(k.hook_calls(HookPoint::MemInstruction), 2);
        let k = instrument(&spec, &[HookPoint::Fence]);
        assert_eq!(k.hook_calls(HookPoint::Fence), 1);
        let all = instrument(&spec, &[HookPoint::Entry, HookPoint::MemInstruction, HookPoint::Fence]);
        assert_eq!(all.ops().collect::<Vec<_>>(), spec.ops());
        assert!(HookPoint::parse("bogus").is_err());
        assert!(KernelSpec::parse("JUMP").is_err());
    }

    #[test]
    fn kernel_run_merges_maps() {
        let p = verified(COUNTER);
        let mut reg = MapRegistry::new(2);
        reg.create(0, "c", crate::xmaps::MapKind::Hash, crate::xmaps::Placement::Global, &[]).unwrap();
        let mut hs = DeviceHandlers::default();
        hs.attach(p, vec![0]).unwrap();
        let k = instrument(&KernelSpec::parse("LOAD x3").unwrap(), &[HookPoint::MemInstruction]);
        let launch = Launch { sms: 2, warps_per_sm: 2, active_mask: u32::MAX, kernel_id: 1, block_id: 0 };
        let run = run_kernel(&k, &hs, launch, &mut reg, ExecMode::WarpLeader, 0).unwrap();
        assert_eq!(run.hook_calls, 12);
        assert_eq!(reg.lookup(0, 0, ReadDomain::Host).unwrap(), (12 * 32, 1));
    }
}
