//! Workload traces: a tab-separated text format and seeded generators.
//!
//! One event per line: `time_ns  tenant  op  args...`. Ops:
//!
//! ```text
//! ACCESS        offset            byte offset into the tenant's allocation
//! QUEUE_CREATE  class [priority timeslice_us interleave]
//! LAUNCH        queue work_us     queue index within the tenant
//! QUEUE_DESTROY queue
//! ```

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mem::PAGE_SIZE;
use crate::policy::parse_u64;
use crate::sched::{QueueAttrs, TenantClass};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("trace line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("trace line {line}: time goes backwards")]
    TimeOrder { line: usize },
    #[error("invalid generator parameters: {0}")]
    Params(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceOp {
    Access { offset: u64 },
    QueueCreate { class: TenantClass, attrs: Option<QueueAttrs> },
    Launch { queue: u32, work_us: u64 },
    QueueDestroy { queue: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub time_ns: u64,
    pub tenant: u32,
    pub op: TraceOp,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn is_ordered(&self) -> bool {
        self.events.windows(2).all(|w| w[0].time_ns <= w[1].time_ns)
    }

    /// Stable merge by time; ties keep the order of `traces`.
    pub fn merge(traces: Vec<Trace>) -> Trace {
        let mut events: Vec<(u64, usize, usize, TraceEvent)> = Vec::new();
        for (t, tr) in traces.into_iter().enumerate() {
            events.extend(tr.events.into_iter().enumerate().map(|(i, e)| (e.time_ns, t, i, e)));
        }
        events.sort_by_key(|e| (e.0, e.1, e.2));
        Trace { events: events.into_iter().map(|e| e.3).collect() }
    }

    pub fn accesses(&self) -> impl Iterator<Item = (u32, u64)> + '_ {
        self.events.iter().filter_map(|e| match e.op {
            TraceOp::Access { offset } => Some((e.tenant, offset)),
            _ => None,
        })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("# time_ns\ttenant\top\targs\n");
        for e in &self.events {
            let _ = write!(out, "{}\t{}\t", e.time_ns, e.tenant);
            let _ = match e.op {
                TraceOp::Access { offset } => writeln!(out, "ACCESS\t{offset}"),
                TraceOp::QueueCreate { class, attrs: None } => writeln!(out, "QUEUE_CREATE\t{}", class.name()),
                TraceOp::QueueCreate { class, attrs: Some(a) } => {
                    writeln!(out, "QUEUE_CREATE\t{}\t{}\t{}\t{}", class.name(), a.priority, a.timeslice_us, a.interleave)
                }
                TraceOp::Launch { queue, work_us } => writeln!(out, "LAUNCH\t{queue}\t{work_us}"),
                TraceOp::QueueDestroy { queue } => writeln!(out, "QUEUE_DESTROY\t{queue}"),
            };
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Trace, TraceError> {
        let mut events = Vec::new();
        let mut last = 0;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let f: Vec<&str> = body.split_whitespace().collect();
            let err = |msg: &str| TraceError::Parse { line, msg: msg.to_string() };
            if f.len() < 3 {
                return Err(err("expected time, tenant and op"));
            }
            let num = |s: &str| parse_u64(s).ok_or_else(|| err(&format!("bad number `{s}`")));
            let time_ns = num(f[0])?;
            let tenant = num(f[1])? as u32;
            let args = &f[3..];
            let want = |n: usize| if args.len() == n { Ok(()) } else { Err(err(&format!("{} takes {n} arguments", f[2]))) };
            let op = match f[2] {
                "ACCESS" => {
                    want(1)?;
                    TraceOp::Access { offset: num(args[0])? }
                }
                "QUEUE_CREATE" => {
                    let class = args.first().and_then(|c| TenantClass::from_name(c)).ok_or_else(|| err("QUEUE_CREATE needs LC or BE"))?;
                    let attrs = match args.len() {
                        1 => None,
                        4 => Some(QueueAttrs { priority: num(args[1])?, timeslice_us: num(args[2])?, interleave: num(args[3])? }),
                        _ => return Err(err("QUEUE_CREATE takes a class and optionally priority, timeslice and interleave")),
                    };
                    TraceOp::QueueCreate { class, attrs }
                }
                "LAUNCH" => {
                    want(2)?;
                    TraceOp::Launch { queue: num(args[0])? as u32, work_us: num(args[1])? }
                }
                "QUEUE_DESTROY" => {
                    want(1)?;
                    TraceOp::QueueDestroy { queue: num(args[0])? as u32 }
                }
                other => return Err(err(&format!("unknown op `{other}`"))),
            };
            if time_ns < last {
                return Err(TraceError::TimeOrder { line });
            }
            last = time_ns;
            events.push(TraceEvent { time_ns, tenant, op });
        }
        Ok(Trace { events })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Pattern {
    SeqScan,
    Random,
    /// Sequential runs of `period` pages that restart from the beginning.
    PeriodicSeq { period: u64 },
    /// Uniform draws from a fixed random subset holding `density` of the pages.
    SparseRandom { density: f64 },
    /// Blocks of `block` pages visited in a fixed shuffled order, sequential
    /// inside each block; the order repeats every pass.
    PeriodicBlock { block: u64 },
    /// Constant byte stride.
    Stride { bytes: u64 },
    /// Page ranks drawn from a Zipf law with exponent `theta`; rank 1 is page 0.
    Zipf { theta: f64 },
}

impl Pattern {
    /// `NAME` or `NAME(arg)`, e.g. `STRIDE(64KB)` or `ZIPF(0.99)`.
    pub fn parse(s: &str) -> Result<Pattern, TraceError> {
        let s = s.trim();
        let (name, arg) = match s.split_once('(') {
            Some((n, rest)) => (n.trim(), Some(rest.trim_end_matches(')').trim())),
            None => (s, None),
        };
        let bad = || TraceError::Params(format!("bad pattern `{s}`"));
        let int = |d: u64| arg.map_or(Ok(d), |a| parse_u64(a).ok_or_else(bad));
        let float = |d: f64| arg.map_or(Ok(d), |a| a.parse::<f64>().map_err(|_| bad()));
        Ok(match name.to_ascii_uppercase().as_str() {
            "SEQ_SCAN" => Pattern::SeqScan,
            "RANDOM" => Pattern::Random,
            "PERIODIC_SEQ" => Pattern::PeriodicSeq { period: int(256)? },
            "SPARSE_RANDOM" => Pattern::SparseRandom { density: float(0.1)? },
            "PERIODIC_BLOCK" => Pattern::PeriodicBlock { block: int(64)? },
            "STRIDE" => Pattern::Stride { bytes: int(64 << 10)? },
            "ZIPF" => Pattern::Zipf { theta: float(0.99)? },
            _ => return Err(bad()),
        })
    }

    pub fn name(&self) -> String {
        match *self {
            Pattern::SeqScan => "SEQ_SCAN".into(),
            Pattern::Random => "RANDOM".into(),
            Pattern::PeriodicSeq { period } => format!("PERIODIC_SEQ({period})"),
            Pattern::SparseRandom { density } => format!("SPARSE_RANDOM({density})"),
            Pattern::PeriodicBlock { block } => format!("PERIODIC_BLOCK({block})"),
            Pattern::Stride { bytes } => format!("STRIDE({bytes})"),
            Pattern::Zipf { theta } => format!("ZIPF({theta})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub working_set: u64,
    pub events: u64,
    pub tenant: u32,
    /// Time between consecutive accesses.
    pub gap_ns: u64,
    pub start_ns: u64,
}

impl GenParams {
    pub fn new(working_set: u64, events: u64) -> Self {
        GenParams { working_set, events, tenant: 0, gap_ns: 1000, start_ns: 0 }
    }
}

/// Memory access trace for one tenant; fully determined by `seed`.
pub fn gen_trace(pattern: Pattern, p: &GenParams, seed: u64) -> Result<Trace, TraceError> {
    let pages = p.working_set / PAGE_SIZE;
    if pages == 0 {
        return Err(TraceError::Params("working set must hold at least one page".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (p.tenant as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let page_seq: Vec<u64> = match pattern {
        Pattern::SeqScan => (0..p.events).map(|i| i % pages).collect(),
        Pattern::Random => (0..p.events).map(|_| rng.random_range(0..pages)).collect(),
        Pattern::PeriodicSeq { period } => {
            if period == 0 || period > pages {
                return Err(TraceError::Params("period must lie in 1..=pages".into()));
            }
            (0..p.events).map(|i| i % period).collect()
        }
        Pattern::SparseRandom { density } => {
            if !(density > 0.0 && density <= 1.0) {
                return Err(TraceError::Params("density must lie in (0, 1]".into()));
            }
            let k = ((pages as f64 * density).round() as u64).max(1);
            let subset = rand::seq::index::sample(&mut rng, pages as usize, k as usize);
            let subset: Vec<u64> = subset.into_iter().map(|x| x as u64).collect();
            (0..p.events).map(|_| subset[rng.random_range(0..subset.len())]).collect()
        }
        Pattern::PeriodicBlock { block } => {
            if block == 0 || block > pages {
                return Err(TraceError::Params("block must lie in 1..=pages".into()));
            }
            let blocks = pages / block;
            let mut order: Vec<u64> = (0..blocks).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let period = blocks * block;
            (0..p.events).map(|i| {
                let j = i % period;
                order[(j / block) as usize] * block + j % block
            }).collect()
        }
        Pattern::Stride { bytes } => {
            if bytes == 0 || bytes % PAGE_SIZE != 0 {
                return Err(TraceError::Params("stride must be a positive multiple of 4KB".into()));
            }
            let s = bytes / PAGE_SIZE;
            let per_pass = pages.div_ceil(s);
            (0..p.events).map(|i| (i % per_pass) * s).collect()
        }
        Pattern::Zipf { theta } => {
            let z = Zipf::new(pages as f64, theta).map_err(|e| TraceError::Params(format!("zipf: {e}")))?;
            (0..p.events).map(|_| z.sample(&mut rng) as u64 - 1).collect()
        }
    };
    let events = page_seq
        .into_iter()
        .enumerate()
        .map(|(i, page)| TraceEvent {
            time_ns: p.start_ns + i as u64 * p.gap_ns,
            tenant: p.tenant,
            op: TraceOp::Access { offset: page * PAGE_SIZE },
        })
        .collect();
    Ok(Trace { events })
}

/// Analytic probability mass of rank 1 under Zipf(n, theta).
pub fn zipf_top_mass(n: u64, theta: f64) -> f64 {
    1.0 / (1..=n).map(|k| (k as f64).powf(-theta)).sum::<f64>()
}
