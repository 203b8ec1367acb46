//! Standard safety pass: encoding, control flow, initialization, bounds,
//! helpers and loop bounds.

use std::collections::BTreeMap;

use crate::ir::helpers::{self, HelperKind};
use crate::ir::isa::{AluOp, Instruction, JmpOp, Opcode, Source, Width, FRAME_REG, NUM_REGS, STACK_SIZE};
use crate::ir::schema::Mutability;
use crate::ir::{ContextSchema, PolicyProgram};

use super::{Rule, Violation};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Interval {
    pub lo: u64,
    pub hi: u64,
}

impl Interval {
    pub const TOP: Interval = Interval { lo: 0, hi: u64::MAX };

    pub fn exact(v: u64) -> Self {
        Interval { lo: v, hi: v }
    }

    fn join(self, o: Interval) -> Interval {
        Interval { lo: self.lo.min(o.lo), hi: self.hi.max(o.hi) }
    }

    pub fn single(self) -> Option<u64> {
        (self.lo == self.hi).then_some(self.lo)
    }
}

type Ranges = [Interval; NUM_REGS];

#[derive(Clone, Debug)]
pub(crate) struct LoopInfo {
    pub header: usize,
    pub latch: usize,
    /// Worst-case body executions per entry; saturates at `u64::MAX`.
    pub trips: u64,
}

impl LoopInfo {
    pub fn contains(&self, pc: usize) -> bool {
        (self.header..=self.latch).contains(&pc)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Analysis {
    pub succs: Vec<Vec<usize>>,
    pub loops: Vec<LoopInfo>,
    /// Constant map index passed to each map helper call.
    pub call_maps: BTreeMap<usize, usize>,
    /// Back-edge jump pcs.
    pub latches: Vec<usize>,
}

impl Analysis {
    /// Product of trip counts of every loop enclosing `pc`.
    pub fn multiplier(&self, pc: usize) -> u64 {
        self.loops.iter().filter(|l| l.contains(pc)).fold(1u64, |m, l| m.saturating_mul(l.trips))
    }
}

pub(crate) struct StandardResult {
    pub violations: Vec<Violation>,
    pub analysis: Option<Analysis>,
}

pub(crate) fn successors(prog: &PolicyProgram, pc: usize) -> Vec<usize> {
    let insn = prog.instructions[pc];
    match insn.opcode {
        Opcode::Exit => vec![],
        Opcode::Jump { op: JmpOp::Ja, .. } => vec![insn.jump_target(pc) as usize],
        Opcode::Jump { .. } => {
            let t = insn.jump_target(pc) as usize;
            if t == pc + 1 {
                vec![t]
            } else {
                vec![pc + 1, t]
            }
        }
        _ => vec![pc + 1],
    }
}

/// Registers an instruction defines.
pub(crate) fn defs(insn: &Instruction) -> Vec<u8> {
    match insn.opcode {
        Opcode::Alu { .. } | Opcode::LoadStack(_) | Opcode::LoadCtx(_) => vec![insn.dst],
        Opcode::Call => (0..=5).collect(),
        _ => vec![],
    }
}

/// Registers an instruction reads.
fn uses(insn: &Instruction) -> Vec<u8> {
    match insn.opcode {
        Opcode::Alu { op, src } => {
            let mut u = if op == AluOp::Mov { vec![] } else { vec![insn.dst] };
            if src == Source::Reg {
                u.push(insn.src);
            }
            u
        }
        Opcode::LoadStack(_) => vec![insn.src],
        Opcode::StoreStackReg(_) => vec![insn.dst, insn.src],
        Opcode::StoreStackImm(_) => vec![insn.dst],
        Opcode::StoreCtxReg(_) => vec![insn.src],
        Opcode::Jump { op: JmpOp::Ja, .. } => vec![],
        Opcode::Jump { src, .. } => {
            if src == Source::Reg {
                vec![insn.dst, insn.src]
            } else {
                vec![insn.dst]
            }
        }
        Opcode::Call => {
            let n = helpers::helper(insn.imm as u32).map_or(0, |h| h.args.len());
            (1..=n as u8).collect()
        }
        Opcode::Exit => vec![0],
        Opcode::LoadCtx(_) | Opcode::StoreCtxImm(_) => vec![],
    }
}

/// Stack byte range `[start, end)` relative to the bottom of the frame.
pub(crate) fn stack_slot(insn: &Instruction, w: Width) -> Option<(usize, usize)> {
    let off = insn.offset as i64;
    if off < -(STACK_SIZE as i64) || off + w.bytes() as i64 > 0 {
        return None;
    }
    let start = (STACK_SIZE as i64 + off) as usize;
    Some((start, start + w.bytes()))
}

fn structural(prog: &PolicyProgram, schema: &ContextSchema, out: &mut Vec<Violation>) {
    let n = prog.len();
    let domain = prog.hook.domain();
    for (pc, insn) in prog.instructions.iter().enumerate() {
        if defs(insn).contains(&FRAME_REG) && insn.opcode != Opcode::Call {
            out.push(Violation::new(pc, Rule::BadInsn, "r10 is read-only"));
        }
        match insn.opcode {
            Opcode::Jump { .. } => {
                let t = insn.jump_target(pc);
                if t < 0 || t >= n as i64 {
                    out.push(Violation::new(pc, Rule::BadJump, format!("jump target {t} outside program")));
                }
            }
            Opcode::LoadStack(w) | Opcode::StoreStackReg(w) | Opcode::StoreStackImm(w) => {
                let base = if matches!(insn.opcode, Opcode::LoadStack(_)) { insn.src } else { insn.dst };
                if base != FRAME_REG {
                    out.push(Violation::new(pc, Rule::OobAccess, format!("stack access through r{base}; only r10 may address the stack")));
                } else if stack_slot(insn, w).is_none() {
                    out.push(Violation::new(
                        pc,
                        Rule::OobAccess,
                        format!("stack access at r10{:+} width {} outside [-{STACK_SIZE}, 0)", insn.offset, w.bytes()),
                    ));
                }
            }
            Opcode::LoadCtx(w) | Opcode::StoreCtxReg(w) | Opcode::StoreCtxImm(w) => {
                match schema.field_at(insn.offset as i64, w.bytes()) {
                    None => out.push(Violation::new(
                        pc,
                        Rule::OobAccess,
                        format!("context access at {} width {} outside any {} field", insn.offset, w.bytes(), schema.hook),
                    )),
                    Some(f) if !matches!(insn.opcode, Opcode::LoadCtx(_)) && f.mutability == Mutability::ReadOnly => {
                        out.push(Violation::new(pc, Rule::CtxWrite, format!("write to read-only field {}", f.name)))
                    }
                    _ => {}
                }
            }
            Opcode::Call => match helpers::helper(insn.imm as u32) {
                None => out.push(Violation::new(pc, Rule::UnknownHelper, format!("unknown helper id {}", insn.imm))),
                Some(h) if !h.domain.admits(domain) => out.push(Violation::new(
                    pc,
                    Rule::HelperDomain,
                    format!("{} is not available to {} programs", h.name, prog.hook_type().name()),
                )),
                _ => {}
            },
            _ => {}
        }
    }
    match prog.instructions.last() {
        None => out.push(Violation::new(0, Rule::NoExit, "empty program")),
        Some(last) if !matches!(last.opcode, Opcode::Exit | Opcode::Jump { op: JmpOp::Ja, .. }) => {
            out.push(Violation::new(n - 1, Rule::NoExit, "control may fall off the end of the program"))
        }
        _ => {}
    }
}

#[derive(Clone, PartialEq, Eq)]
struct InitState {
    regs: u16,
    stack: [u64; STACK_SIZE / 64],
}

impl InitState {
    fn all() -> Self {
        InitState { regs: u16::MAX, stack: [u64::MAX; STACK_SIZE / 64] }
    }

    fn entry() -> Self {
        InitState { regs: 1 << FRAME_REG, stack: [0; STACK_SIZE / 64] }
    }

    fn meet(&mut self, o: &InitState) -> bool {
        let before = self.clone();
        self.regs &= o.regs;
        for (a, b) in self.stack.iter_mut().zip(o.stack.iter()) {
            *a &= b;
        }
        *self != before
    }

    fn reg(&self, r: u8) -> bool {
        self.regs & (1 << r) != 0
    }

    fn bytes(&self, (s, e): (usize, usize)) -> bool {
        (s..e).all(|b| self.stack[b / 64] & (1 << (b % 64)) != 0)
    }

    fn set_bytes(&mut self, (s, e): (usize, usize)) {
        for b in s..e {
            self.stack[b / 64] |= 1 << (b % 64);
        }
    }

    fn transfer(&mut self, insn: &Instruction) {
        for d in defs(insn) {
            self.regs |= 1 << d;
        }
        if insn.opcode == Opcode::Call {
            for r in 1..=5 {
                self.regs &= !(1 << r);
            }
        }
        if let Opcode::StoreStackReg(w) | Opcode::StoreStackImm(w) = insn.opcode {
            if let Some(slot) = stack_slot(insn, w) {
                self.set_bytes(slot);
            }
        }
    }
}

/// Definite-initialization dataflow over registers and stack bytes.
fn init_check(prog: &PolicyProgram, succs: &[Vec<usize>], out: &mut Vec<Violation>) {
    let n = prog.len();
    let mut states = vec![InitState::all(); n];
    let mut reached = vec![false; n];
    states[0] = InitState::entry();
    reached[0] = true;
    let mut work = vec![0usize];
    while let Some(pc) = work.pop() {
        let mut s = states[pc].clone();
        s.transfer(&prog.instructions[pc]);
        for &t in &succs[pc] {
            if !reached[t] {
                reached[t] = true;
                states[t] = s.clone();
                work.push(t);
            } else if states[t].meet(&s) {
                work.push(t);
            }
        }
    }
    for (pc, insn) in prog.instructions.iter().enumerate() {
        if !reached[pc] {
            continue;
        }
        let s = &states[pc];
        for r in uses(insn) {
            if !s.reg(r) {
                out.push(Violation::new(pc, Rule::Uninit, format!("read of uninitialized r{r}")));
            }
        }
        if let Opcode::LoadStack(w) = insn.opcode {
            if let Some(slot) = stack_slot(insn, w) {
                if !s.bytes(slot) {
                    out.push(Violation::new(pc, Rule::Uninit, format!("read of uninitialized stack at r10{:+}", insn.offset)));
                }
            }
        }
    }
}

fn alu_range(op: AluOp, a: Interval, b: Interval) -> Interval {
    if let (Some(x), Some(y)) = (a.single(), b.single()) {
        return Interval::exact(op.apply(x, y));
    }
    match op {
        AluOp::Mov => b,
        AluOp::Add => match (a.hi.checked_add(b.hi), a.lo.checked_add(b.lo)) {
            (Some(hi), Some(lo)) => Interval { lo, hi },
            _ => Interval::TOP,
        },
        AluOp::Sub if a.lo >= b.hi => Interval { lo: a.lo - b.hi, hi: a.hi - b.lo },
        AluOp::Mul => match a.hi.checked_mul(b.hi) {
            Some(hi) => Interval { lo: a.lo * b.lo, hi },
            None => Interval::TOP,
        },
        AluOp::And => Interval { lo: 0, hi: a.hi.min(b.hi) },
        AluOp::Mod if b.lo > 0 => Interval { lo: 0, hi: (b.hi - 1).min(a.hi) },
        AluOp::Div if b.lo > 0 => Interval { lo: a.lo / b.hi, hi: a.hi / b.lo },
        AluOp::Rsh if b.hi < 64 => Interval { lo: a.lo >> b.hi, hi: a.hi >> b.lo },
        _ => Interval::TOP,
    }
}

fn range_transfer(r: &mut Ranges, insn: &Instruction) {
    match insn.opcode {
        Opcode::Alu { op, src } => {
            let b = if src == Source::Reg { r[insn.src as usize] } else { Interval::exact(insn.imm as i64 as u64) };
            r[insn.dst as usize] = alu_range(op, r[insn.dst as usize], b);
        }
        Opcode::LoadStack(_) | Opcode::LoadCtx(_) => r[insn.dst as usize] = Interval::TOP,
        Opcode::Call => {
            for reg in r.iter_mut().take(6) {
                *reg = Interval::TOP;
            }
        }
        _ => {}
    }
}

/// Value ranges in program order. Loop headers drop everything the loop body
/// writes, so a single forward sweep is sound. Returns the in-state at each
/// pc and, for headers, the state on entry from outside the loop.
fn ranges(prog: &PolicyProgram, succs: &[Vec<usize>], bodies: &[(usize, usize)]) -> (Vec<Option<Ranges>>, Vec<Option<Ranges>>) {
    let n = prog.len();
    let mut preds: Vec<Vec<usize>> = vec![vec![]; n];
    for (pc, ss) in succs.iter().enumerate() {
        for &t in ss {
            if t > pc {
                preds[t].push(pc);
            }
        }
    }
    let mut inn: Vec<Option<Ranges>> = vec![None; n];
    let mut entry: Vec<Option<Ranges>> = vec![None; n];
    let mut outs: Vec<Option<Ranges>> = vec![None; n];
    for pc in 0..n {
        let mut s: Option<Ranges> = if pc == 0 {
            let mut r = [Interval::exact(0); NUM_REGS];
            r[FRAME_REG as usize] = Interval::exact(STACK_SIZE as u64);
            Some(r)
        } else {
            None
        };
        for &p in &preds[pc] {
            if let Some(o) = &outs[p] {
                s = Some(match s {
                    None => *o,
                    Some(mut cur) => {
                        for (c, x) in cur.iter_mut().zip(o.iter()) {
                            *c = c.join(*x);
                        }
                        cur
                    }
                });
            }
        }
        // a header reached only through its back edge is still in the body
        let headed: Vec<&(usize, usize)> = bodies.iter().filter(|(h, _)| *h == pc).collect();
        if !headed.is_empty() {
            entry[pc] = s;
            if let Some(st) = s.as_mut() {
                for &&(h, b) in &headed {
                    for insn in &prog.instructions[h..=b] {
                        for d in defs(insn) {
                            st[d as usize] = Interval::TOP;
                        }
                    }
                }
            }
        }
        inn[pc] = s;
        outs[pc] = s.map(|mut st| {
            range_transfer(&mut st, &prog.instructions[pc]);
            st
        });
    }
    (inn, entry)
}

/// Worst-case body executions for a do-while loop whose latch compares the
/// counter after a constant step.
fn trip_count(op: JmpOp, increasing: bool, step: u64, init: Interval, bound: Interval) -> Option<u64> {
    const SAT: u64 = u64::MAX;
    let trips = match (op, increasing) {
        (JmpOp::Lt, true) => {
            if bound.hi > u64::MAX - step + 1 {
                SAT
            } else if bound.hi <= init.lo {
                1
            } else {
                (bound.hi - init.lo).div_ceil(step).max(1)
            }
        }
        (JmpOp::Le, true) => {
            if bound.hi > u64::MAX - step {
                SAT
            } else if bound.hi < init.lo {
                1
            } else {
                (bound.hi - init.lo) / step + 1
            }
        }
        (JmpOp::Gt, false) => {
            if bound.lo + 1 < step {
                SAT
            } else if init.hi <= bound.lo {
                1
            } else {
                (init.hi - bound.lo).div_ceil(step).max(1)
            }
        }
        (JmpOp::Ge, false) => {
            if bound.lo < step {
                SAT
            } else if init.hi < bound.lo {
                1
            } else {
                (init.hi - bound.lo) / step + 1
            }
        }
        _ => return None,
    };
    Some(trips)
}

/// Can `to` be reached from `from` inside `[lo, hi]` without executing `avoid`?
fn reaches_avoiding(succs: &[Vec<usize>], from: usize, to: usize, avoid: usize, lo: usize, hi: usize, latch: usize) -> bool {
    let mut seen = vec![false; succs.len()];
    let mut stack = vec![from];
    while let Some(pc) = stack.pop() {
        if pc == avoid || seen[pc] {
            continue;
        }
        if pc == to {
            return true;
        }
        seen[pc] = true;
        for &t in &succs[pc] {
            if (lo..=hi).contains(&t) && !(pc == latch && t == lo) {
                stack.push(t);
            }
        }
    }
    false
}

fn loop_check(
    prog: &PolicyProgram,
    succs: &[Vec<usize>],
    out: &mut Vec<Violation>,
) -> Option<(Vec<LoopInfo>, Vec<Option<Ranges>>)> {
    let mut bodies = Vec::new();
    for (pc, insn) in prog.instructions.iter().enumerate() {
        if let Opcode::Jump { op, .. } = insn.opcode {
            let t = insn.jump_target(pc) as usize;
            if t <= pc {
                if op == JmpOp::Ja {
                    out.push(Violation::new(pc, Rule::UnboundedLoop, "unconditional backward jump"));
                } else {
                    bodies.push((t, pc));
                }
            }
        }
    }
    let before = out.len();
    // no entry into a body except through its header
    for &(h, b) in &bodies {
        for (pc, ss) in succs.iter().enumerate() {
            if (h..=b).contains(&pc) {
                continue;
            }
            if let Some(&t) = ss.iter().find(|&&t| t > h && t <= b) {
                out.push(Violation::new(pc, Rule::Irreducible, format!("jump into loop body at {t} bypasses header {h}")));
            }
        }
    }
    for (i, &(h1, b1)) in bodies.iter().enumerate() {
        for &(h2, b2) in &bodies[i + 1..] {
            let disjoint = b1 < h2 || b2 < h1;
            let nested = (h1 <= h2 && b2 <= b1) || (h2 <= h1 && b1 <= b2);
            if !disjoint && !nested {
                out.push(Violation::new(b2, Rule::Irreducible, format!("loops {h1}..{b1} and {h2}..{b2} overlap")));
            }
        }
    }
    if out.len() > before {
        return None;
    }

    let (inn, entry) = ranges(prog, succs, &bodies);
    let mut loops = Vec::new();
    for &(h, b) in &bodies {
        let latch = prog.instructions[b];
        let Opcode::Jump { op, src } = latch.opcode else { unreachable!() };
        let fail = |out: &mut Vec<Violation>, msg: String| out.push(Violation::new(b, Rule::UnboundedLoop, msg));
        if !matches!(op, JmpOp::Lt | JmpOp::Le | JmpOp::Gt | JmpOp::Ge) {
            fail(out, format!("loop condition `{}` is not an unsigned ordered comparison", op.mnemonic()));
            continue;
        }
        let counter = latch.dst;
        let body = &prog.instructions[h..=b];
        let writers: Vec<usize> = (h..=b).filter(|&pc| defs(&prog.instructions[pc]).contains(&counter)).collect();
        let [u] = writers[..] else {
            fail(out, format!("loop counter r{counter} must be updated exactly once per iteration"));
            continue;
        };
        let upd = prog.instructions[u];
        let step = match upd.opcode {
            Opcode::Alu { op: AluOp::Add, src: Source::Imm } if upd.imm != 0 => upd.imm as i64,
            Opcode::Alu { op: AluOp::Sub, src: Source::Imm } if upd.imm != 0 => -(upd.imm as i64),
            _ => {
                fail(out, format!("loop counter r{counter} must change by a constant step"));
                continue;
            }
        };
        if bodies.iter().any(|&(h2, b2)| (h2, b2) != (h, b) && h <= h2 && b2 <= b && (h2..=b2).contains(&u)) {
            fail(out, format!("loop counter r{counter} is updated inside an inner loop"));
            continue;
        }
        if reaches_avoiding(succs, h, b, u, h, b, b) {
            fail(out, format!("loop counter update at {u} may be skipped"));
            continue;
        }
        if src == Source::Reg && body.iter().any(|i| defs(i).contains(&latch.src)) {
            fail(out, format!("loop bound r{} is modified in the loop", latch.src));
            continue;
        }
        let Some(ent) = entry[h] else {
            // unreachable loop
            loops.push(LoopInfo { header: h, latch: b, trips: 1 });
            continue;
        };
        let init = ent[counter as usize];
        let bound = if src == Source::Reg { ent[latch.src as usize] } else { Interval::exact(latch.imm as i64 as u64) };
        match trip_count(op, step > 0, step.unsigned_abs(), init, bound) {
            Some(trips) => loops.push(LoopInfo { header: h, latch: b, trips }),
            None => fail(out, format!("loop counter r{counter} moves away from its bound")),
        }
    }
    Some((loops, inn))
}

pub(crate) fn standard_pass(prog: &PolicyProgram, schema: &ContextSchema) -> StandardResult {
    let mut out = Vec::new();
    structural(prog, schema, &mut out);
    if out.iter().any(|v| matches!(v.rule, Rule::BadJump | Rule::NoExit | Rule::BadInsn)) {
        out.sort_by_key(|v| v.index);
        return StandardResult { violations: out, analysis: None };
    }
    let succs: Vec<Vec<usize>> = (0..prog.len()).map(|pc| successors(prog, pc)).collect();
    init_check(prog, &succs, &mut out);
    let loops = loop_check(prog, &succs, &mut out);

    let mut call_maps = BTreeMap::new();
    if let Some((_, inn)) = &loops {
        for (pc, insn) in prog.instructions.iter().enumerate() {
            let Some(spec) = (insn.opcode == Opcode::Call).then(|| helpers::helper(insn.imm as u32)).flatten() else {
                continue;
            };
            if !matches!(spec.kind, HelperKind::MapLookup | HelperKind::MapUpdate | HelperKind::MapSet) {
                continue;
            }
            let Some(st) = &inn[pc] else { continue };
            match st[1].single() {
                Some(m) if (m as usize) < prog.maps.len() => {
                    call_maps.insert(pc, m as usize);
                }
                Some(m) => out.push(Violation::new(pc, Rule::BadMap, format!("map index {m} not declared"))),
                None => out.push(Violation::new(pc, Rule::BadMap, "map index in r1 must be a constant")),
            }
        }
    }
    out.sort_by_key(|v| v.index);
    // budget accounting only needs loop bounds, so keep the analysis when
    // the remaining findings are unrelated to loops
    let loops_ok = !out.iter().any(|v| v.rule == Rule::UnboundedLoop);
    let analysis = match loops {
        Some((loops, _)) if loops_ok => {
            let latches = loops.iter().map(|l| l.latch).collect();
            Some(Analysis { succs, loops, call_maps, latches })
        }
        _ => None,
    };
    StandardResult { violations: out, analysis }
}
