//! Scalar reference interpreter.
//!
//! [`Machine`] executes one instruction per [`Machine::step`] and hands helper
//! calls back to its driver, so the warp drivers in `device` can intercept
//! collectives and map updates while sharing these semantics.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use super::helpers::{self, ids, AggOp, HelperKind};
use super::isa::{Instruction, Opcode, Source, FRAME_REG, NUM_REGS, STACK_SIZE};
use super::schema::{read_le, write_le};
use super::PolicyProgram;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExecError {
    #[error("program has not been verified")]
    NotVerified,
    #[error("pc {pc}: out-of-bounds {what} access at {addr}")]
    OutOfBounds { pc: usize, what: &'static str, addr: i64 },
    #[error("pc {pc}: unknown helper {id}")]
    UnknownHelper { pc: usize, id: u32 },
    #[error("pc {pc}: helper {name} not callable from this program type")]
    HelperDomain { pc: usize, name: &'static str },
    #[error("pc {pc}: jump outside program")]
    BadJump { pc: usize },
    #[error("fell off the end of the program")]
    FellOff,
    #[error("step limit of {0} instructions exceeded")]
    StepLimit(u64),
    #[error("map index {0} not declared")]
    BadMap(u64),
    #[error("map key {key} out of range for map {map}")]
    KeyRange { map: u64, key: u64 },
    #[error("lanes diverged at pc {pc}")]
    Divergence { pc: usize },
    #[error("handler aborted: {0}")]
    Aborted(String),
}

/// Observable side effect of one execution, in program order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum Effect {
    Call { helper: u32, args: [u64; 3], ret: u64 },
    CtxWrite { offset: u16, width: u8, value: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Outcome {
    pub ret: i64,
    pub effects: Vec<Effect>,
    pub insns_executed: u64,
    pub helper_calls: u64,
    pub mem_ops: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct ExecLimits {
    pub max_insns: u64,
}

impl Default for ExecLimits {
    fn default() -> Self {
        ExecLimits { max_insns: 1 << 20 }
    }
}

/// What the interpreter needs from its host. Calls other than maps, time,
/// lane id and warp collectives go to [`HelperEnv::kfunc`].
pub trait HelperEnv {
    fn map_lookup(&mut self, map: u64, key: u64) -> Result<u64, ExecError>;
    fn map_update(&mut self, map: u64, key: u64, delta: u64) -> Result<(), ExecError>;
    fn map_set(&mut self, map: u64, key: u64, value: u64) -> Result<(), ExecError>;

    fn now_ns(&self) -> u64 {
        0
    }

    fn lane_id(&self) -> u64 {
        0
    }

    /// Collective over the warp. A lone scalar thread is a warp of one.
    fn warp_reduce(&mut self, op: AggOp, value: u64) -> u64 {
        match op {
            AggOp::Ballot => (value != 0) as u64,
            _ => value,
        }
    }

    fn kfunc(&mut self, _id: u32, _args: [u64; 5]) -> Result<u64, ExecError> {
        Ok(0)
    }
}

/// Plain per-map key/value stores with immediate writes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LocalMaps {
    pub maps: Vec<BTreeMap<u64, u64>>,
    pub now_ns: u64,
}

impl LocalMaps {
    pub fn new(count: usize) -> Self {
        LocalMaps { maps: vec![BTreeMap::new(); count], now_ns: 0 }
    }

    pub fn for_program(prog: &PolicyProgram) -> Self {
        Self::new(prog.maps.len())
    }

    pub fn get(&self, map: usize, key: u64) -> u64 {
        self.maps.get(map).and_then(|m| m.get(&key)).copied().unwrap_or(0)
    }

    fn slot(&mut self, map: u64) -> Result<&mut BTreeMap<u64, u64>, ExecError> {
        self.maps.get_mut(map as usize).ok_or(ExecError::BadMap(map))
    }
}

impl HelperEnv for LocalMaps {
    fn map_lookup(&mut self, map: u64, key: u64) -> Result<u64, ExecError> {
        Ok(self.slot(map)?.get(&key).copied().unwrap_or(0))
    }

    fn map_update(&mut self, map: u64, key: u64, delta: u64) -> Result<(), ExecError> {
        let v = self.slot(map)?.entry(key).or_insert(0);
        *v = v.wrapping_add(delta);
        Ok(())
    }

    fn map_set(&mut self, map: u64, key: u64, value: u64) -> Result<(), ExecError> {
        self.slot(map)?.insert(key, value);
        Ok(())
    }

    fn now_ns(&self) -> u64 {
        self.now_ns
    }
}

/// Result of a single [`Machine::step`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    Next,
    /// Conditional jump evaluated; `taken` tells which way.
    Branch { taken: bool },
    /// Helper call pending; the driver must answer with [`Machine::finish_call`].
    Call { helper: u32, args: [u64; 5] },
    Exit(u64),
}

#[derive(Clone)]
pub struct Machine<'p> {
    prog: &'p PolicyProgram,
    pub regs: [u64; NUM_REGS],
    stack: [u8; STACK_SIZE],
    pub pc: usize,
    pub insns: u64,
    pub helper_calls: u64,
    pub mem_ops: u64,
    limit: u64,
}

impl<'p> Machine<'p> {
    pub fn new(prog: &'p PolicyProgram, limits: ExecLimits) -> Self {
        let mut regs = [0u64; NUM_REGS];
        regs[FRAME_REG as usize] = STACK_SIZE as u64;
        Machine { prog, regs, stack: [0; STACK_SIZE], pc: 0, insns: 0, helper_calls: 0, mem_ops: 0, limit: limits.max_insns }
    }

    pub fn program(&self) -> &'p PolicyProgram {
        self.prog
    }

    fn stack_addr(&self, base: u8, off: i16, width: usize) -> Result<usize, ExecError> {
        let addr = (self.regs[base as usize] as i64).wrapping_add(off as i64);
        if addr < 0 || addr as usize + width > STACK_SIZE {
            return Err(ExecError::OutOfBounds { pc: self.pc, what: "stack", addr: addr - STACK_SIZE as i64 });
        }
        Ok(addr as usize)
    }

    fn ctx_range(&self, ctx: &[u8], off: i16, width: usize) -> Result<std::ops::Range<usize>, ExecError> {
        if off < 0 || off as usize + width > ctx.len() {
            return Err(ExecError::OutOfBounds { pc: self.pc, what: "context", addr: off as i64 });
        }
        Ok(off as usize..off as usize + width)
    }

    pub fn step(&mut self, ctx: &mut [u8], effects: &mut Vec<Effect>) -> Result<Step, ExecError> {
        let insn: Instruction = *self.prog.instructions.get(self.pc).ok_or(ExecError::FellOff)?;
        if self.insns >= self.limit {
            return Err(ExecError::StepLimit(self.limit));
        }
        self.insns += 1;
        if insn.opcode.is_memory() {
            self.mem_ops += 1;
        }
        let (d, s) = (insn.dst as usize, insn.src as usize);
        let imm = insn.imm as i64 as u64;
        match insn.opcode {
            Opcode::Alu { op, src } => {
                let b = if src == Source::Reg { self.regs[s] } else { imm };
                self.regs[d] = op.apply(self.regs[d], b);
            }
            Opcode::LoadStack(w) => {
                let a = self.stack_addr(insn.src, insn.offset, w.bytes())?;
                self.regs[d] = read_le(&self.stack[a..a + w.bytes()]);
            }
            Opcode::StoreStackReg(w) | Opcode::StoreStackImm(w) => {
                let a = self.stack_addr(insn.dst, insn.offset, w.bytes())?;
                let v = if matches!(insn.opcode, Opcode::StoreStackReg(_)) { self.regs[s] } else { imm };
                write_le(&mut self.stack[a..a + w.bytes()], v);
            }
            Opcode::LoadCtx(w) => {
                let r = self.ctx_range(ctx, insn.offset, w.bytes())?;
                self.regs[d] = read_le(&ctx[r]);
            }
            Opcode::StoreCtxReg(w) | Opcode::StoreCtxImm(w) => {
                let r = self.ctx_range(ctx, insn.offset, w.bytes())?;
                let v = if matches!(insn.opcode, Opcode::StoreCtxReg(_)) { self.regs[s] } else { imm };
                write_le(&mut ctx[r], v);
                let mask = if w.bytes() == 8 { u64::MAX } else { (1u64 << (w.bytes() * 8)) - 1 };
                effects.push(Effect::CtxWrite { offset: insn.offset as u16, width: w.bytes() as u8, value: v & mask });
            }
            Opcode::Jump { op, src } => {
                let b = if src == Source::Reg { self.regs[s] } else { imm };
                let taken = op.taken(self.regs[d], b);
                if taken {
                    let t = insn.jump_target(self.pc);
                    if t < 0 || t as usize >= self.prog.len() {
                        return Err(ExecError::BadJump { pc: self.pc });
                    }
                    self.pc = t as usize;
                } else {
                    self.pc += 1;
                }
                return Ok(if op == super::JmpOp::Ja { Step::Next } else { Step::Branch { taken } });
            }
            Opcode::Call => {
                self.helper_calls += 1;
                let args = [self.regs[1], self.regs[2], self.regs[3], self.regs[4], self.regs[5]];
                return Ok(Step::Call { helper: insn.imm as u32, args });
            }
            Opcode::Exit => return Ok(Step::Exit(self.regs[0])),
        }
        self.pc += 1;
        Ok(Step::Next)
    }

    /// Complete a pending call: set `r0`, scrub the argument registers, advance.
    pub fn finish_call(&mut self, ret: u64) {
        self.regs[0] = ret;
        for r in &mut self.regs[1..=5] {
            *r = 0;
        }
        self.pc += 1;
    }
}

/// Look up a helper and check it may be called from `prog`.
pub(crate) fn resolve_helper(prog: &PolicyProgram, pc: usize, id: u32) -> Result<&'static helpers::HelperSpec, ExecError> {
    let spec = helpers::helper(id).ok_or(ExecError::UnknownHelper { pc, id })?;
    if !spec.domain.admits(prog.hook.domain()) {
        return Err(ExecError::HelperDomain { pc, name: spec.name });
    }
    Ok(spec)
}

/// Scalar semantics of every helper.
pub fn dispatch(env: &mut dyn HelperEnv, spec: &helpers::HelperSpec, args: [u64; 5]) -> Result<u64, ExecError> {
    match spec.kind {
        HelperKind::MapLookup => env.map_lookup(args[0], args[1]),
        HelperKind::MapUpdate => env.map_update(args[0], args[1], args[2]).map(|_| 0),
        HelperKind::MapSet => env.map_set(args[0], args[1], args[2]).map(|_| 0),
        HelperKind::WarpReduce(op) => Ok(env.warp_reduce(op, args[0])),
        _ => match spec.id {
            ids::KTIME_GET_NS => Ok(env.now_ns()),
            ids::GET_LANE_ID => Ok(env.lane_id()),
            id => env.kfunc(id, args),
        },
    }
}

fn run(prog: &PolicyProgram, ctx: &mut [u8], env: &mut dyn HelperEnv, limits: ExecLimits) -> Result<Outcome, ExecError> {
    let mut m = Machine::new(prog, limits);
    let mut effects = Vec::new();
    loop {
        match m.step(ctx, &mut effects)? {
            Step::Next | Step::Branch { .. } => {}
            Step::Call { helper, args } => {
                let spec = resolve_helper(prog, m.pc, helper)?;
                let ret = dispatch(env, spec, args)?;
                effects.push(Effect::Call { helper, args: [args[0], args[1], args[2]], ret });
                m.finish_call(ret);
            }
            Step::Exit(r0) => {
                return Ok(Outcome {
                    ret: r0 as i64,
                    effects,
                    insns_executed: m.insns,
                    helper_calls: m.helper_calls,
                    mem_ops: m.mem_ops,
                })
            }
        }
    }
}

/// Execute a verified program.
pub fn interpret(prog: &PolicyProgram, ctx: &mut [u8], env: &mut dyn HelperEnv) -> Result<Outcome, ExecError> {
    if !prog.is_verified() {
        return Err(ExecError::NotVerified);
    }
    run(prog, ctx, env, ExecLimits::default())
}

/// Reference execution without the verification requirement. Memory and jump
/// safety are checked dynamically and termination is enforced by `limits`.
pub fn interpret_unverified(
    prog: &PolicyProgram,
    ctx: &mut [u8],
    env: &mut dyn HelperEnv,
    limits: ExecLimits,
) -> Result<Outcome, ExecError> {
    run(prog, ctx, env, limits)
}
