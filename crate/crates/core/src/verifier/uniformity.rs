//! Warp-uniformity dataflow and the checks built on it.

use serde::Serialize;

use crate::ir::helpers::{self, ArgRule, HelperKind, ResultTag};
use crate::ir::isa::{AluOp, Instruction, Opcode, Source, Width, FRAME_REG, NUM_REGS, STACK_SIZE};
use crate::ir::{ContextSchema, PolicyProgram, Uniformity};

use super::cfg::{self, Analysis};
use super::{Rule, Violation};

const SLOTS: usize = STACK_SIZE / 8;

/// Ordered so that `max` is the lattice join.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Tag {
    Uninit,
    Uniform,
    LaneVarying,
}

impl From<Uniformity> for Tag {
    fn from(u: Uniformity) -> Tag {
        match u {
            Uniformity::Uniform => Tag::Uniform,
            Uniformity::LaneVarying => Tag::LaneVarying,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Frame {
    regs: [Tag; NUM_REGS],
    stack: [Tag; SLOTS],
}

impl Frame {
    fn entry() -> Self {
        let mut regs = [Tag::Uninit; NUM_REGS];
        regs[FRAME_REG as usize] = Tag::Uniform;
        Frame { regs, stack: [Tag::Uninit; SLOTS] }
    }

    fn join(&mut self, o: &Frame) -> bool {
        let mut changed = false;
        for (a, b) in self.regs.iter_mut().chain(self.stack.iter_mut()).zip(o.regs.iter().chain(o.stack.iter())) {
            if *b > *a {
                *a = *b;
                changed = true;
            }
        }
        changed
    }
}

/// Per-instruction uniformity of every register on entry to that instruction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UniformityState {
    frames: Vec<Option<Frame>>,
}

impl UniformityState {
    /// Tag of register `reg` before instruction `pc` executes (`Uninit` if unreachable).
    pub fn reg(&self, pc: usize, reg: u8) -> Tag {
        self.frames[pc].as_ref().map_or(Tag::Uninit, |f| f.regs[reg as usize])
    }

    /// Number of instructions covered.
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn slots_of(insn: &Instruction, w: Width) -> std::ops::RangeInclusive<usize> {
    let (s, e) = cfg::stack_slot(insn, w).expect("stack bounds checked by the standard pass");
    s / 8..=(e - 1) / 8
}

fn call_result(prog: &PolicyProgram, analysis: &Analysis, pc: usize, f: &Frame) -> Tag {
    let Some(spec) = helpers::helper(prog.instructions[pc].imm as u32) else {
        return Tag::LaneVarying;
    };
    match spec.result {
        ResultTag::Uniform => Tag::Uniform,
        ResultTag::LaneVarying => Tag::LaneVarying,
        ResultTag::MapLookup => {
            let placement_ok = analysis
                .call_maps
                .get(&pc)
                .is_some_and(|&m| prog.maps[m].placement.device_reads_uniform());
            if placement_ok && f.regs[2] <= Tag::Uniform && f.regs[1] <= Tag::Uniform {
                Tag::Uniform
            } else {
                Tag::LaneVarying
            }
        }
    }
}

fn transfer(prog: &PolicyProgram, schema: &ContextSchema, analysis: &Analysis, pc: usize, f: &mut Frame) {
    let insn = prog.instructions[pc];
    let (d, s) = (insn.dst as usize, insn.src as usize);
    match insn.opcode {
        Opcode::Alu { op, src } => {
            let b = if src == Source::Reg { f.regs[s] } else { Tag::Uniform };
            f.regs[d] = if op == AluOp::Mov { b } else { f.regs[d].max(b) };
        }
        Opcode::LoadCtx(w) => {
            f.regs[d] = schema.field_at(insn.offset as i64, w.bytes()).map_or(Tag::LaneVarying, |fl| fl.uniformity.into());
        }
        Opcode::LoadStack(w) => {
            f.regs[d] = slots_of(&insn, w).map(|i| f.stack[i]).max().unwrap_or(Tag::Uninit);
        }
        Opcode::StoreStackReg(w) | Opcode::StoreStackImm(w) => {
            let v = if matches!(insn.opcode, Opcode::StoreStackReg(_)) { f.regs[s] } else { Tag::Uniform };
            let slots = slots_of(&insn, w);
            let whole = w == Width::DW && insn.offset % 8 == 0;
            for i in slots {
                f.stack[i] = if whole { v } else { f.stack[i].max(v) };
            }
        }
        Opcode::Call => {
            let r0 = call_result(prog, analysis, pc, f);
            f.regs[0] = r0;
            for r in 1..=5 {
                f.regs[r] = Tag::Uninit;
            }
        }
        _ => {}
    }
}

pub(crate) fn analyze(prog: &PolicyProgram, schema: &ContextSchema, analysis: &Analysis) -> UniformityState {
    let n = prog.len();
    let mut frames: Vec<Option<Frame>> = vec![None; n];
    frames[0] = Some(Frame::entry());
    let mut work = vec![0usize];
    while let Some(pc) = work.pop() {
        let mut f = frames[pc].clone().expect("queued pcs have a state");
        transfer(prog, schema, analysis, pc, &mut f);
        for &t in &analysis.succs[pc] {
            match &mut frames[t] {
                slot @ None => {
                    *slot = Some(f.clone());
                    work.push(t);
                }
                Some(existing) => {
                    if existing.join(&f) {
                        work.push(t);
                    }
                }
            }
        }
    }
    UniformityState { frames }
}

/// Uniformity of every register at every instruction. Fails with the
/// standard-pass violations if the program is not structurally valid.
pub fn uniformity_analysis(prog: &PolicyProgram, schema: &ContextSchema) -> Result<UniformityState, Vec<Violation>> {
    let std = cfg::standard_pass(prog, schema);
    match std.analysis {
        Some(a) => Ok(analyze(prog, schema, &a)),
        None => Err(std.violations),
    }
}

pub(crate) fn uniformity_pass(
    prog: &PolicyProgram,
    schema: &ContextSchema,
    analysis: &Analysis,
    state: &UniformityState,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let lv = |pc: usize, r: u8| state.reg(pc, r) == Tag::LaneVarying;
    for (pc, insn) in prog.instructions.iter().enumerate() {
        if state.frames[pc].is_none() {
            continue;
        }
        match insn.opcode {
            Opcode::Jump { op, src } if op != crate::ir::JmpOp::Ja => {
                let varying = lv(pc, insn.dst) || (src == Source::Reg && lv(pc, insn.src));
                if varying {
                    if analysis.latches.contains(&pc) {
                        out.push(Violation::new(pc, Rule::UniformLoopBound, "loop bound or counter is lane-varying"));
                    } else {
                        out.push(Violation::new(pc, Rule::UniformBranch, "branch condition is lane-varying"));
                    }
                }
            }
            Opcode::StoreCtxReg(w) if lv(pc, insn.src) => {
                let name = schema.field_at(insn.offset as i64, w.bytes()).map_or("?", |f| f.name);
                out.push(Violation::new(pc, Rule::UniformSideEffect, format!("lane-varying value written to {name}")));
            }
            Opcode::Exit if lv(pc, 0) => {
                out.push(Violation::new(pc, Rule::UniformReturn, "return value is lane-varying"));
            }
            Opcode::Call => {
                let Some(spec) = helpers::helper(insn.imm as u32) else { continue };
                for (i, rule) in spec.args.iter().enumerate() {
                    let r = i as u8 + 1;
                    if !lv(pc, r) {
                        continue;
                    }
                    match rule {
                        ArgRule::MapIndex | ArgRule::MapKey => out.push(Violation::new(
                            pc,
                            Rule::UniformMapKey,
                            format!("{} key argument r{r} is lane-varying", spec.name),
                        )),
                        ArgRule::UniformEffect => out.push(Violation::new(
                            pc,
                            Rule::UniformSideEffect,
                            format!("{} argument r{r} is lane-varying", spec.name),
                        )),
                        ArgRule::Any | ArgRule::AtomicAddr => {}
                    }
                }
            }
            _ => {}
        }
    }
    out
}

pub(crate) fn forbidden_pass(prog: &PolicyProgram, state: Option<&UniformityState>) -> Vec<Violation> {
    let mut out = Vec::new();
    for (pc, insn) in prog.instructions.iter().enumerate() {
        if insn.opcode != Opcode::Call {
            continue;
        }
        let Some(spec) = helpers::helper(insn.imm as u32) else { continue };
        match spec.kind {
            HelperKind::Barrier => {
                out.push(Violation::new(pc, Rule::ForbiddenSync, format!("{} is a GPU-wide synchronization primitive", spec.name)))
            }
            HelperKind::Atomic => {
                let addr = spec.args.iter().position(|a| *a == ArgRule::AtomicAddr).unwrap_or(0) as u8 + 1;
                if state.is_some_and(|s| s.reg(pc, addr) == Tag::LaneVarying) {
                    out.push(Violation::new(pc, Rule::NonUniformAtomic, format!("{} address r{addr} is lane-varying", spec.name)));
                }
            }
            _ => {}
        }
    }
    out
}
