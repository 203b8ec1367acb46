//! Text assembler and disassembler.
//!
//! One instruction per line, `#` starts a comment, `name:` defines a label.
//! Directives: `.hook <slot>`, `.map <name> <array:N|hash|per_warp> <host|global|sm|adaptive>`,
//! `.agg <sum|min|max|ballot>`. A listing without `.hook` binds to the device
//! `access` hook.
//!
//! ```text
//! .hook access
//!     ldctxdw r6, warp_id
//!     jeq r6, 0, skip
//!     mov r0, 1
//! skip:
//!     exit
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;

use super::helpers::{helper, helper_by_name, AggOp};
use super::isa::{AluOp, Instruction, JmpOp, Opcode, Source, Width, NUM_REGS};
use super::schema::{context_schema, ContextSchema, Hook};
use super::{IrError, MapDecl, PolicyProgram};
use crate::xmaps::{MapKind, Placement};

enum Target {
    Rel(i64),
    Label(String),
}

struct Pending {
    line: usize,
    insn: Instruction,
    target: Option<Target>,
}

pub fn assemble(source: &str) -> Result<PolicyProgram, IrError> {
    let mut hook = Hook::Access;
    let mut schema = context_schema(hook);
    let mut maps = Vec::new();
    let mut aggregation = AggOp::Sum;
    let mut labels: HashMap<String, usize> = HashMap::new();
    let mut pending: Vec<Pending> = Vec::new();

    for (idx, raw) in source.lines().enumerate() {
        let line = idx + 1;
        let mut text = raw.split('#').next().unwrap_or("").trim();
        while let Some(colon) = label_split(text) {
            let name = text[..colon].trim();
            if labels.insert(name.to_string(), pending.len()).is_some() {
                return Err(perr(line, format!("duplicate label `{name}`")));
            }
            text = text[colon + 1..].trim();
        }
        if text.is_empty() {
            continue;
        }
        if let Some(dir) = text.strip_prefix('.') {
            let words: Vec<&str> = dir.split_whitespace().collect();
            match words.as_slice() {
                ["hook", name] => {
                    hook = Hook::from_name(name).map_err(|e| perr(line, e.to_string()))?;
                    schema = context_schema(hook);
                }
                ["map", name, kind, placement] => maps.push(MapDecl {
                    name: name.to_string(),
                    kind: parse_map_kind(kind).ok_or_else(|| perr(line, format!("bad map kind `{kind}`")))?,
                    placement: Placement::from_name(placement)
                        .ok_or_else(|| perr(line, format!("bad map placement `{placement}`")))?,
                }),
                ["agg", op] => {
                    aggregation =
                        AggOp::from_name(op).ok_or_else(|| perr(line, format!("bad aggregation `{op}`")))?
                }
                _ => return Err(perr(line, format!("bad directive `.{dir}`"))),
            }
            continue;
        }
        pending.push(parse_insn(line, text, &schema, &maps)?);
    }

    let mut instructions = Vec::with_capacity(pending.len());
    for (pc, p) in pending.iter().enumerate() {
        let mut insn = p.insn;
        if let Some(target) = &p.target {
            let off = match target {
                Target::Rel(off) => *off,
                Target::Label(name) => {
                    let dest = *labels
                        .get(name)
                        .ok_or_else(|| perr(p.line, format!("undefined label `{name}`")))?;
                    dest as i64 - pc as i64 - 1
                }
            };
            insn.offset = i16::try_from(off).map_err(|_| perr(p.line, "jump offset out of range".into()))?;
        }
        instructions.push(insn);
    }

    Ok(PolicyProgram { instructions, hook, maps, aggregation, verified: false })
}

fn label_split(text: &str) -> Option<usize> {
    let colon = text.find(':')?;
    let name = &text[..colon];
    let ok = !name.is_empty()
        && !name.starts_with('.')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
        && !text[..colon].contains(char::is_whitespace);
    ok.then_some(colon)
}

fn perr(line: usize, msg: String) -> IrError {
    IrError::Parse { line, msg }
}

fn parse_map_kind(s: &str) -> Option<MapKind> {
    match s {
        "hash" => Some(MapKind::Hash),
        "per_warp" => Some(MapKind::PerWarpAccum),
        _ => {
            let len = s.strip_prefix("array:")?.parse().ok()?;
            Some(MapKind::Array { len })
        }
    }
}

fn map_kind_name(kind: &MapKind) -> String {
    match kind {
        MapKind::Array { len } => format!("array:{len}"),
        MapKind::Hash => "hash".into(),
        MapKind::PerWarpAccum => "per_warp".into(),
    }
}

fn parse_reg(line: usize, s: &str) -> Result<u8, IrError> {
    let digits = s
        .trim()
        .strip_prefix('r')
        .ok_or_else(|| perr(line, format!("expected register, got `{s}`")))?;
    let n: u32 = digits.parse().map_err(|_| perr(line, format!("bad register `{s}`")))?;
    if n as usize >= NUM_REGS {
        return Err(IrError::RegisterRange { line, reg: n });
    }
    Ok(n as u8)
}

fn is_reg(s: &str) -> bool {
    let s = s.trim();
    s.len() > 1 && s.starts_with('r') && s[1..].chars().all(|c| c.is_ascii_digit())
}

fn parse_int(line: usize, s: &str) -> Result<i64, IrError> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let v = if let Some(hex) = body.strip_prefix("0x") {
        i64::from_str_radix(hex, 16)
    } else {
        body.parse::<i64>()
    }
    .map_err(|_| perr(line, format!("bad integer `{s}`")))?;
    Ok(if neg { -v } else { v })
}

fn parse_imm(line: usize, s: &str) -> Result<i32, IrError> {
    let v = parse_int(line, s)?;
    if (i32::MIN as i64..=u32::MAX as i64).contains(&v) {
        Ok(v as u32 as i32)
    } else {
        Err(perr(line, format!("immediate `{s}` does not fit in 32 bits")))
    }
}

/// `[rN+off]` or `[rN-off]`.
fn parse_mem(line: usize, s: &str) -> Result<(u8, i16), IrError> {
    let inner = s
        .trim()
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| perr(line, format!("expected memory operand, got `{s}`")))?;
    let split = inner.find(['+', '-']).unwrap_or(inner.len());
    let reg = parse_reg(line, &inner[..split])?;
    let off = if split < inner.len() { parse_int(line, &inner[split..])? } else { 0 };
    let off = i16::try_from(off).map_err(|_| perr(line, "memory offset out of range".into()))?;
    Ok((reg, off))
}

fn parse_ctx_off(line: usize, s: &str, schema: &ContextSchema) -> Result<i16, IrError> {
    let s = s.trim();
    if let Some(off) = schema.offset_of(s) {
        return Ok(off as i16);
    }
    let v = parse_int(line, s).map_err(|_| perr(line, format!("unknown context field `{s}` for {}", schema.hook)))?;
    i16::try_from(v).map_err(|_| perr(line, "context offset out of range".into()))
}

fn parse_width(suffix: &str) -> Option<Width> {
    Width::ALL.into_iter().find(|w| w.suffix() == suffix)
}

fn expect_args(line: usize, args: &[&str], n: usize, mnemonic: &str) -> Result<(), IrError> {
    if args.len() != n {
        return Err(perr(line, format!("`{mnemonic}` takes {n} operand(s), got {}", args.len())));
    }
    Ok(())
}

fn parse_insn(line: usize, text: &str, schema: &ContextSchema, maps: &[MapDecl]) -> Result<Pending, IrError> {
    let (mnemonic, rest) = match text.find(char::is_whitespace) {
        Some(i) => (&text[..i], text[i..].trim()),
        None => (text, ""),
    };
    let args: Vec<&str> = if rest.is_empty() { Vec::new() } else { rest.split(',').map(str::trim).collect() };
    let done = |insn| Ok(Pending { line, insn, target: None });

    if let Some(op) = AluOp::ALL.into_iter().find(|op| op.mnemonic() == mnemonic) {
        expect_args(line, &args, 2, mnemonic)?;
        let dst = parse_reg(line, args[0])?;
        return if is_reg(args[1]) {
            done(Instruction::alu_reg(op, dst, parse_reg(line, args[1])?))
        } else {
            done(Instruction::alu_imm(op, dst, parse_imm(line, args[1])?))
        };
    }
    if mnemonic == "ja" {
        expect_args(line, &args, 1, mnemonic)?;
        let insn = Instruction::new(Opcode::Jump { op: JmpOp::Ja, src: Source::Imm }, 0, 0, 0, 0);
        return Ok(Pending { line, insn, target: Some(parse_target(line, args[0])?) });
    }
    if let Some(op) = JmpOp::CONDITIONAL.into_iter().find(|op| op.mnemonic() == mnemonic) {
        expect_args(line, &args, 3, mnemonic)?;
        let dst = parse_reg(line, args[0])?;
        let insn = if is_reg(args[1]) {
            Instruction::new(Opcode::Jump { op, src: Source::Reg }, dst, parse_reg(line, args[1])?, 0, 0)
        } else {
            Instruction::new(Opcode::Jump { op, src: Source::Imm }, dst, 0, 0, parse_imm(line, args[1])?)
        };
        return Ok(Pending { line, insn, target: Some(parse_target(line, args[2])?) });
    }
    match mnemonic {
        "exit" => {
            expect_args(line, &args, 0, mnemonic)?;
            return done(Instruction::exit());
        }
        "call" => {
            expect_args(line, &args, 1, mnemonic)?;
            let id = match helper_by_name(args[0]) {
                Some(h) => h.id,
                None => parse_int(line, args[0]).map_err(|_| perr(line, format!("unknown helper `{}`", args[0])))?
                    as u32,
            };
            return done(Instruction::call(id));
        }
        _ => {}
    }
    if let Some(w) = mnemonic.strip_prefix("ldctx").and_then(parse_width) {
        expect_args(line, &args, 2, mnemonic)?;
        let dst = parse_reg(line, args[0])?;
        return done(Instruction::new(Opcode::LoadCtx(w), dst, 0, parse_ctx_off(line, args[1], schema)?, 0));
    }
    if let Some(w) = mnemonic.strip_prefix("stctx").and_then(parse_width) {
        expect_args(line, &args, 2, mnemonic)?;
        let off = parse_ctx_off(line, args[0], schema)?;
        return if is_reg(args[1]) {
            done(Instruction::new(Opcode::StoreCtxReg(w), 0, parse_reg(line, args[1])?, off, 0))
        } else {
            done(Instruction::new(Opcode::StoreCtxImm(w), 0, 0, off, parse_imm(line, args[1])?))
        };
    }
    if let Some(w) = mnemonic.strip_prefix("ldx").and_then(parse_width) {
        expect_args(line, &args, 2, mnemonic)?;
        let dst = parse_reg(line, args[0])?;
        let (base, off) = parse_mem(line, args[1])?;
        return done(Instruction::new(Opcode::LoadStack(w), dst, base, off, 0));
    }
    if let Some(w) = mnemonic.strip_prefix("stx").and_then(parse_width) {
        expect_args(line, &args, 2, mnemonic)?;
        let (base, off) = parse_mem(line, args[0])?;
        return done(Instruction::new(Opcode::StoreStackReg(w), base, parse_reg(line, args[1])?, off, 0));
    }
    if let Some(w) = mnemonic.strip_prefix("st").and_then(parse_width) {
        expect_args(line, &args, 2, mnemonic)?;
        let (base, off) = parse_mem(line, args[0])?;
        return done(Instruction::new(Opcode::StoreStackImm(w), base, 0, off, parse_imm(line, args[1])?));
    }
    if mnemonic == "ldmap" {
        // convenience: `ldmap r1, name` loads the index of a declared map
        expect_args(line, &args, 2, mnemonic)?;
        let dst = parse_reg(line, args[0])?;
        let idx = maps
            .iter()
            .position(|m| m.name == args[1])
            .ok_or_else(|| perr(line, format!("undeclared map `{}`", args[1])))?;
        return done(Instruction::mov_imm(dst, idx as i32));
    }
    Err(IrError::UnknownMnemonic { line, mnemonic: mnemonic.to_string() })
}

fn parse_target(line: usize, s: &str) -> Result<Target, IrError> {
    let s = s.trim();
    if s.starts_with(['+', '-']) || s.chars().all(|c| c.is_ascii_digit()) {
        Ok(Target::Rel(parse_int(line, s)?))
    } else {
        Ok(Target::Label(s.to_string()))
    }
}

fn fmt_off(off: i16) -> String {
    if off < 0 {
        format!("{off}")
    } else {
        format!("+{off}")
    }
}

/// Render one instruction in assembler syntax (numeric offsets, helper names).
pub fn format_insn(insn: &Instruction) -> String {
    let r = |n: u8| format!("r{n}");
    match insn.opcode {
        Opcode::Alu { op, src: Source::Imm } => format!("{} {}, {}", op.mnemonic(), r(insn.dst), insn.imm),
        Opcode::Alu { op, src: Source::Reg } => format!("{} {}, {}", op.mnemonic(), r(insn.dst), r(insn.src)),
        Opcode::LoadStack(w) => format!("ldx{} {}, [r{}{}]", w.suffix(), r(insn.dst), insn.src, fmt_off(insn.offset)),
        Opcode::StoreStackReg(w) => {
            format!("stx{} [r{}{}], {}", w.suffix(), insn.dst, fmt_off(insn.offset), r(insn.src))
        }
        Opcode::StoreStackImm(w) => format!("st{} [r{}{}], {}", w.suffix(), insn.dst, fmt_off(insn.offset), insn.imm),
        Opcode::LoadCtx(w) => format!("ldctx{} {}, {}", w.suffix(), r(insn.dst), insn.offset),
        Opcode::StoreCtxReg(w) => format!("stctx{} {}, {}", w.suffix(), insn.offset, r(insn.src)),
        Opcode::StoreCtxImm(w) => format!("stctx{} {}, {}", w.suffix(), insn.offset, insn.imm),
        Opcode::Jump { op: JmpOp::Ja, .. } => format!("ja {}", fmt_off(insn.offset)),
        Opcode::Jump { op, src: Source::Imm } => {
            format!("{} {}, {}, {}", op.mnemonic(), r(insn.dst), insn.imm, fmt_off(insn.offset))
        }
        Opcode::Jump { op, src: Source::Reg } => {
            format!("{} {}, {}, {}", op.mnemonic(), r(insn.dst), r(insn.src), fmt_off(insn.offset))
        }
        Opcode::Call => match helper(insn.imm as u32) {
            Some(h) => format!("call {}", h.name),
            None => format!("call {}", insn.imm),
        },
        Opcode::Exit => "exit".to_string(),
    }
}

pub fn disassemble(prog: &PolicyProgram) -> String {
    let mut out = String::new();
    let _ = writeln!(out, ".hook {}", prog.hook.name());
    for m in &prog.maps {
        let _ = writeln!(out, ".map {} {} {}", m.name, map_kind_name(&m.kind), m.placement.name());
    }
    let _ = writeln!(out, ".agg {}", prog.aggregation.name());
    for insn in &prog.instructions {
        let _ = writeln!(out, "    {}", format_insn(insn));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_program() {
        let p = assemble("mov r0, 0\nexit").unwrap();
        assert_eq!(p.instructions, vec![Instruction::mov_imm(0, 0), Instruction::exit()]);
        assert!(!p.is_verified());
    }

    #[test]
    fn resolves_relative_jump() {
        let p = assemble("mov r0, 7\njeq r1, 0, +1\nmov r0, 3\nexit").unwrap();
        assert_eq!(p.len(), 4);
        let j = p.instructions[1];
        assert_eq!(j.opcode, Opcode::Jump { op: JmpOp::Eq, src: Source::Imm });
        assert_eq!(j.offset, 1);
        assert_eq!(j.jump_target(1), 3);
    }

    #[test]
    fn resolves_labels_forward_and_back() {
        let src = "
            mov r6, 0
        top:
            add r6, 1
            jlt r6, 8, top
            ja out
            mov r0, 1
        out: mov r0, 0
            exit";
        let p = assemble(src).unwrap();
        assert_eq!(p.instructions[2].offset, -2);
        assert_eq!(p.instructions[3].offset, 1);
    }

    #[test]
    fn register_out_of_range() {
        assert_eq!(assemble("mov r99, 0"), Err(IrError::RegisterRange { line: 1, reg: 99 }));
    }

    #[test]
    fn unknown_mnemonic_reports_line() {
        let err = assemble("mov r0, 0\nfrobnicate r1\nexit").unwrap_err();
        assert_eq!(err, IrError::UnknownMnemonic { line: 2, mnemonic: "frobnicate".into() });
    }

    #[test]
    fn parse_error_reports_line() {
        assert!(matches!(assemble("exit\njeq r1, 0, nowhere"), Err(IrError::Parse { line: 2, .. })));
        assert!(matches!(assemble("add r1"), Err(IrError::Parse { line: 1, .. })));
    }

    #[test]
    fn context_fields_resolve_against_hook() {
        let p = assemble(".hook gpu_access\nldctxdw r2, region_id\nstctxdw decision, 1\nmov r0, 0\nexit").unwrap();
        let s = context_schema(Hook::GpuAccess);
        assert_eq!(p.instructions[0].offset as u16, s.offset_of("region_id").unwrap());
        assert_eq!(p.instructions[1].offset as u16, s.decision().offset);
        assert_eq!(p.hook, Hook::GpuAccess);
    }

    #[test]
    fn directives() {
        let p = assemble(".hook enter\n.map hist per_warp sm\n.agg max\nldmap r1, hist\nexit").unwrap();
        assert_eq!(p.maps.len(), 1);
        assert_eq!(p.maps[0].kind, MapKind::PerWarpAccum);
        assert_eq!(p.maps[0].placement, Placement::SmLocal);
        assert_eq!(p.aggregation, AggOp::Max);
        assert_eq!(p.instructions[0], Instruction::mov_imm(1, 0));
    }

    #[test]
    fn disassembly_reassembles() {
        let src = ".hook access\n.map m array:16 global\nldctxdw r2, lane_addr\ncall warp_reduce_min\nstxdw [r10-8], r0\nldxdw r3, [r10-8]\nstdw [r10-16], -5\njsgt r3, r2, +1\nexit\nmov r0, 0\nexit";
        let p = assemble(src).unwrap();
        let q = assemble(&disassemble(&p)).unwrap();
        assert_eq!(p, q);
    }
}
