//! Instruction set of the policy register machine.
//!
//! The encoding follows classic eBPF: every instruction is 8 bytes
//! (`opcode`, `dst | src << 4`, `offset: i16`, `imm: i32`, little endian).
//! Context accesses reuse the legacy absolute-addressing mode (`0x20`), and
//! stack accesses use the memory mode (`0x60`) with `r10` as the only base.

use serde::{Deserialize, Serialize};

use super::IrError;

/// Number of architectural registers (`r0`..=`r10`).
pub const NUM_REGS: usize = 11;
/// Read-only frame pointer register.
pub const FRAME_REG: u8 = 10;
/// Stack size in bytes; valid stack offsets are `-STACK_SIZE..0`.
pub const STACK_SIZE: usize = 512;
/// Size of one encoded instruction.
pub const INSN_SIZE: usize = 8;

const CLS_LD: u8 = 0x00;
const CLS_LDX: u8 = 0x01;
const CLS_ST: u8 = 0x02;
const CLS_STX: u8 = 0x03;
const CLS_JMP: u8 = 0x05;
const CLS_ALU64: u8 = 0x07;

const MODE_ABS: u8 = 0x20;
const MODE_MEM: u8 = 0x60;
const SRC_REG: u8 = 0x08;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AluOp {
    Add,
    Sub,
    Mul,
    Div,
    Mod,
    And,
    Or,
    Xor,
    Lsh,
    Rsh,
    Mov,
}

impl AluOp {
    pub const ALL: [AluOp; 11] = [
        AluOp::Add,
        AluOp::Sub,
        AluOp::Mul,
        AluOp::Div,
        AluOp::Mod,
        AluOp::And,
        AluOp::Or,
        AluOp::Xor,
        AluOp::Lsh,
        AluOp::Rsh,
        AluOp::Mov,
    ];

    fn bits(self) -> u8 {
        match self {
            AluOp::Add => 0x00,
            AluOp::Sub => 0x10,
            AluOp::Mul => 0x20,
            AluOp::Div => 0x30,
            AluOp::Or => 0x40,
            AluOp::And => 0x50,
            AluOp::Lsh => 0x60,
            AluOp::Rsh => 0x70,
            AluOp::Mod => 0x90,
            AluOp::Xor => 0xa0,
            AluOp::Mov => 0xb0,
        }
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            AluOp::Add => "add",
            AluOp::Sub => "sub",
            AluOp::Mul => "mul",
            AluOp::Div => "div",
            AluOp::Mod => "mod",
            AluOp::And => "and",
            AluOp::Or => "or",
            AluOp::Xor => "xor",
            AluOp::Lsh => "lsh",
            AluOp::Rsh => "rsh",
            AluOp::Mov => "mov",
        }
    }

    /// 64-bit semantics; division and modulo by zero yield 0.
    pub fn apply(self, a: u64, b: u64) -> u64 {
        match self {
            AluOp::Add => a.wrapping_add(b),
            AluOp::Sub => a.wrapping_sub(b),
            AluOp::Mul => a.wrapping_mul(b),
            AluOp::Div => a.checked_div(b).unwrap_or(0),
            AluOp::Mod => a.checked_rem(b).unwrap_or(0),
            AluOp::And => a & b,
            AluOp::Or => a | b,
            AluOp::Xor => a ^ b,
            AluOp::Lsh => a.wrapping_shl((b & 63) as u32),
            AluOp::Rsh => a.wrapping_shr((b & 63) as u32),
            AluOp::Mov => b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JmpOp {
    Ja,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Slt,
    Sle,
    Sgt,
    Sge,
}

impl JmpOp {
    pub const CONDITIONAL: [JmpOp; 10] = [
        JmpOp::Eq,
        JmpOp::Ne,
        JmpOp::Lt,
        JmpOp::Le,
        JmpOp::Gt,
        JmpOp::Ge,
        JmpOp::Slt,
        JmpOp::Sle,
        JmpOp::Sgt,
        JmpOp::Sge,
    ];

    fn bits(self) -> u8 {
        match self {
            JmpOp::Ja => 0x00,
            JmpOp::Eq => 0x10,
            JmpOp::Gt => 0x20,
            JmpOp::Ge => 0x30,
            JmpOp::Ne => 0x50,
            JmpOp::Sgt => 0x60,
            JmpOp::Sge => 0x70,
            JmpOp::Lt => 0xa0,
            JmpOp::Le => 0xb0,
            JmpOp::Slt => 0xc0,
            JmpOp::Sle => 0xd0,
        }
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            JmpOp::Ja => "ja",
            JmpOp::Eq => "jeq",
            JmpOp::Ne => "jne",
            JmpOp::Lt => "jlt",
            JmpOp::Le => "jle",
            JmpOp::Gt => "jgt",
            JmpOp::Ge => "jge",
            JmpOp::Slt => "jslt",
            JmpOp::Sle => "jsle",
            JmpOp::Sgt => "jsgt",
            JmpOp::Sge => "jsge",
        }
    }

    pub fn taken(self, a: u64, b: u64) -> bool {
        let (sa, sb) = (a as i64, b as i64);
        match self {
            JmpOp::Ja => true,
            JmpOp::Eq => a == b,
            JmpOp::Ne => a != b,
            JmpOp::Lt => a < b,
            JmpOp::Le => a <= b,
            JmpOp::Gt => a > b,
            JmpOp::Ge => a >= b,
            JmpOp::Slt => sa < sb,
            JmpOp::Sle => sa <= sb,
            JmpOp::Sgt => sa > sb,
            JmpOp::Sge => sa >= sb,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Width {
    B,
    H,
    W,
    DW,
}

impl Width {
    pub const ALL: [Width; 4] = [Width::B, Width::H, Width::W, Width::DW];

    pub fn bytes(self) -> usize {
        match self {
            Width::B => 1,
            Width::H => 2,
            Width::W => 4,
            Width::DW => 8,
        }
    }

    pub fn from_bytes(n: usize) -> Option<Width> {
        match n {
            1 => Some(Width::B),
            2 => Some(Width::H),
            4 => Some(Width::W),
            8 => Some(Width::DW),
            _ => None,
        }
    }

    fn bits(self) -> u8 {
        match self {
            Width::W => 0x00,
            Width::H => 0x08,
            Width::B => 0x10,
            Width::DW => 0x18,
        }
    }

    fn from_bits(b: u8) -> Width {
        match b & 0x18 {
            0x00 => Width::W,
            0x08 => Width::H,
            0x10 => Width::B,
            _ => Width::DW,
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            Width::B => "b",
            Width::H => "h",
            Width::W => "w",
            Width::DW => "dw",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    Imm,
    Reg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Opcode {
    Alu { op: AluOp, src: Source },
    /// `dst = *(width *)(r10 + offset)`
    LoadStack(Width),
    /// `*(width *)(r10 + offset) = src`
    StoreStackReg(Width),
    /// `*(width *)(r10 + offset) = imm`
    StoreStackImm(Width),
    /// `dst = ctx[offset..offset + width]`
    LoadCtx(Width),
    StoreCtxReg(Width),
    StoreCtxImm(Width),
    Jump { op: JmpOp, src: Source },
    Call,
    Exit,
}

impl Opcode {
    pub fn to_byte(self) -> u8 {
        let srcbit = |s: Source| if s == Source::Reg { SRC_REG } else { 0 };
        match self {
            Opcode::Alu { op, src } => CLS_ALU64 | op.bits() | srcbit(src),
            Opcode::LoadStack(w) => CLS_LDX | MODE_MEM | w.bits(),
            Opcode::StoreStackReg(w) => CLS_STX | MODE_MEM | w.bits(),
            Opcode::StoreStackImm(w) => CLS_ST | MODE_MEM | w.bits(),
            Opcode::LoadCtx(w) => CLS_LD | MODE_ABS | w.bits(),
            Opcode::StoreCtxReg(w) => CLS_STX | MODE_ABS | w.bits(),
            Opcode::StoreCtxImm(w) => CLS_ST | MODE_ABS | w.bits(),
            Opcode::Jump { op, src } => CLS_JMP | op.bits() | srcbit(src),
            Opcode::Call => CLS_JMP | 0x80,
            Opcode::Exit => CLS_JMP | 0x90,
        }
    }

    pub fn from_byte(b: u8) -> Option<Opcode> {
        let class = b & 0x07;
        let src = if b & SRC_REG != 0 { Source::Reg } else { Source::Imm };
        match class {
            CLS_ALU64 => {
                let op = AluOp::ALL.into_iter().find(|op| op.bits() == b & 0xf0)?;
                Some(Opcode::Alu { op, src })
            }
            CLS_JMP => match b & 0xf0 {
                0x80 if b == 0x85 => Some(Opcode::Call),
                0x90 if b == 0x95 => Some(Opcode::Exit),
                0x00 if b == 0x05 => Some(Opcode::Jump { op: JmpOp::Ja, src: Source::Imm }),
                bits => {
                    let op = JmpOp::CONDITIONAL.into_iter().find(|op| op.bits() == bits)?;
                    Some(Opcode::Jump { op, src })
                }
            },
            CLS_LD | CLS_LDX | CLS_ST | CLS_STX => {
                let w = Width::from_bits(b);
                match (class, b & 0xe0) {
                    (CLS_LDX, MODE_MEM) => Some(Opcode::LoadStack(w)),
                    (CLS_STX, MODE_MEM) => Some(Opcode::StoreStackReg(w)),
                    (CLS_ST, MODE_MEM) => Some(Opcode::StoreStackImm(w)),
                    (CLS_LD, MODE_ABS) => Some(Opcode::LoadCtx(w)),
                    (CLS_STX, MODE_ABS) => Some(Opcode::StoreCtxReg(w)),
                    (CLS_ST, MODE_ABS) => Some(Opcode::StoreCtxImm(w)),
                    _ => None,
                }
            }
            _ => None,
        }
    }

    pub fn is_memory(self) -> bool {
        matches!(
            self,
            Opcode::LoadStack(_)
                | Opcode::StoreStackReg(_)
                | Opcode::StoreStackImm(_)
                | Opcode::LoadCtx(_)
                | Opcode::StoreCtxReg(_)
                | Opcode::StoreCtxImm(_)
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub opcode: Opcode,
    pub dst: u8,
    pub src: u8,
    pub offset: i16,
    pub imm: i32,
}

impl Instruction {
    pub fn new(opcode: Opcode, dst: u8, src: u8, offset: i16, imm: i32) -> Self {
        Instruction { opcode, dst, src, offset, imm }
    }

    pub fn alu_imm(op: AluOp, dst: u8, imm: i32) -> Self {
        Self::new(Opcode::Alu { op, src: Source::Imm }, dst, 0, 0, imm)
    }

    pub fn alu_reg(op: AluOp, dst: u8, src: u8) -> Self {
        Self::new(Opcode::Alu { op, src: Source::Reg }, dst, src, 0, 0)
    }

    pub fn mov_imm(dst: u8, imm: i32) -> Self {
        Self::alu_imm(AluOp::Mov, dst, imm)
    }

    pub fn call(helper: u32) -> Self {
        Self::new(Opcode::Call, 0, 0, 0, helper as i32)
    }

    pub fn exit() -> Self {
        Self::new(Opcode::Exit, 0, 0, 0, 0)
    }

    /// Absolute target of a jump located at `pc`.
    pub fn jump_target(&self, pc: usize) -> i64 {
        pc as i64 + 1 + self.offset as i64
    }

    pub fn encode(&self) -> [u8; INSN_SIZE] {
        let mut out = [0u8; INSN_SIZE];
        out[0] = self.opcode.to_byte();
        out[1] = (self.dst & 0x0f) | (self.src << 4);
        out[2..4].copy_from_slice(&self.offset.to_le_bytes());
        out[4..8].copy_from_slice(&self.imm.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8], index: usize) -> Result<Instruction, IrError> {
        let opcode = Opcode::from_byte(bytes[0]).ok_or(IrError::BadOpcode { index, byte: bytes[0] })?;
        let dst = bytes[1] & 0x0f;
        let src = bytes[1] >> 4;
        if dst as usize >= NUM_REGS || src as usize >= NUM_REGS {
            return Err(IrError::RegisterRange { line: index + 1, reg: dst.max(src) as u32 });
        }
        Ok(Instruction {
            opcode,
            dst,
            src,
            offset: i16::from_le_bytes([bytes[2], bytes[3]]),
            imm: i32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]),
        })
    }
}
