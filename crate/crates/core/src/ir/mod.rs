//! Restricted policy bytecode: instruction set, hook context layouts,
//! helper table, text assembler, binary container and scalar interpreter.

pub mod asm;
pub mod binary;
pub mod helpers;
pub mod interp;
pub mod isa;
pub mod schema;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use asm::{assemble, disassemble};
pub use helpers::{AggOp, HelperSpec};
pub use interp::{interpret, interpret_unverified, Effect, ExecError, ExecLimits, HelperEnv, LocalMaps, Outcome};
pub use isa::{AluOp, Instruction, JmpOp, Opcode, Source, Width};
pub use schema::{context_schema, ContextBuf, ContextSchema, Domain, Hook, ProgramType, Uniformity};

use crate::xmaps::{MapKind, Placement};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IrError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: unknown mnemonic `{mnemonic}`")]
    UnknownMnemonic { line: usize, mnemonic: String },
    #[error("line {line}: register r{reg} out of range (r0-r10)")]
    RegisterRange { line: usize, reg: u32 },
    #[error("unknown hook `{0}`")]
    UnknownHook(String),
    #[error("instruction {index}: bad opcode {byte:#04x}")]
    BadOpcode { index: usize, byte: u8 },
    #[error("bad program image: {0}")]
    BadImage(String),
}

/// A map the program refers to by index (`r1` of the map helpers).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapDecl {
    pub name: String,
    pub kind: MapKind,
    pub placement: Placement,
}

/// Bytecode plus hook binding: the deployable unit of policy.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyProgram {
    pub instructions: Vec<Instruction>,
    pub hook: Hook,
    pub maps: Vec<MapDecl>,
    /// Warp aggregation for lane contributions (device programs).
    pub aggregation: AggOp,
    #[serde(skip)]
    verified: bool,
}

impl PolicyProgram {
    pub fn new(instructions: Vec<Instruction>, hook: Hook) -> Self {
        PolicyProgram { instructions, hook, maps: Vec::new(), aggregation: AggOp::Sum, verified: false }
    }

    pub fn hook_type(&self) -> ProgramType {
        self.hook.program_type()
    }

    pub fn handler_name(&self) -> &'static str {
        self.hook.name()
    }

    pub fn is_verified(&self) -> bool {
        self.verified
    }

    pub(crate) fn mark_verified(&mut self) {
        self.verified = true;
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn map_index(&self, name: &str) -> Option<usize> {
        self.maps.iter().position(|m| m.name == name)
    }
}
