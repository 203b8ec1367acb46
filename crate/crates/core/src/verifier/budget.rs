//! Worst-case resource accounting.

use serde::{Deserialize, Serialize};

use crate::ir::helpers;
use crate::ir::isa::Opcode;
use crate::ir::PolicyProgram;

use super::cfg::{self, Analysis};
use super::HookBudget;

/// Upper bounds on one execution. Saturates at `u64::MAX`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorstCase {
    pub instructions: u64,
    pub helper_calls: u64,
    pub memory_ops: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetCheck {
    pub worst: WorstCase,
    pub ok: bool,
}

impl BudgetCheck {
    pub(crate) fn describe(&self, b: &HookBudget) -> String {
        let w = &self.worst;
        let mut parts = Vec::new();
        if w.instructions > b.max_instructions {
            parts.push(format!("instructions {} > {}", w.instructions, b.max_instructions));
        }
        if w.helper_calls > b.max_helper_calls {
            parts.push(format!("helper calls {} > {}", w.helper_calls, b.max_helper_calls));
        }
        if w.memory_ops > b.max_memory_ops {
            parts.push(format!("memory ops {} > {}", w.memory_ops, b.max_memory_ops));
        }
        format!("worst case exceeds budget for {}: {}", b.hook, parts.join(", "))
    }
}

pub(crate) fn budget_of(prog: &PolicyProgram, analysis: &Analysis, budget: &HookBudget) -> BudgetCheck {
    let mut w = WorstCase::default();
    for (pc, insn) in prog.instructions.iter().enumerate() {
        let m = analysis.multiplier(pc);
        w.instructions = w.instructions.saturating_add(m);
        if insn.opcode.is_memory() {
            w.memory_ops = w.memory_ops.saturating_add(m);
        }
        if insn.opcode == Opcode::Call {
            let cost = helpers::helper(insn.imm as u32).map_or(1, |h| h.budget_cost as u64);
            w.helper_calls = w.helper_calls.saturating_add(m.saturating_mul(cost));
        }
    }
    let ok = w.instructions <= budget.max_instructions
        && w.helper_calls <= budget.max_helper_calls
        && w.memory_ops <= budget.max_memory_ops;
    BudgetCheck { worst: w, ok }
}

/// Worst-case counts against `budget`. A program that fails the standard
/// pass has no finite bound and reports saturated counts.
pub fn check_budget(prog: &PolicyProgram, budget: &HookBudget) -> BudgetCheck {
    let schema = crate::ir::context_schema(prog.hook);
    match cfg::standard_pass(prog, &schema).analysis {
        Some(a) => budget_of(prog, &a, budget),
        None => BudgetCheck {
            worst: WorstCase { instructions: u64::MAX, helper_calls: u64::MAX, memory_ops: u64::MAX },
            ok: false,
        },
    }
}
