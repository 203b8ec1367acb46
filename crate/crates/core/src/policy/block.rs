//! should_try_steal programs for the block scheduler.

use super::{Params, PolicyError, PolicyKind};
use crate::block::BlockKernel;

/// Default LatencyBudget: a fifth of the balanced per-worker share.
pub fn default_budget_us(kernel: &BlockKernel) -> u64 {
    (kernel.total_cost() / kernel.workers as u64 / 5).max(1)
}

/// LatencyBudget admits a steal only while the worker's stolen work,
/// including the candidate unit, stays within the budget.
pub fn steal_src(kind: PolicyKind, p: &Params) -> Result<String, PolicyError> {
    let body = match kind {
        PolicyKind::Fixed => "    mov r0, 0\n".to_string(),
        PolicyKind::Greedy => "    mov r0, 1\n".to_string(),
        PolicyKind::MaxSteals => {
            let cap = p.positive("cap", None)?;
            format!("    ldctxdw r1, steals_performed\n    mov r0, 0\n    jge r1, {cap}, +1\n    mov r0, 1\n")
        }
        PolicyKind::LatencyBudget => {
            let b = p.positive("budget_us", None)?;
            format!(
                "    ldctxdw r1, stolen_work_us\n    ldctxdw r2, victim_tail_cost_us\n    add r1, r2\n    mov r0, 0\n    jgt r1, {b}, +1\n    mov r0, 1\n"
            )
        }
        _ => unreachable!("not a block policy"),
    };
    for key in ["cap", "budget_us"] {
        if let Some(v) = p.get(key) {
            if v.trim().parse::<i64>().map_or(true, |n| n > i32::MAX as i64) {
                return Err(PolicyError::Param { key: key.into(), msg: format!("`{v}` out of range") });
            }
        }
    }
    Ok(format!(".hook should_try_steal\n{body}    exit\n"))
}
