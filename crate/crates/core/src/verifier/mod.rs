//! Load-time verifier.
//!
//! Four passes run in order and verification stops after the first pass that
//! finds anything:
//!
//! 1. standard safety: encoding, jumps, termination, initialized reads,
//!    stack/context bounds, helper availability, bounded loops;
//! 2. warp uniformity (device programs only);
//! 3. forbidden primitives: barriers and lane-varying atomics;
//! 4. worst-case resource budget.

mod budget;
mod cfg;
mod uniformity;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ir::{ContextSchema, Domain, Hook, PolicyProgram};

pub use budget::{check_budget, BudgetCheck, WorstCase};
pub use uniformity::{uniformity_analysis, Tag, UniformityState};

macro_rules! rules {
    ($($variant:ident => $name:literal),* $(,)?) => {
        /// Rule identifiers reported by the verifier.
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum Rule {
            $($variant),*
        }

        impl Rule {
            pub const ALL: &'static [Rule] = &[$(Rule::$variant),*];

            pub fn as_str(self) -> &'static str {
                match self {
                    $(Rule::$variant => $name),*
                }
            }
        }
    };
}

rules! {
    SchemaMismatch => "SCHEMA_MISMATCH",
    BadInsn => "BAD_INSN",
    BadJump => "BAD_JUMP",
    NoExit => "NO_EXIT",
    Uninit => "UNINIT",
    OobAccess => "OOB_ACCESS",
    CtxWrite => "CTX_WRITE",
    UnknownHelper => "UNKNOWN_HELPER",
    HelperDomain => "HELPER_DOMAIN",
    BadMap => "BAD_MAP",
    UnboundedLoop => "UNBOUNDED_LOOP",
    Irreducible => "IRREDUCIBLE",
    UniformBranch => "UNIFORM_BRANCH",
    UniformLoopBound => "UNIFORM_LOOP_BOUND",
    UniformMapKey => "UNIFORM_MAP_KEY",
    UniformSideEffect => "UNIFORM_SIDE_EFFECT",
    UniformReturn => "UNIFORM_RETURN",
    ForbiddenSync => "FORBIDDEN_SYNC",
    NonUniformAtomic => "NON_UNIFORM_ATOMIC",
    Budget => "BUDGET",
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Rule {
    type Err = String;

    fn from_str(s: &str) -> Result<Rule, String> {
        Rule::ALL.iter().copied().find(|r| r.as_str() == s).ok_or_else(|| format!("unknown rule `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub index: usize,
    pub rule: Rule,
    pub message: String,
}

impl Violation {
    pub(crate) fn new(index: usize, rule: Rule, message: impl Into<String>) -> Self {
        Violation { index, rule, message: message.into() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Accept,
    Reject,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Accept => "ACCEPT",
            Verdict::Reject => "REJECT",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierReport {
    pub verdict: Verdict,
    pub violations: Vec<Violation>,
    /// Present when the budget pass ran.
    pub worst_case: Option<WorstCase>,
}

impl VerifierReport {
    fn from_violations(violations: Vec<Violation>, worst_case: Option<WorstCase>) -> Self {
        let verdict = if violations.is_empty() { Verdict::Accept } else { Verdict::Reject };
        VerifierReport { verdict, violations, worst_case }
    }

    pub fn accepted(&self) -> bool {
        self.verdict == Verdict::Accept
    }

    /// Rule of the first violation.
    pub fn rule(&self) -> Option<Rule> {
        self.violations.first().map(|v| v.rule)
    }
}

impl fmt::Display for VerifierReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "verdict {}", self.verdict.as_str())?;
        for v in &self.violations {
            writeln!(f, "violation {} {} {}", v.index, v.rule, v.message)?;
        }
        if let Some(w) = &self.worst_case {
            writeln!(f, "worst_case instructions={} helper_calls={} memory_ops={}", w.instructions, w.helper_calls, w.memory_ops)?;
        }
        Ok(())
    }
}

/// Per-hook worst-case execution limits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HookBudget {
    pub hook: Hook,
    pub max_instructions: u64,
    pub max_helper_calls: u64,
    pub max_memory_ops: u64,
}

impl HookBudget {
    pub fn default_for(hook: Hook) -> Self {
        match hook.domain() {
            Domain::Device => HookBudget { hook, max_instructions: 128, max_helper_calls: 8, max_memory_ops: 16 },
            _ => HookBudget { hook, max_instructions: 4096, max_helper_calls: 64, max_memory_ops: 256 },
        }
    }
}

/// Run all passes without touching the program.
pub fn check(prog: &PolicyProgram, schema: &ContextSchema, budget: &HookBudget) -> VerifierReport {
    if schema.hook != prog.hook {
        let msg = format!("program is bound to {} but schema is for {}", prog.hook, schema.hook);
        return VerifierReport::from_violations(vec![Violation::new(0, Rule::SchemaMismatch, msg)], None);
    }
    let std = cfg::standard_pass(prog, schema);
    if !std.violations.is_empty() {
        return VerifierReport::from_violations(std.violations, None);
    }
    let analysis = std.analysis.expect("analysis present when the standard pass is clean");

    let device = prog.hook.domain() == Domain::Device;
    let state = device.then(|| uniformity::analyze(prog, schema, &analysis));
    if let Some(state) = &state {
        let v = uniformity::uniformity_pass(prog, schema, &analysis, state);
        if !v.is_empty() {
            return VerifierReport::from_violations(v, None);
        }
    }

    let v = uniformity::forbidden_pass(prog, state.as_ref());
    if !v.is_empty() {
        return VerifierReport::from_violations(v, None);
    }

    let result = budget::budget_of(prog, &analysis, budget);
    let mut v = Vec::new();
    if !result.ok {
        v.push(Violation::new(0, Rule::Budget, result.describe(budget)));
    }
    VerifierReport::from_violations(v, Some(result.worst))
}

/// Verify and, on acceptance, mark the program as verified.
pub fn verify(prog: &mut PolicyProgram, schema: &ContextSchema, budget: &HookBudget) -> VerifierReport {
    let report = check(prog, schema, budget);
    if report.accepted() {
        prog.mark_verified();
    }
    report
}

/// Verify against the hook's own schema and default budget.
pub fn verify_default(prog: &mut PolicyProgram) -> VerifierReport {
    let schema = crate::ir::context_schema(prog.hook);
    let budget = HookBudget::default_for(prog.hook);
    verify(prog, &schema, &budget)
}

#[cfg(test)]
mod tests;
