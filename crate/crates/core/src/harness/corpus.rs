//! Labeled verifier corpus. Each `.gpa` file starts with a header line
//! `# expect: ACCEPT` or `# expect: REJECT <RULE>`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::ir::{assemble, binary, PolicyProgram};
use crate::par::Exec;
use crate::verifier::{verify, verify_default, HookBudget, Rule, VerifierReport};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus directory {0} not found")]
    Missing(PathBuf),
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}: missing or malformed `# expect:` header")]
    Header(PathBuf),
    #[error("{path}: {msg}")]
    Program { path: PathBuf, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Expectation {
    Accept,
    Reject(Rule),
}

impl Expectation {
    pub fn parse(source: &str) -> Option<Expectation> {
        let line = source.lines().map(str::trim).find(|l| l.starts_with('#') && l.contains("expect:"))?;
        let mut words = line.split_once("expect:")?.1.split_whitespace();
        match words.next()? {
            "ACCEPT" => Some(Expectation::Accept),
            "REJECT" => words.next()?.parse().ok().map(Expectation::Reject),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseResult {
    pub path: PathBuf,
    pub expect: Expectation,
    pub accepted: bool,
    pub rule: Option<Rule>,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CorpusSummary {
    pub cases: Vec<CaseResult>,
    pub accept_cases: usize,
    pub reject_cases: usize,
    /// Rules exercised by REJECT cases.
    pub rules: BTreeSet<Rule>,
}

impl CorpusSummary {
    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| !c.passed)
    }

    pub fn all_passed(&self) -> bool {
        self.failures().next().is_none()
    }
}

/// Corpus shipped with the crate.
pub fn default_dir() -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/corpus"))
}

/// Load text assembly or, for `.gpb` files, the binary encoding.
pub fn load_program(path: &Path) -> Result<PolicyProgram, CorpusError> {
    let io = |source| CorpusError::Io { path: path.into(), source };
    let prog = if path.extension().is_some_and(|e| e == "gpb") {
        binary::decode(&std::fs::read(path).map_err(io)?)
    } else {
        assemble(&std::fs::read_to_string(path).map_err(io)?)
    };
    prog.map_err(|e| CorpusError::Program { path: path.into(), msg: e.to_string() })
}

/// Verify against `hook`'s schema and budget instead of the declared hook.
pub fn verify_as(prog: &mut PolicyProgram, hook: Option<crate::ir::Hook>) -> VerifierReport {
    match hook {
        None => verify_default(prog),
        Some(h) => verify(prog, &crate::ir::context_schema(h), &HookBudget::default_for(h)),
    }
}

fn check_file(path: &Path) -> Result<CaseResult, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.into(), source })?;
    let expect = Expectation::parse(&text).ok_or_else(|| CorpusError::Header(path.into()))?;
    let mut prog = assemble(&text).map_err(|e| CorpusError::Program { path: path.into(), msg: e.to_string() })?;
    let report = verify_default(&mut prog);
    let passed = match expect {
        Expectation::Accept => report.accepted(),
        Expectation::Reject(rule) => !report.accepted() && report.rule() == Some(rule),
    };
    Ok(CaseResult { path: path.into(), expect, accepted: report.accepted(), rule: report.rule(), passed })
}

pub fn corpus_check(dir: &Path) -> Result<CorpusSummary, CorpusError> {
    corpus_check_with(dir, Exec::default())
}

pub fn corpus_check_with(dir: &Path, exec: Exec) -> Result<CorpusSummary, CorpusError> {
    if !dir.is_dir() {
        return Err(CorpusError::Missing(dir.into()));
    }
    let entries = std::fs::read_dir(dir).map_err(|source| CorpusError::Io { path: dir.into(), source })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "gpa"))
        .collect();
    files.sort();
    let cases = exec.map(&files, |p| check_file(p)).into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut s = CorpusSummary { cases, ..Default::default() };
    for c in &s.cases {
        match c.expect {
            Expectation::Accept => s.accept_cases += 1,
            Expectation::Reject(r) => {
                s.reject_cases += 1;
                s.rules.insert(r);
            }
        }
    }
    Ok(s)
}
