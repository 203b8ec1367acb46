//! `gpux`: run scenarios, verify policy programs, check the corpus, run
//! observability tools and generate traces.
//!
//! Exit codes: 0 ok, 1 usage, 2 verification failure, 3 scenario error.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use gpux_core::harness::corpus::{corpus_check, default_dir, load_program, verify_as};
use gpux_core::harness::{gen_trace, run_scenario, run_tool, Format, GenParams, Pattern, Scenario, ScenarioError, Tool};
use gpux_core::ir::{binary, disassemble, Hook};
use gpux_core::policy::{parse_policy_file, parse_u64, PolicyError};

const EXIT_USAGE: u8 = 1;
const EXIT_VERIFY: u8 = 2;
const EXIT_SCENARIO: u8 = 3;

#[derive(Parser)]
#[command(name = "gpux", version, about = "Policy simulator for GPU memory, scheduling and device hooks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and print its metrics report.
    Run {
        scenario: PathBuf,
        /// Extra policy files, attached after the scenario's own policies.
        #[arg(long = "policy")]
        policies: Vec<PathBuf>,
        /// json or csv.
        #[arg(long, default_value = "json")]
        format: String,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the event log (TSV) here.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Verify a policy program (.gpa text or .gpb binary).
    Verify {
        program: PathBuf,
        /// Verify against this hook instead of the program's own.
        #[arg(long)]
        hook: Option<String>,
        /// Write the verified program in binary form.
        #[arg(long)]
        emit: Option<PathBuf>,
    },
    /// Check the labeled verifier corpus.
    Corpus {
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Run an observability tool over a scenario.
    Tool {
        /// kernelretsnoop, threadhist or launchlate.
        name: String,
        scenario: PathBuf,
        #[arg(long = "policy")]
        policies: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Generate an access trace as TSV.
    Gen {
        /// e.g. SEQ_SCAN, STRIDE(64KB), ZIPF(0.99).
        pattern: String,
        #[arg(long, default_value = "8MB")]
        working_set: String,
        #[arg(long, default_value_t = 1024)]
        events: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        tenant: u32,
        #[arg(long, default_value_t = 1000)]
        gap_ns: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario and print the final contents of every map.
    DumpMaps {
        scenario: PathBuf,
        #[arg(long = "policy")]
        policies: Vec<PathBuf>,
    },
    /// Print a program as text assembly (accepts .gpa or .gpb).
    Disasm { program: PathBuf },
}

/// An error carrying its exit code.
struct Failure(u8, anyhow::Error);

fn fail(code: u8) -> impl FnOnce(anyhow::Error) -> Failure {
    move |e| Failure(code, e)
}

fn load_scenario(path: &Path, policies: &[PathBuf]) -> Result<Scenario, Failure> {
    let mut sc = Scenario::load(path).map_err(|e| Failure(EXIT_SCENARIO, e.into()))?;
    for p in policies {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(fail(EXIT_SCENARIO))?;
        let specs = parse_policy_file(&text).map_err(|e| {
            let code = if matches!(e, PolicyError::Verify { .. }) { EXIT_VERIFY } else { EXIT_SCENARIO };
            Failure(code, anyhow::Error::new(e).context(format!("policy file {}", p.display())))
        })?;
        sc.policies.extend(specs);
    }
    let problems = sc.validate();
    if !problems.is_empty() {
        return Err(Failure(EXIT_SCENARIO, ScenarioError::Invalid(problems).into()));
    }
    Ok(sc)
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn execute(cmd: Cmd) -> Result<(), Failure> {
    let scenario_err = fail(EXIT_SCENARIO);
    match cmd {
        Cmd::Run { scenario, policies, format, out, log, seed } => {
            let format = Format::from_name(&format).ok_or_else(|| Failure(EXIT_USAGE, anyhow::anyhow!("unknown format `{format}`")))?;
            let mut sc = load_scenario(&scenario, &policies)?;
            if let Some(s) = seed {
                sc.seed = s;
            }
            let run = run_scenario(&sc).map_err(|e| Failure(EXIT_SCENARIO, e.into()))?;
            if let Some(p) = log {
                write_out(Some(&p), &run.log.to_tsv()).map_err(fail(EXIT_SCENARIO))?;
            }
            let mut text = run.report.render(format);
            if !text.ends_with('\n') {
                text.push('\n');
            }
            write_out(out.as_deref(), &text).map_err(scenario_err)
        }
        Cmd::Verify { program, hook, emit } => {
            let hook = match hook {
                Some(h) => Some(Hook::from_name(&h).map_err(|e| Failure(EXIT_USAGE, anyhow::anyhow!("{e}")))?),
                None => None,
            };
            let mut prog = load_program(&program).map_err(|e| Failure(EXIT_VERIFY, e.into()))?;
            let report = verify_as(&mut prog, hook);
            print!("{report}");
            if !report.accepted() {
                return Err(Failure(EXIT_VERIFY, anyhow::anyhow!("{} rejected", program.display())));
            }
            if let Some(p) = emit {
                std::fs::write(&p, binary::encode(&prog)).with_context(|| format!("writing {}", p.display())).map_err(scenario_err)?;
            }
            Ok(())
        }
        Cmd::Corpus { dir } => {
            let dir = dir.unwrap_or_else(default_dir);
            let s = corpus_check(&dir).map_err(|e| Failure(EXIT_SCENARIO, e.into()))?;
            for c in &s.cases {
                let got = match (c.accepted, c.rule) {
                    (true, _) => "ACCEPT".to_string(),
                    (false, r) => format!("REJECT {}", r.map_or("?", |r| r.as_str())),
                };
                println!("{}\t{}\t{}", if c.passed { "ok" } else { "FAIL" }, c.path.file_name().unwrap_or_default().to_string_lossy(), got);
            }
            let failed = s.failures().count();
            println!("{} cases ({} accept, {} reject), {} failed", s.cases.len(), s.accept_cases, s.reject_cases, failed);
            if failed > 0 {
                return Err(Failure(EXIT_VERIFY, anyhow::anyhow!("{failed} corpus cases disagree with their labels")));
            }
            Ok(())
        }
        Cmd::Tool { name, scenario, policies, json } => {
            let tool = Tool::from_name(&name).ok_or_else(|| Failure(EXIT_USAGE, anyhow::anyhow!("unknown tool `{name}`")))?;
            let sc = load_scenario(&scenario, &policies)?;
            let (report, _) = run_tool(tool, &sc).map_err(|e| Failure(EXIT_SCENARIO, e.into()))?;
            let text = if json { report.to_json() + "\n" } else { report.to_text() };
            write_out(None, &text).map_err(scenario_err)
        }
        Cmd::Gen { pattern, working_set, events, seed, tenant, gap_ns, out } => {
            let usage = fail(EXIT_USAGE);
            let pattern = Pattern::parse(&pattern).map_err(|e| usage(e.into()))?;
            let Some(ws) = parse_u64(&working_set) else {
                return Err(Failure(EXIT_USAGE, anyhow::anyhow!("bad working set `{working_set}`")));
            };
            let params = GenParams { working_set: ws, events, tenant, gap_ns, start_ns: 0 };
            let trace = gen_trace(pattern, &params, seed).map_err(|e| Failure(EXIT_USAGE, e.into()))?;
            write_out(out.as_deref(), &trace.to_tsv()).map_err(scenario_err)
        }
        Cmd::DumpMaps { scenario, policies } => {
            let sc = load_scenario(&scenario, &policies)?;
            let run = run_scenario(&sc).map_err(|e| Failure(EXIT_SCENARIO, e.into()))?;
            let mut text = String::from("map\tname\tepoch\tkey\tvalue\n");
            for m in &run.report.maps {
                text.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", m.map, m.name, m.epoch, m.key, m.value));
            }
            write_out(None, &text).map_err(scenario_err)
        }
        Cmd::Disasm { program } => {
            let prog = load_program(&program).map_err(|e| Failure(EXIT_VERIFY, e.into()))?;
            write_out(None, &disassemble(&prog)).map_err(scenario_err)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GPUX_LOG_LEVEL", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match execute(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, e)) => {
            log::debug!("exiting with {code}");
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
