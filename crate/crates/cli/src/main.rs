//! `fedreft` command-line driver.
//!
//! Exit codes: 0 success, 1 configuration/input error, 2 runtime failure
//! (including divergence), 3 internal invariant breach.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fedreft_core::aggregation::{self, ParamVector, WeiszfeldConfig};
use fedreft_core::checkpoint::{self, Checkpoint};
use fedreft_core::gradcheck::{self, GradCheckConfig, GradCheckError};
use fedreft_core::orchestrator::{self, Experiment, ExperimentConfig, OrchestratorError};
use fedreft_core::synthdata;

#[derive(Parser)]
#[command(name = "fedreft", version, about = "Federated LoReFT simulator with All-But-Me aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a federated experiment from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's round count.
        #[arg(long)]
        rounds: Option<usize>,
        /// Also write each client's final intervention checkpoint.
        #[arg(long)]
        checkpoints: bool,
        /// Also write the generated dataset.
        #[arg(long)]
        dump_data: bool,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        d: usize,
        #[arg(long, default_value_t = 2)]
        r: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
    },
    /// Aggregate the rows of a points file.
    AggDemo {
        #[arg(long)]
        points: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
    },
    /// Summarize a rounds.jsonl file.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Geomedian,
    Mean,
    Fedavg,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Md,
}

enum Failure {
    Config(String),
    Runtime(String),
    Invariant(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Invariant(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Runtime(m) | Failure::Invariant(m) => m,
        }
    }
}

impl From<OrchestratorError> for Failure {
    fn from(e: OrchestratorError) -> Self {
        match e {
            OrchestratorError::Config(_) => Failure::Config(e.to_string()),
            OrchestratorError::Invariant(_) => Failure::Invariant(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

struct RunArgs<'a> {
    config: &'a Path,
    out: &'a Path,
    seed: Option<u64>,
    rounds: Option<usize>,
    checkpoints: bool,
    dump_data: bool,
}

fn run(args: RunArgs<'_>) -> Result<(), Failure> {
    let RunArgs {
        config,
        out,
        seed,
        rounds,
        checkpoints,
        dump_data,
    } = args;
    let text = read(config)?;
    let mut cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| Failure::Config(format!("{}: {e}", config.display())))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(r) = rounds {
        cfg.rounds = r;
    }
    let mut exp = Experiment::new(cfg.clone())?;
    fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", out.display())))?;
    let resolved = serde_json::to_string_pretty(&cfg).expect("config serializes");
    write(&out.join("config.resolved.json"), &(resolved + "\n"))?;
    if dump_data {
        write(&out.join("dataset.txt"), &synthdata::dump(&exp.dataset()))?;
    }

    eprintln!(
        "running {} rounds, {} clients, {} aggregation, seed {}",
        cfg.rounds,
        cfg.clients,
        cfg.aggregation.name(),
        cfg.seed
    );
    let reports = exp.run_with(|r| {
        let alphas: Vec<String> = r.clients.iter().map(|c| format!("{}", c.alpha)).collect();
        eprintln!(
            "round {:>3}  mean acc {:.4}  alphas [{}]",
            r.round,
            r.mean_accuracy,
            alphas.join(", ")
        );
    })?;
    let summary = orchestrator::summarize(&reports);
    write(&out.join("rounds.jsonl"), &orchestrator::to_jsonl(&reports))?;
    write(&out.join("summary.csv"), &orchestrator::summary_csv(&summary))?;
    if checkpoints {
        for c in exp.clients() {
            let ckpt = Checkpoint {
                seed: cfg.seed,
                bundle: c.bundle.clone(),
            };
            write(&out.join(format!("client-{}.ckpt", c.id)), &checkpoint::to_text(&ckpt))?;
        }
    }
    eprintln!("average final accuracy {:.4}; wrote {}", summary.average_accuracy, out.display());
    Ok(())
}

fn gradcheck_cmd(cfg: GradCheckConfig, tol: f64) -> Result<(), Failure> {
    let rep = gradcheck::run(&cfg).map_err(|e| match e {
        GradCheckError::TooLarge { .. } => Failure::Config(e.to_string()),
        other => Failure::Runtime(other.to_string()),
    })?;
    println!("group  scalars  max_rel_error");
    for g in &rep.groups {
        let flag = if g.max_rel_error < tol { "ok" } else { "FAIL" };
        println!("{:<5}  {:>7}  {:.3e}  {flag}", g.group, g.scalars, g.max_rel_error);
    }
    if rep.max_rel_error() < tol {
        Ok(())
    } else {
        Err(Failure::Invariant(format!(
            "gradient mismatch: max relative error {:.3e} >= {tol:e}",
            rep.max_rel_error()
        )))
    }
}

/// Rows of whitespace-separated decimals; `#` starts a comment.
fn parse_points(text: &str) -> Result<Vec<Vec<f64>>, String> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let row = body
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| format!("line {}: not a finite number: {t:?}", i + 1))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(format!(
                    "line {}: row has {} values, expected {}",
                    i + 1,
                    row.len(),
                    first.len()
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err("no points".into());
    }
    Ok(rows)
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
    format!("({})", parts.join(", "))
}

fn agg_demo(path: &Path, method: Method) -> Result<(), Failure> {
    let rows = parse_points(&read(path)?).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let cfg = WeiszfeldConfig::default();
    let all: BTreeMap<usize, ParamVector> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| (i, ParamVector::raw(r.clone())))
        .collect();
    let rt = |e: aggregation::AggregationError| Failure::Runtime(e.to_string());
    let mut out = String::new();
    match method {
        Method::Geomedian => {
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let (m, diag) = aggregation::weiszfeld(&refs, &cfg).map_err(rt)?;
            writeln!(out, "geomedian {}", fmt_vec(&m)).unwrap();
            writeln!(out, "iterations {} converged {}", diag.iterations, diag.converged).unwrap();
            let trace: Vec<String> = diag.objective_trace.iter().map(|x| format!("{x}")).collect();
            writeln!(out, "objective {}", trace.join(" ")).unwrap();
            if rows.len() >= 2 {
                for k in all.keys() {
                    let (a, _) = aggregation::abm_aggregate(&all, *k, &cfg).map_err(rt)?;
                    writeln!(out, "abm[{k}] {}", fmt_vec(&a.flat)).unwrap();
                }
            }
        }
        Method::Mean => {
            let ones = all.keys().map(|&k| (k, 1.0)).collect();
            let m = aggregation::fedavg(&all, &ones).map_err(rt)?;
            writeln!(out, "mean {}", fmt_vec(&m.flat)).unwrap();
            if rows.len() >= 2 {
                for k in all.keys() {
                    let a = aggregation::mean_abm(&all, *k).map_err(rt)?;
                    writeln!(out, "abm[{k}] {}", fmt_vec(&a.flat)).unwrap();
                }
            }
        }
        Method::Fedavg => {
            let ones = all.keys().map(|&k| (k, 1.0)).collect();
            let m = aggregation::fedavg(&all, &ones).map_err(rt)?;
            writeln!(out, "fedavg {}", fmt_vec(&m.flat)).unwrap();
        }
    }
    print!("{out}");
    Ok(())
}

fn report(input: &Path, format: Format) -> Result<(), Failure> {
    let reports = orchestrator::from_jsonl(&read(input)?)
        .map_err(|(line, e)| Failure::Config(format!("{}: line {line}: {e}", input.display())))?;
    if reports.is_empty() {
        return Err(Failure::Config(format!("{}: no rounds", input.display())));
    }
    let summary = orchestrator::summarize(&reports);
    match format {
        Format::Csv => print!("{}", orchestrator::summary_csv(&summary)),
        Format::Md => print!("{}", orchestrator::summary_markdown(&summary)),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            seed,
            rounds,
            checkpoints,
            dump_data,
        } => run(RunArgs {
            config: &config,
            out: &out,
            seed,
            rounds,
            checkpoints,
            dump_data,
        }),
        Command::Gradcheck {
            d,
            r,
            seed,
            tol,
            inject_sign_flip,
        } => gradcheck_cmd(
            GradCheckConfig {
                d,
                r,
                seed,
                inject_sign_flip,
                ..Default::default()
            },
            tol,
        ),
        Command::AggDemo { points, method } => agg_demo(&points, method),
        Command::Report { input, format } => report(&input, format),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_parse_comments_and_blank_lines() {
        let rows = parse_points("# header\n1 2\n\n3 4 # tail\n").unwrap();
        assert_eq!(rows, vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
    }

    #[test]
    fn ragged_rows_name_the_line() {
        let e = parse_points("1 2\n3 4\n5\n").unwrap_err();
        assert!(e.starts_with("line 3:"), "{e}");
        assert!(parse_points("1 x").unwrap_err().starts_with("line 1:"));
        assert!(parse_points("   \n").is_err());
    }
}
