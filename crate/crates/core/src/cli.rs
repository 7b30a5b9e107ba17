//! Command-line front end.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::adversary::{attack_report, write_attack_csv, ObservationKind};
use crate::config::RunConfig;
use crate::engine::{Engine, IterationMetrics, LogMode, RunMetadata, Trajectory};
use crate::error::{Error, Result};
use crate::privacy::{compose, verify_dp_exact};
use crate::rng::SeedStreams;
use crate::schedule::{ConditionReport, Inequality};
use crate::topology::Topology;
use crate::wire::{self, TernaryCodeword, Trit};

pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;

/// Default output directory when neither `--out` nor the config sets one.
pub const OUT_DIR_ENV: &str = "QDSGD_OUT_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "qdsgd",
    version,
    about = "Quantized decentralized SGD simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check step-size conditions and topology for a config.
    Validate { config: PathBuf },
    /// Run every seed of a config and write CSVs.
    Run {
        config: PathBuf,
        /// Output directory; overrides the config's `output.dir`.
        #[arg(long, env = OUT_DIR_ENV)]
        out: Option<PathBuf>,
        /// Run even if the schedule fails validation.
        #[arg(long)]
        force: bool,
    },
    /// Infer a target's gradients from a fully logged trajectory.
    Attack {
        /// Trajectory JSON written by `run` in full mode.
        trajectory: PathBuf,
        #[arg(long, default_value_t = 0)]
        target: usize,
        #[arg(long, value_enum, default_value_t = AttackMode::Eavesdropper)]
        mode: AttackMode,
        /// CSV destination; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify the per-step privacy bound of the ternary quantizer.
    DpCheck {
        #[arg(long)]
        r: f64,
        #[arg(long, default_value_t = 1e-3)]
        grid_step: f64,
        /// Iterations to compose over.
        #[arg(long, default_value_t = 1)]
        steps: u64,
    },
    /// Roundtrip random ternary vectors through the wire format.
    CodecBench {
        #[arg(long, default_value_t = 100_000)]
        d: usize,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AttackMode {
    Eavesdropper,
    HonestButCurious,
}

impl From<AttackMode> for ObservationKind {
    fn from(m: AttackMode) -> Self {
        match m {
            AttackMode::Eavesdropper => ObservationKind::Eavesdropper,
            AttackMode::HonestButCurious => ObservationKind::HonestButCurious,
        }
    }
}

/// Runtime failure or a validation verdict.
enum Outcome {
    Ok,
    Invalid,
}

pub fn main_with(cli: Cli) -> ExitCode {
    let result = match cli.command {
        Command::Validate { config } => validate(&config),
        Command::Run { config, out, force } => run(&config, out, force),
        Command::Attack {
            trajectory,
            target,
            mode,
            out,
        } => attack(&trajectory, target, mode.into(), out),
        Command::DpCheck {
            r,
            grid_step,
            steps,
        } => dp_check(r, grid_step, steps),
        Command::CodecBench { d, trials, seed } => codec_bench(d, trials, seed),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::from(EXIT_OK),
        Ok(Outcome::Invalid) => ExitCode::from(EXIT_VALIDATION),
        Err(e @ Error::Config { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn print_report(topo: &Topology, report: &ConditionReport) {
    println!(
        "topology: {} agents, {} edges",
        topo.agents(),
        topo.edges().len()
    );
    match topo.algebraic_connectivity() {
        Ok(rho) => println!("  algebraic connectivity rho = {rho:.6}"),
        Err(e) => println!("  {e}"),
    }
    println!("  max degree = {:.6}", report.max_degree);
    println!("schedule conditions:");
    for which in [
        Inequality::StepProductDiverges,
        Inequality::MixingSquareSummable,
        Inequality::GradientNoiseSummable,
        Inequality::FunctionValueRate,
        Inequality::MixingStability,
    ] {
        println!("  [{}] {}", verdict(!report.violates(which)), which.label());
    }
    println!("  nonconvex conditions: {}", verdict(report.nonconvex_ok));
    println!(
        "  convex value conditions: {}",
        verdict(report.convex_value_ok)
    );
    println!(
        "rates: gradient statistic t^-{:.4}, function value t^-{:.4}",
        report.rate_gradient, report.rate_value
    );
}

fn validate(path: &Path) -> Result<Outcome> {
    let config = RunConfig::from_path(path)?;
    let topo = config.build_topology()?;
    let report = config.schedule.validate(&topo);
    print_report(&topo, &report);
    Ok(if report.nonconvex_ok && report.mixing_stable {
        Outcome::Ok
    } else {
        Outcome::Invalid
    })
}

#[derive(Serialize)]
struct SeedRecord {
    seed: u64,
    instance_seed: u64,
    instance_digest: String,
    metadata: RunMetadata,
    saturated: bool,
    error: Option<String>,
}

#[derive(Serialize)]
struct RunSummary<'a> {
    config_digest: String,
    config: &'a RunConfig,
    conditions: ConditionReport,
    forced: bool,
    runs: Vec<SeedRecord>,
}

const CSV_COLUMNS: [&str; 8] = [
    "k",
    "epsilon",
    "lambda",
    "consensus_error",
    "optimality_gap",
    "avg_grad_norm",
    "grad_norm_at_average",
    "value_at_average",
];

fn fmt(v: f64) -> String {
    format!("{v:e}")
}

/// Writes metrics with a `# config_digest=` comment line ahead of the header.
pub fn write_metrics_csv(path: &Path, digest: &str, rows: &[IterationMetrics]) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    writeln!(file, "# config_digest={digest}")?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(CSV_COLUMNS)?;
    for m in rows {
        w.write_record([
            m.k.to_string(),
            fmt(m.epsilon),
            fmt(m.lambda),
            fmt(m.consensus_error),
            m.optimality_gap.map(fmt).unwrap_or_default(),
            fmt(m.avg_grad_norm),
            fmt(m.grad_norm_at_average),
            fmt(m.value_at_average),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-k mean over seeds, truncated to the shortest series.
pub fn average_metrics(series: &[&[IterationMetrics]]) -> Vec<IterationMetrics> {
    let len = series.iter().map(|s| s.len()).min().unwrap_or(0);
    let n = series.len() as f64;
    (0..len)
        .map(|k| {
            let rows: Vec<&IterationMetrics> = series.iter().map(|s| &s[k]).collect();
            let mean = |f: fn(&IterationMetrics) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
            let gap = if rows.iter().all(|r| r.optimality_gap.is_some()) {
                Some(rows.iter().map(|r| r.optimality_gap.unwrap()).sum::<f64>() / n)
            } else {
                None
            };
            IterationMetrics {
                k: rows[0].k,
                epsilon: rows[0].epsilon,
                lambda: rows[0].lambda,
                consensus_error: mean(|r| r.consensus_error),
                optimality_gap: gap,
                avg_grad_norm: mean(|r| r.avg_grad_norm),
                grad_norm_at_average: mean(|r| r.grad_norm_at_average),
                value_at_average: mean(|r| r.value_at_average),
            }
        })
        .collect()
}

/// Converts a matrix of quantized rows into one codeword per agent.
pub fn broadcasts_to_codewords(q: &DMatrix<f64>, r: f64) -> Result<Vec<TernaryCodeword>> {
    (0..q.nrows())
        .map(|i| {
            let levels = q
                .row(i)
                .iter()
                .map(|&v| Trit::try_from((v / r).round() as i8))
                .collect::<Result<Vec<_>>>()?;
            wire::encode(&levels, r)
        })
        .collect()
}

fn write_broadcasts(path: &Path, traj: &Trajectory, r: f64) -> Result<()> {
    let mut codewords = Vec::new();
    for round in traj.rounds()? {
        codewords.extend(broadcasts_to_codewords(&round.broadcasts, r)?);
    }
    if let Some(q) = &traj.final_broadcasts {
        codewords.extend(broadcasts_to_codewords(q, r)?);
    }
    wire::write_tern(BufWriter::new(File::create(path)?), &codewords)
}

fn run(path: &Path, out: Option<PathBuf>, force: bool) -> Result<Outcome> {
    let config = RunConfig::from_path(path)?;
    let topo = config.build_topology()?;
    let conditions = config.schedule.validate(&topo);
    if !(conditions.nonconvex_ok && conditions.mixing_stable) {
        print_report(&topo, &conditions);
        if !force {
            eprintln!("config fails validation; pass --force to run anyway");
            return Ok(Outcome::Invalid);
        }
        log::warn!("running a config that fails validation");
    }
    let dir = out
        .or_else(|| config.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir)?;
    let digest = config.digest();

    let results: Vec<Result<(SeedRecord, Trajectory, Option<Error>)>> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let problem = config.build_problem(topo.agents(), seed)?;
            let instance_digest =
                hex::encode(Sha256::digest(serde_json::to_vec(&problem)?.as_slice()));
            let engine = Engine::new(&topo, &config.schedule, &config.quantizer, &problem)?
                .with_batch(config.batch)?;
            let (traj, failure) = engine.run_partial(config.iterations, seed, config.log_mode);
            log::info!(
                "seed {seed}: {} of {} iterations",
                traj.metadata.iterations_completed,
                config.iterations
            );
            let record = SeedRecord {
                seed,
                instance_seed: config.instance_seed(seed),
                instance_digest,
                saturated: traj.metadata.saturated_elements > 0,
                metadata: traj.metadata.clone(),
                error: failure.as_ref().map(|e| e.to_string()),
            };
            Ok((record, traj, failure))
        })
        .collect();

    let mut records = Vec::new();
    let mut trajectories = Vec::new();
    let mut first_failure = None;
    for result in results {
        let (record, traj, failure) = result?;
        write_metrics_csv(
            &dir.join(format!("seed_{}.csv", record.seed)),
            &digest,
            &traj.metrics,
        )?;
        if config.log_mode == LogMode::Full && failure.is_none() {
            serde_json::to_writer(
                BufWriter::new(File::create(
                    dir.join(format!("trajectory_seed_{}.json", record.seed)),
                )?),
                &traj,
            )?;
            if let Some(r) = config.quantizer.threshold() {
                write_broadcasts(
                    &dir.join(format!("broadcasts_seed_{}.tern", record.seed)),
                    &traj,
                    r,
                )?;
            }
        }
        if failure.is_some() && first_failure.is_none() {
            first_failure = failure;
        }
        records.push(record);
        trajectories.push(traj);
    }
    let series: Vec<&[IterationMetrics]> =
        trajectories.iter().map(|t| t.metrics.as_slice()).collect();
    write_metrics_csv(&dir.join("average.csv"), &digest, &average_metrics(&series))?;

    let summary = RunSummary {
        config_digest: digest,
        config: &config,
        conditions,
        forced: force,
        runs: records,
    };
    let mut meta = BufWriter::new(File::create(dir.join("metadata.json"))?);
    serde_json::to_writer_pretty(&mut meta, &summary)?;
    meta.flush()?;

    for r in &summary.runs {
        if r.saturated {
            log::warn!(
                "seed {}: {} coordinates saturated at the quantizer threshold",
                r.seed,
                r.metadata.saturated_elements
            );
        }
    }
    match first_failure {
        Some(e) => Err(e),
        None => {
            println!("wrote {} runs to {}", summary.runs.len(), dir.display());
            Ok(Outcome::Ok)
        }
    }
}

fn attack(
    path: &Path,
    target: usize,
    mode: ObservationKind,
    out: Option<PathBuf>,
) -> Result<Outcome> {
    let traj: Trajectory = serde_json::from_reader(io::BufReader::new(File::open(path)?))?;
    let report = attack_report(&traj, target, mode)?;
    match out {
        Some(p) => write_attack_csv(BufWriter::new(File::create(p)?), &report)?,
        None => write_attack_csv(io::stdout().lock(), &report)?,
    }
    if !report.is_empty() {
        let errs: Vec<f64> = report.iter().map(|r| r.relative_error).collect();
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        let max = errs.iter().copied().fold(0.0, f64::max);
        eprintln!(
            "{} rounds, mode {}: mean relative error {mean:e}, max {max:e}",
            errs.len(),
            report[0].kind
        );
    }
    Ok(Outcome::Ok)
}

fn dp_check(r: f64, grid_step: f64, steps: u64) -> Result<Outcome> {
    let sweep = verify_dp_exact(r, grid_step)?;
    let ledger = compose(steps, r)?;
    println!("per-step delta = {}", sweep.delta);
    println!(
        "grid supremum = {:.12} at x = {:.6}, y = {:.6}, event q = {}",
        sweep.supremum,
        sweep.argmax_x,
        sweep.argmax_y,
        sweep.argmax_event.value()
    );
    println!(
        "max violation = {:e} over {} pairs",
        sweep.max_violation, sweep.pairs
    );
    println!(
        "after {} steps: basic composition delta = {}, sqrt-growth reference = {}",
        ledger.steps, ledger.basic_composition_delta, ledger.sqrt_growth_reference
    );
    println!("note: {}", ledger.note);
    let ok = sweep.max_violation <= 1e-12;
    println!("[{}] per-step bound", verdict(ok));
    Ok(if ok { Outcome::Ok } else { Outcome::Invalid })
}

fn codec_bench(d: usize, trials: usize, seed: u64) -> Result<Outcome> {
    let mut rng = SeedStreams::new(seed).redraw(0);
    let start = Instant::now();
    let mut bytes = 0usize;
    for _ in 0..trials {
        let levels: Vec<Trit> = (0..d)
            .map(|_| match rng.random_range(0..3u8) {
                0 => Trit::Minus,
                1 => Trit::Zero,
                _ => Trit::Plus,
            })
            .collect();
        let c = wire::encode(&levels, 1.0)?;
        let buf = c.to_bytes();
        bytes += buf.len();
        let (back, _) = TernaryCodeword::from_bytes(&buf)?;
        let (decoded, _) = wire::decode(&back)?;
        if decoded != levels {
            return Err(Error::MalformedCodeword("roundtrip mismatch".into()));
        }
    }
    let elapsed = start.elapsed();
    println!(
        "{trials} roundtrips of d = {d} in {:.3} s",
        elapsed.as_secs_f64()
    );
    println!("encoded bytes per vector = {}", bytes / trials.max(1));
    println!(
        "compression ratio vs f32 = {:.4}",
        wire::compression_ratio(d)
    );
    Ok(Outcome::Ok)
}
