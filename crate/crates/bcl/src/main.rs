//! Command-line front end: `train`, `check-bounds`, `check-grads`, and
//! `compare`. Every command reads one JSON config, writes all artifacts into
//! `--out`, and copies the config there verbatim so a run is reproducible
//! from its output directory alone.
//!
//! Exit codes: 0 success, 1 config error, 2 divergence, 3 check failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use bcl::bounds::{
    check_equality_conditions, theorem1_bound, theorem2_bound, theorem3_bound,
    EqualityConditions, EQUALITY_TOL_TRAINED,
};
use bcl::config::{CheckBoundsConfig, CheckGradsConfig, CompareCommandConfig, TrainCommandConfig};
use bcl::embedding::{normalize, ConfigurationDocument, PrototypeSet, RawConfiguration};
use bcl::error::Error;
use bcl::grad::{bcl_gradient, finite_difference, max_relative_error, scl_gradient};
use bcl::longtail::Batch;
use bcl::loss::{bcl_instance_loss, scl_instance_loss};
use bcl::optim::{compare_geometries, train, TrainTrace};
use bcl::simplex::{build_regular_simplex, SimplexSpec};

#[derive(Parser)]
#[command(name = "bcl", about = "Balanced contrastive loss toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Parser)]
struct CommonArgs {
    /// JSON configuration file
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
    /// Overrides every seed in the config
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one optimization over a synthetic long-tail dataset
    Train(CommonArgs),
    /// Monte Carlo verification of the loss lower bounds
    CheckBounds(CommonArgs),
    /// Finite-difference verification of the analytic gradients
    CheckGrads(CommonArgs),
    /// Train two losses on the same data and compare final geometry
    Compare(CommonArgs),
}

const EXIT_CONFIG: u8 = 1;
const EXIT_DIVERGED: u8 = 2;
const EXIT_CHECK_FAILED: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::CheckBounds(args) => cmd_check_bounds(args),
        Command::CheckGrads(args) => cmd_check_grads(args),
        Command::Compare(args) => cmd_compare(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Error::Diverged { step, loss }) => {
            eprintln!("error: optimization diverged at step {step} (loss {loss})");
            ExitCode::from(EXIT_DIVERGED)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

/// Reads and parses the config, creates the output directory, and copies the
/// config file into it byte-for-byte.
fn load_config<T: serde::de::DeserializeOwned>(args: &CommonArgs) -> Result<T, Error> {
    let text = fs::read_to_string(&args.config)?;
    let parsed: T = serde_json::from_str(&text)?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("config.json"), &text)?;
    Ok(parsed)
}

fn write_trace(dir: &Path, name: &str, trace: &TrainTrace) -> Result<(), Error> {
    fs::write(dir.join(name), trace.to_csv())?;
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn cmd_train(args: &CommonArgs) -> Result<u8, Error> {
    let mut cfg: TrainCommandConfig = load_config(args)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let trace = train(&cfg.data, cfg.h, &cfg.train)?;
    write_trace(&args.out, "trace.csv", &trace)?;
    write_json(
        &args.out,
        "final_embeddings.json",
        &ConfigurationDocument::from_raw(&trace.final_raw),
    )?;
    if let Some(protos) = &trace.final_protos {
        let rows: Vec<Vec<f64>> = protos.rows().into_iter().map(|r| r.to_vec()).collect();
        write_json(&args.out, "final_prototypes.json", &rows)?;
    }
    let last = trace.final_measurement();
    println!(
        "train: {} steps, final loss {:.6}, collapse residual {:.3e}",
        last.step, last.loss, last.geometry.collapse_residual
    );
    Ok(0)
}

#[derive(Serialize)]
struct BoundCheckLine {
    trial: usize,
    theorem: u8,
    n: usize,
    h: usize,
    k: usize,
    slack: f64,
    violation: bool,
}

/// Slack tolerance for the Monte Carlo inequality checks.
const SLACK_TOL: f64 = -1e-9;

fn cmd_check_bounds(args: &CommonArgs) -> Result<u8, Error> {
    let mut cfg: CheckBoundsConfig = load_config(args)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut lines: Vec<BoundCheckLine> = Vec::new();
    let mut violations = 0usize;

    for trial in 0..cfg.trials {
        let n = rng.gen_range(4..=cfg.max_n.max(4));
        let h = rng.gen_range(2..=cfg.max_h);
        let k = rng.gen_range(2..=cfg.max_k.min(n / 2).max(2));
        let w = Array2::from_shape_fn((n, h), |_| rng.gen_range(-1.0..1.0_f64) + 1e-3);
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let z = normalize(&RawConfiguration::new(w, labels, k)?)?;
        let batch = Batch::full(&z.labels);
        // worst class slack per theorem; every class was still checked
        let mut worst = [f64::INFINITY; 2];
        for y in 0..k {
            let r1 = theorem1_bound(&z, &batch, y)?;
            let r2 = theorem2_bound(&z, &batch, y)?;
            worst[0] = worst[0].min(r1.slack + cfg.corrupt_loss);
            worst[1] = worst[1].min(r2.slack + cfg.corrupt_loss);
        }
        for (idx, &slack) in worst.iter().enumerate() {
            let violation = slack < SLACK_TOL;
            violations += violation as usize;
            lines.push(BoundCheckLine {
                trial,
                theorem: idx as u8 + 1,
                n,
                h,
                k,
                slack,
                violation,
            });
        }
    }

    // constructed equality cases for the whole-dataset bound
    if cfg.trials > 0 {
        for k in [2usize, 4, 10, 50] {
            let h = k.max(3) + 1;
            let vertices = build_regular_simplex(&SimplexSpec { k, h, rho: 1.0 }, cfg.seed)?;
            let protos = PrototypeSet::new(vertices.clone())?;
            // two samples per class, all collapsed onto the vertices
            let n = 2 * k;
            let mut zmat = Array2::zeros((n, h));
            let mut labels = Vec::with_capacity(n);
            for c in 0..k {
                for r in 0..2 {
                    zmat.row_mut(2 * c + r).assign(&vertices.row(c));
                    labels.push(c);
                }
            }
            let z = bcl::embedding::UnitConfiguration::new(zmat, labels, k)?;
            let batch = Batch::full(&z.labels);
            let loss: f64 = batch
                .indices
                .iter()
                .map(|&i| bcl_instance_loss(&z, &batch, i, &protos, 1.0))
                .sum::<f64>()
                + cfg.corrupt_loss;
            let bound = theorem3_bound(k, n)?;
            let rel = (loss - bound).abs() / bound;
            let violation = rel > 1e-6;
            violations += violation as usize;
            lines.push(BoundCheckLine {
                trial: cfg.trials,
                theorem: 3,
                n,
                h,
                k,
                slack: loss - bound,
                violation,
            });
        }
    }

    let mut body = String::new();
    for line in &lines {
        body.push_str(&serde_json::to_string(line)?);
        body.push('\n');
    }
    fs::write(args.out.join("report.jsonl"), body)?;
    println!(
        "check-bounds: {} checks, {} violations",
        lines.len(),
        violations
    );
    Ok(if violations == 0 { 0 } else { EXIT_CHECK_FAILED })
}

#[derive(Serialize)]
struct GradCheckReport {
    max_rel_err: f64,
    median_rel_err: f64,
    n_trials: usize,
    seed: u64,
    threshold: f64,
    passed: bool,
}

fn cmd_check_grads(args: &CommonArgs) -> Result<u8, Error> {
    let mut cfg: CheckGradsConfig = load_config(args)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut errors: Vec<f64> = Vec::with_capacity(cfg.trials);

    for trial in 0..cfg.trials {
        let n = rng.gen_range(4..=cfg.max_n.max(4));
        let h = rng.gen_range(2..=cfg.max_h);
        // k <= n/2 so every class has at least two instances
        let k = rng.gen_range(2..=cfg.max_k.min(n / 2).max(2));
        let tau = if trial % 2 == 0 { 0.1 } else { 1.0 };
        let w = Array2::from_shape_fn((n, h), |_| rng.gen_range(-1.0..1.0_f64) + 0.1);
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let raw = RawConfiguration::new(w, labels.clone(), k)?;
        let batch = Batch::full(&raw.labels);
        let proto_raw = Array2::from_shape_fn((k, h), |_| rng.gen_range(-1.0..1.0_f64) + 0.1);

        // plain contrastive loss, embedding gradient
        let field = scl_gradient(&raw, &batch, tau)?;
        let flat: Vec<f64> = raw.w.iter().cloned().collect();
        let fd = finite_difference(
            |p| {
                let w = Array2::from_shape_vec((n, h), p.to_vec()).unwrap();
                let r = RawConfiguration::new(w, labels.clone(), k).unwrap();
                let z = normalize(&r).unwrap();
                batch
                    .indices
                    .iter()
                    .map(|&i| scl_instance_loss(&z, &batch, i, tau).unwrap())
                    .sum()
            },
            &flat,
            cfg.fd_step,
        )?;
        let analytic: Vec<f64> = field.dw.iter().cloned().collect();
        errors.push(max_relative_error(&analytic, &fd));

        // balanced loss, embedding and prototype gradients
        let field = bcl_gradient(&raw, &batch, &proto_raw, tau)?;
        let bcl_total = |r: &RawConfiguration, pr: &Array2<f64>| -> f64 {
            let z = normalize(r).unwrap();
            let protos = PrototypeSet::from_raw(pr).unwrap();
            batch
                .indices
                .iter()
                .map(|&i| bcl_instance_loss(&z, &batch, i, &protos, tau))
                .sum()
        };
        let fd = finite_difference(
            |p| {
                let w = Array2::from_shape_vec((n, h), p.to_vec()).unwrap();
                bcl_total(
                    &RawConfiguration::new(w, labels.clone(), k).unwrap(),
                    &proto_raw,
                )
            },
            &flat,
            cfg.fd_step,
        )?;
        let analytic: Vec<f64> = field.dw.iter().cloned().collect();
        errors.push(max_relative_error(&analytic, &fd));

        let flat_p: Vec<f64> = proto_raw.iter().cloned().collect();
        let fd = finite_difference(
            |p| bcl_total(&raw, &Array2::from_shape_vec((k, h), p.to_vec()).unwrap()),
            &flat_p,
            cfg.fd_step,
        )?;
        let analytic: Vec<f64> = field.dproto.as_ref().unwrap().iter().cloned().collect();
        errors.push(max_relative_error(&analytic, &fd));
    }

    let mut sorted = errors.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let max_rel_err = sorted.last().copied().unwrap_or(0.0);
    let median_rel_err = if sorted.is_empty() {
        0.0
    } else {
        sorted[sorted.len() / 2]
    };
    let passed = max_rel_err <= cfg.max_rel_err;
    let report = GradCheckReport {
        max_rel_err,
        median_rel_err,
        n_trials: cfg.trials,
        seed: cfg.seed,
        threshold: cfg.max_rel_err,
        passed,
    };
    write_json(&args.out, "report.json", &report)?;
    println!(
        "check-grads: {} trials, max rel err {:.3e}, median {:.3e} ({})",
        cfg.trials,
        max_rel_err,
        median_rel_err,
        if passed { "ok" } else { "FAIL" }
    );
    Ok(if passed { 0 } else { EXIT_CHECK_FAILED })
}

#[derive(Serialize)]
struct CompareSummary {
    final_loss_a: f64,
    final_loss_b: f64,
    spread_a: f64,
    spread_b: f64,
    spread_ratio: f64,
    equality_a: EqualityConditions,
    equality_b: EqualityConditions,
}

fn cmd_compare(args: &CommonArgs) -> Result<u8, Error> {
    let mut cfg: CompareCommandConfig = load_config(args)?;
    if let Some(seed) = args.seed {
        cfg.run_a.seed = seed;
        cfg.run_b.seed = seed;
    }
    let outcome = compare_geometries(&cfg.data, cfg.h, &cfg.run_a, &cfg.run_b)?;
    write_trace(&args.out, "trace_a.csv", &outcome.trace_a)?;
    write_trace(&args.out, "trace_b.csv", &outcome.trace_b)?;

    let last_a = outcome.trace_a.final_measurement();
    let last_b = outcome.trace_b.final_measurement();
    let spread_a = last_a.geometry.gram_offdiag_spread;
    let spread_b = last_b.geometry.gram_offdiag_spread;
    let summary = CompareSummary {
        final_loss_a: last_a.loss,
        final_loss_b: last_b.loss,
        spread_a,
        spread_b,
        spread_ratio: spread_a / spread_b,
        equality_a: check_equality_conditions(
            &normalize(&outcome.trace_a.final_raw)?,
            EQUALITY_TOL_TRAINED,
        )?,
        equality_b: check_equality_conditions(
            &normalize(&outcome.trace_b.final_raw)?,
            EQUALITY_TOL_TRAINED,
        )?,
    };
    write_json(&args.out, "summary.json", &summary)?;
    println!(
        "compare: spread_a {:.4}, spread_b {:.4}, ratio {:.2}",
        spread_a, spread_b, summary.spread_ratio
    );
    Ok(0)
}
