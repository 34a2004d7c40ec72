//! Command-line surface.
//!
//! Subcommands cover the full pipeline: dataset generation, training,
//! evaluation with report/CSV exports, single-instance inference, direct
//! oracle solves, and latent-trajectory export. Every config default is
//! overridable through JSON files; `--seed` (or the `TRC_SEED` environment
//! variable as a fallback) threads through generation and training.

use crate::dynamics::{project_thrust_norm, ControlProblem, SystemParams};
use crate::error::{Result, TrcError};
use crate::io;
use crate::model::{forward, BoundParams, TrcConfig};
use crate::oracle::{generate_dataset, solve_direct_shooting, OracleConfig};
use crate::train::{evaluate, train, ControlSource, TrainConfig};
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(name = "trc", version, about = "Tiny recursive control: train and run weight-shared refinement controllers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a supervised dataset by solving sampled initial conditions.
    GenData {
        /// Control problem: vdp or rocket.
        #[arg(long)]
        problem: String,
        /// Number of initial conditions to solve.
        #[arg(long)]
        n: usize,
        /// RNG seed (falls back to TRC_SEED, then 42).
        #[arg(long)]
        seed: Option<u64>,
        /// Output dataset path (JSON Lines).
        #[arg(long)]
        out: PathBuf,
        /// JSON file overriding oracle solver defaults.
        #[arg(long)]
        oracle_config: Option<PathBuf>,
    },
    /// Train a refinement network on a dataset.
    Train {
        /// Training dataset produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// JSON file with {"trc": {...}, "train": {...}} overrides.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for checkpoints and metrics.
        #[arg(long)]
        out: PathBuf,
        /// RNG seed override (falls back to config, TRC_SEED, then 42).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a dataset and export report files.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report directory (report.json, refinement.csv, latents.csv).
        #[arg(long)]
        report: PathBuf,
    },
    /// Run the refinement network on one initial condition.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated initial state, e.g. "1.0,-0.5".
        #[arg(long)]
        x0: String,
        /// Comma-separated target state.
        #[arg(long)]
        target: String,
        /// Override the number of refinement iterations.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Solve one instance with the classical direct-shooting oracle.
    Oracle {
        #[arg(long)]
        problem: String,
        #[arg(long)]
        x0: String,
        #[arg(long)]
        target: String,
        #[arg(long)]
        oracle_config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export PCA-projected high-level latent trajectories.
    ExportLatents {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| std::env::var("TRC_SEED").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(42)
}

fn parse_csv_floats(s: &str, what: &str, expect: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| TrcError::Config(format!("cannot parse {what} component '{t}'")))
        })
        .collect::<Result<_>>()?;
    if vals.len() != expect {
        return Err(TrcError::Dimension(format!(
            "{what} has {} components, expected {expect}",
            vals.len()
        )));
    }
    Ok(vals)
}

/// Recursively overlay `over` onto `base`: objects merge per key, anything
/// else replaces.
fn merge_json(base: &mut serde_json::Value, over: &serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

fn load_with_overrides<T: serde::Serialize + serde::de::DeserializeOwned>(
    defaults: &T,
    file: Option<&Path>,
    section: Option<&str>,
) -> Result<T> {
    let mut value = serde_json::to_value(defaults)?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrcError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut over: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| TrcError::Config(format!("bad JSON in {}: {e}", path.display())))?;
        if let Some(section) = section {
            over = over.get(section).cloned().unwrap_or(serde_json::Value::Null);
            if over.is_null() {
                return Ok(serde_json::from_value(value)?);
            }
        }
        merge_json(&mut value, &over);
    }
    Ok(serde_json::from_value(value)?)
}

fn check_dims(problem: &ControlProblem, other: &ControlProblem, what: &str) -> Result<()> {
    if problem.d_x != other.d_x || problem.d_u != other.d_u || problem.horizon != other.horizon {
        return Err(TrcError::Dimension(format!(
            "{what}: checkpoint problem ({}x{} controls over {} steps) does not match dataset ({}x{} over {})",
            problem.horizon, problem.d_u, problem.d_x, other.horizon, other.d_u, other.d_x
        )));
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { problem, n, seed, out, oracle_config } => {
            let problem = ControlProblem::by_name(&problem)?;
            let seed = resolve_seed(seed);
            let mut cfg: OracleConfig =
                load_with_overrides(&OracleConfig::default(), oracle_config.as_deref(), None)?;
            cfg.seed = seed;
            let mut last = 0usize;
            let (samples, stats) = generate_dataset(
                &problem,
                n,
                &cfg,
                seed,
                Some(&mut |done, total| {
                    if done * 10 / total > last {
                        last = done * 10 / total;
                        eprintln!("gen-data: {done}/{total} solved");
                    }
                }),
            )?;
            io::write_dataset(&out, &problem, &cfg, seed, stats.failures, &samples)?;
            println!(
                "wrote {} samples to {} ({} failures)",
                stats.emitted,
                out.display(),
                stats.failures
            );
            Ok(())
        }
        Command::Train { data, config, out, seed } => {
            let (header, samples) = io::read_dataset(&data)?;
            let problem = header.problem.clone();
            let trc_cfg: TrcConfig =
                load_with_overrides(&TrcConfig::defaults(&problem), config.as_deref(), Some("trc"))?;
            // Seed precedence: --seed flag, then config file, then TRC_SEED.
            let mut defaults = TrainConfig::defaults(&problem);
            defaults.seed = resolve_seed(None);
            let mut train_cfg: TrainConfig =
                load_with_overrides(&defaults, config.as_deref(), Some("train"))?;
            if let Some(s) = seed {
                train_cfg.seed = s;
            }
            std::fs::create_dir_all(&out)?;
            let outcome = train(
                &problem,
                &samples,
                &trc_cfg,
                &train_cfg,
                Some(&mut |m| {
                    eprintln!(
                        "epoch {:3}: control_loss {:.5} improvement {:.4} val {:.5} lr {:.2e}",
                        m.epoch, m.control_loss, m.improvement_metric, m.val_control_loss, m.learning_rate
                    );
                }),
            )?;
            io::write_checkpoint(
                &out.join("final.ckpt"),
                &problem,
                &trc_cfg,
                &train_cfg,
                &outcome.normalizer,
                &outcome.final_params,
            )?;
            io::write_checkpoint(
                &out.join("best.ckpt"),
                &problem,
                &trc_cfg,
                &train_cfg,
                &outcome.normalizer,
                &outcome.best_params,
            )?;
            io::write_metrics_csv(&out.join("training_metrics.csv"), &outcome.metrics)?;
            println!(
                "trained {} epochs; best validation at epoch {}; checkpoints in {}",
                outcome.metrics.len(),
                outcome.best_epoch,
                out.display()
            );
            Ok(())
        }
        Command::Eval { ckpt, data, report } => {
            let (manifest, params) = io::read_checkpoint(&ckpt)?;
            let (header, samples) = io::read_dataset(&data)?;
            check_dims(&manifest.problem, &header.problem, "eval")?;
            let source = ControlSource::Model { params: &params, cfg: &manifest.trc_config };
            let ev = evaluate(&source, &manifest.problem, &manifest.normalizer, &samples)?;
            std::fs::create_dir_all(&report)?;
            io::write_report_json(&report.join("report.json"), &ev)?;
            io::write_refinement_csv(&report.join("refinement.csv"), &ev)?;
            io::write_latents_csv(&report.join("latents.csv"), &ev)?;
            println!(
                "evaluated {} samples: cost ratio {:.4}, monotone fraction {:.3}, reports in {}",
                ev.report.n_samples,
                ev.report.cost_ratio,
                ev.report.monotone_fraction,
                report.display()
            );
            Ok(())
        }
        Command::Infer { ckpt, x0, target, k } => {
            let (manifest, params) = io::read_checkpoint(&ckpt)?;
            let mut problem = manifest.problem.clone();
            let x0 = parse_csv_floats(&x0, "x0", problem.d_x)?;
            problem.x_target = parse_csv_floats(&target, "target", problem.d_x)?;
            let cfg = manifest.trc_config.clone();
            let k_iters = k.unwrap_or(cfg.outer_iters);
            let mut tape = crate::autodiff::Tape::new();
            let bound = BoundParams::new(&params, &mut tape, false)?;
            let pass = forward(
                &mut tape,
                &bound,
                &cfg,
                &problem,
                &manifest.normalizer,
                &x0,
                1,
                k_iters,
                cfg.inner_cycles,
            )?;
            for (kk, costs) in pass.record.costs_per_iter.iter().enumerate() {
                println!("iteration {kk}: cost {}", costs[0]);
            }
            let mut u = pass.record.controls_per_iter.last().unwrap().clone();
            if let SystemParams::Rocket(p) = &problem.params {
                project_thrust_norm(p, &mut u);
                let traj = crate::dynamics::simulate(&problem, &x0, &u)?;
                println!("projected cost: {}", traj.cost);
            }
            println!("controls:");
            for (t, step) in u.chunks(problem.d_u).enumerate() {
                let row: Vec<String> = step.iter().map(|v| format!("{v}")).collect();
                println!("{t},{}", row.join(","));
            }
            Ok(())
        }
        Command::Oracle { problem, x0, target, oracle_config, seed } => {
            let mut problem = ControlProblem::by_name(&problem)?;
            let x0 = parse_csv_floats(&x0, "x0", problem.d_x)?;
            problem.x_target = parse_csv_floats(&target, "target", problem.d_x)?;
            let mut cfg: OracleConfig =
                load_with_overrides(&OracleConfig::default(), oracle_config.as_deref(), None)?;
            cfg.seed = resolve_seed(seed);
            let sample = solve_direct_shooting(&problem, &x0, &cfg)?;
            println!("cost: {}", sample.j_star);
            println!("controls:");
            for (t, step) in sample.u_star.chunks(problem.d_u).enumerate() {
                let row: Vec<String> = step.iter().map(|v| format!("{v}")).collect();
                println!("{t},{}", row.join(","));
            }
            Ok(())
        }
        Command::ExportLatents { ckpt, data, out } => {
            let (manifest, params) = io::read_checkpoint(&ckpt)?;
            let (header, samples) = io::read_dataset(&data)?;
            check_dims(&manifest.problem, &header.problem, "export-latents")?;
            let source = ControlSource::Model { params: &params, cfg: &manifest.trc_config };
            let ev = evaluate(&source, &manifest.problem, &manifest.normalizer, &samples)?;
            io::write_latents_csv(&out, &ev)?;
            println!("wrote latent projections for {} samples to {}", ev.report.n_samples, out.display());
            Ok(())
        }
    }
}
