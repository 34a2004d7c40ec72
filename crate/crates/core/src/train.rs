//! Process-supervised training and evaluation.
//!
//! The loss rewards matching the oracle controls at the final iteration and
//! reducing the (initial-cost-normalized) trajectory cost at every
//! intermediate iteration. Optimization is AdamW with a cosine-annealed
//! learning rate and global gradient-norm clipping, single-threaded and
//! bit-deterministic under a fixed seed.

use crate::autodiff::{Tape, TensorId};
use crate::dynamics::{
    glideslope_depth, project_thrust_norm, simulate, ControlProblem, SystemParams,
};
use crate::error::{Result, TrcError};
use crate::model::{forward, BoundParams, ForwardPass, ParamStore, TrcConfig};
use crate::oracle::Sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Per-dimension standardization statistics for states and controls,
/// computed on the training data and stored in checkpoints so training and
/// inference apply the identical transform.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Normalizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub u_mean: Vec<f64>,
    pub u_std: Vec<f64>,
}

impl Normalizer {
    /// Fit on a training set: state stats from the initial conditions,
    /// control stats per component pooled over samples and steps.
    pub fn fit(samples: &[Sample], d_x: usize, d_u: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(TrcError::Training("cannot fit normalizer on an empty dataset".into()));
        }
        let moments = |dim: usize, values: &mut dyn Iterator<Item = (usize, f64)>| {
            let mut mean = vec![0.0; dim];
            let mut m2 = vec![0.0; dim];
            let mut count = vec![0usize; dim];
            for (d, v) in values {
                count[d] += 1;
                let delta = v - mean[d];
                mean[d] += delta / count[d] as f64;
                m2[d] += delta * (v - mean[d]);
            }
            let std: Vec<f64> = (0..dim)
                .map(|d| (m2[d] / count[d].max(1) as f64).sqrt().max(1e-6))
                .collect();
            (mean, std)
        };
        let (x_mean, x_std) = moments(
            d_x,
            &mut samples.iter().flat_map(|s| s.x0.iter().enumerate().map(|(d, &v)| (d, v))),
        );
        let (u_mean, u_std) = moments(
            d_u,
            &mut samples
                .iter()
                .flat_map(|s| s.u_star.iter().enumerate().map(|(i, &v)| (i % d_u, v))),
        );
        Ok(Normalizer { x_mean, x_std, u_mean, u_std })
    }

    pub fn normalize_state(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.x_mean.iter().zip(&self.x_std)).map(|(&v, (m, s))| (v - m) / s).collect()
    }

    /// Normalize a flattened `T x d_u` control sequence.
    pub fn normalize_controls(&self, u: &[f64]) -> Vec<f64> {
        let d_u = self.u_mean.len();
        u.iter()
            .enumerate()
            .map(|(i, &v)| (v - self.u_mean[i % d_u]) / self.u_std[i % d_u])
            .collect()
    }
}

/// Learning-rate schedule; cosine annealing from the base rate to zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    CosineToZero,
    Constant,
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Process-supervision weight.
    pub lambda: f64,
    pub grad_clip_norm: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleKind,
    pub seed: u64,
    /// Fraction of the training file carved out for validation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 50,
            lambda: 0.1,
            grad_clip_norm: 1.0,
            weight_decay: 0.01,
            schedule: ScheduleKind::CosineToZero,
            seed: 42,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    /// Per-problem defaults: the rocket's fuel objective benefits from
    /// stronger per-iteration shaping and longer training.
    pub fn defaults(problem: &ControlProblem) -> Self {
        let mut cfg = Self::default();
        if let SystemParams::Rocket(_) = problem.params {
            cfg.lambda = 0.5;
            cfg.epochs = 200;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(TrcError::Config("lambda must be >= 0".into()));
        }
        if self.grad_clip_norm <= 0.0 {
            return Err(TrcError::Config("grad_clip_norm must be > 0".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrcError::Config("batch_size and epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(TrcError::Config("val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One appended row of the per-epoch training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Final-accuracy term: batch-mean squared distance between the final
    /// controls and the oracle controls, in normalized units.
    pub control_loss: f64,
    pub improvement_metric: f64,
    /// Mean trajectory cost per refinement iteration, normalized by the
    /// per-sample initial cost and averaged over the epoch.
    pub mean_cost_per_iter: Vec<f64>,
    /// Lambda-weighted total loss.
    pub total_loss: f64,
    pub learning_rate: f64,
    pub val_control_loss: f64,
    pub skipped_steps: usize,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Decoupled-weight-decay Adam state over a parameter store.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

impl AdamW {
    pub fn new(params: &ParamStore) -> Self {
        AdamW {
            m: params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
            v: params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
            step: 0,
        }
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// One AdamW update. Gradients are first clipped to the global norm
    /// budget; non-finite gradients skip the step entirely (reported via
    /// the return value).
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &mut [Vec<f64>],
        lr: f64,
        clip_norm: f64,
        weight_decay: f64,
    ) -> bool {
        let mut sq = 0.0;
        for g in grads.iter() {
            for &v in g {
                sq += v * v;
            }
        }
        if !sq.is_finite() {
            return false;
        }
        let norm = sq.sqrt();
        if norm > clip_norm {
            let s = clip_norm / norm;
            for g in grads.iter_mut() {
                for v in g.iter_mut() {
                    *v *= s;
                }
            }
        }
        self.step += 1;
        let bc1 = 1.0 - ADAM_B1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_B2.powi(self.step as i32);
        for (ti, t) in params.tensors.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[ti], &mut self.v[ti], &grads[ti]);
            for i in 0..t.data.len() {
                m[i] = ADAM_B1 * m[i] + (1.0 - ADAM_B1) * g[i];
                v[i] = ADAM_B2 * v[i] + (1.0 - ADAM_B2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                t.data[i] -= lr * (mh / (vh.sqrt() + ADAM_EPS) + weight_decay * t.data[i]);
            }
        }
        true
    }
}

/// Cosine-annealed learning rate for 1-based step `t` of `total`.
pub fn schedule_lr(kind: ScheduleKind, base: f64, step: usize, total: usize) -> f64 {
    match kind {
        ScheduleKind::Constant => base,
        ScheduleKind::CosineToZero => {
            let frac = step as f64 / total.max(1) as f64;
            base * 0.5 * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
        }
    }
}

/// Build the process-supervision loss on the tape:
/// `|u_K - u*|^2 - lambda * mean_k(Jn_{k-1} - Jn_k)`, batch-averaged, with
/// costs normalized per sample by the initial cost. Samples with a zero
/// initial cost contribute no improvement term.
pub fn process_supervision_loss(
    tape: &mut Tape,
    pass: &ForwardPass,
    u_star: &[f64],
    norm: &Normalizer,
    lambda: f64,
) -> Result<TensorId> {
    let k_iters = pass.control_ids.len() - 1;
    let batch = pass.record.batch;
    let n_ctrl = pass.record.controls_per_iter[0].len() / batch;

    // Final accuracy in normalized control units.
    let u_k = *pass.control_ids.last().unwrap();
    let star = tape.constant(u_star.to_vec(), vec![batch, n_ctrl])?;
    let diff = tape.sub(u_k, star)?;
    let d_u = norm.u_mean.len();
    let istd: Vec<f64> = (0..n_ctrl).map(|i| 1.0 / norm.u_std[i % d_u]).collect();
    let istd = tape.constant(istd, vec![n_ctrl])?;
    let diff_n = tape.mul(diff, istd)?;
    let sq = tape.square(diff_n);
    let per_sample = tape.sum_last(sq)?;
    let bc = tape.mean(per_sample);
    if lambda == 0.0 || k_iters < 2 {
        return Ok(bc);
    }

    // Improvement reward over iterations 1..K-1. The divisor is the J0
    // tensor itself (adjusted to 1 on degenerate zero-cost samples, which
    // the mask removes), so gradients flow through the normalization too.
    let j0_vals = &pass.record.costs_per_iter[0];
    let mask: Vec<f64> = j0_vals.iter().map(|&j| if j > 0.0 { 1.0 } else { 0.0 }).collect();
    let inv_mask: Vec<f64> = mask.iter().map(|m| 1.0 - m).collect();
    let mask_t = tape.constant(mask, vec![batch, 1])?;
    let inv_mask_t = tape.constant(inv_mask, vec![batch, 1])?;
    let j0_masked = tape.mul(pass.cost_ids[0], mask_t)?;
    let j0_adj = tape.add(j0_masked, inv_mask_t)?;
    let mut imp: Option<TensorId> = None;
    for k in 1..k_iters {
        let prev = tape.div(pass.cost_ids[k - 1], j0_adj)?;
        let cur = tape.div(pass.cost_ids[k], j0_adj)?;
        let d = tape.sub(prev, cur)?;
        imp = Some(match imp {
            Some(acc) => tape.add(acc, d)?,
            None => d,
        });
    }
    let imp = tape.scale(imp.expect("k_iters >= 2"), 1.0 / (k_iters as f64 - 1.0));
    let imp = tape.mul(imp, mask_t)?;
    let imp = tape.mean(imp);
    let imp = tape.scale(imp, lambda);
    tape.sub(bc, imp)
}

/// Batch improvement metric: average per-transition relative cost
/// reduction, normalized by the initial cost. `costs[k][b]` is the cost of
/// sample `b` after iteration `k`; transitions up to `K-1` enter (the paper
/// metric excludes the final iteration's transition). Zero-initial-cost
/// samples are excluded from the average.
pub fn improvement_metric(costs: &[Vec<f64>]) -> f64 {
    let k_plus_1 = costs.len();
    if k_plus_1 < 3 {
        return 0.0;
    }
    let k_iters = k_plus_1 - 1;
    let batch = costs[0].len();
    let mut total = 0.0;
    let mut valid = 0usize;
    for b in 0..batch {
        let j0 = costs[0][b];
        if j0 <= 0.0 {
            continue;
        }
        valid += 1;
        for k in 0..k_iters - 1 {
            total += (costs[k][b] - costs[k + 1][b]) / j0;
        }
    }
    if valid == 0 {
        return 0.0;
    }
    total / (valid as f64 * (k_iters as f64 - 1.0))
}

/// Artifacts of one training run.
pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub final_params: ParamStore,
    /// Parameters at the best validation control loss.
    pub best_params: ParamStore,
    pub best_epoch: usize,
    pub metrics: Vec<MetricsRecord>,
    pub normalizer: Normalizer,
}

fn batch_inputs(samples: &[Sample], idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let mut x0 = Vec::with_capacity(idx.len() * samples[0].x0.len());
    let mut u_star = Vec::with_capacity(idx.len() * samples[0].u_star.len());
    for &i in idx {
        x0.extend_from_slice(&samples[i].x0);
        u_star.extend_from_slice(&samples[i].u_star);
    }
    (x0, u_star)
}

/// Mean validation control loss (normalized units), computed without
/// recording gradients.
fn validation_loss(
    params: &ParamStore,
    cfg: &TrcConfig,
    problem: &ControlProblem,
    norm: &Normalizer,
    samples: &[Sample],
    idx: &[usize],
) -> Result<f64> {
    if idx.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for chunk in idx.chunks(256) {
        let (x0, u_star) = batch_inputs(samples, chunk);
        let mut tape = Tape::new();
        let p = BoundParams::new(params, &mut tape, false)?;
        let pass = forward(
            &mut tape, &p, cfg, problem, norm, &x0, chunk.len(), cfg.outer_iters, cfg.inner_cycles,
        )?;
        let u_k = pass.record.controls_per_iter.last().unwrap();
        let d_u = norm.u_mean.len();
        for b in 0..chunk.len() {
            let n_ctrl = u_star.len() / chunk.len();
            let mut s = 0.0;
            for i in 0..n_ctrl {
                let d = (u_k[b * n_ctrl + i] - u_star[b * n_ctrl + i]) / norm.u_std[i % d_u];
                s += d * d;
            }
            total += s;
        }
    }
    Ok(total / idx.len() as f64)
}

/// Run process-supervised training. Deterministic under the config seed;
/// returns per-epoch metrics plus final and best-validation parameters.
pub fn train(
    problem: &ControlProblem,
    samples: &[Sample],
    trc_cfg: &TrcConfig,
    train_cfg: &TrainConfig,
    mut progress: Option<&mut dyn FnMut(&MetricsRecord)>,
) -> Result<TrainOutcome> {
    trc_cfg.validate()?;
    train_cfg.validate()?;
    if samples.is_empty() {
        return Err(TrcError::Training("dataset is empty".into()));
    }
    let normalizer = Normalizer::fit(samples, problem.d_x, problem.d_u)?;

    // 90/10 train/validation split by seeded shuffle.
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    order.shuffle(&mut rng);
    let n_val = ((samples.len() as f64) * train_cfg.val_fraction).floor() as usize;
    let n_train = samples.len() - n_val;
    let (train_idx, val_idx) = order.split_at(n_train);
    let train_idx = train_idx.to_vec();
    let val_idx = val_idx.to_vec();

    let mut params = crate::model::init_params(trc_cfg, train_cfg.seed);
    let mut opt = AdamW::new(&params);
    let steps_per_epoch = train_idx.len().div_ceil(train_cfg.batch_size);
    let total_steps = steps_per_epoch * train_cfg.epochs;

    let mut metrics = Vec::with_capacity(train_cfg.epochs);
    let mut best_params = params.clone();
    let mut best_epoch = 0usize;
    let mut best_val = f64::INFINITY;
    let mut nan_epochs = 0usize;

    for epoch in 0..train_cfg.epochs {
        let mut epoch_order = train_idx.clone();
        let mut erng = ChaCha8Rng::seed_from_u64(train_cfg.seed ^ ((epoch as u64 + 1) << 20));
        epoch_order.shuffle(&mut erng);

        let mut ep_bc = 0.0;
        let mut ep_imp = 0.0;
        let mut ep_total = 0.0;
        let mut ep_cost_curve = vec![0.0; trc_cfg.outer_iters + 1];
        let mut ep_batches = 0usize;
        let mut skipped = 0usize;
        let mut last_lr = 0.0;

        for chunk in epoch_order.chunks(train_cfg.batch_size) {
            let (x0, u_star) = batch_inputs(samples, chunk);
            let mut tape = Tape::new();
            let bound = BoundParams::new(&params, &mut tape, true)?;
            let pass = forward(
                &mut tape,
                &bound,
                trc_cfg,
                problem,
                &normalizer,
                &x0,
                chunk.len(),
                trc_cfg.outer_iters,
                trc_cfg.inner_cycles,
            )?;
            let loss = process_supervision_loss(&mut tape, &pass, &u_star, &normalizer, train_cfg.lambda)?;
            let loss_val = tape.data(loss)[0];
            if !loss_val.is_finite() {
                return Err(TrcError::Training(format!(
                    "non-finite loss at epoch {epoch}: batch of {} starting with sample {}",
                    chunk.len(),
                    chunk[0]
                )));
            }
            tape.backward(loss)?;
            let mut grads: Vec<Vec<f64>> = bound
                .ids
                .iter()
                .zip(&params.tensors)
                .map(|(&id, t)| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.data.len()]))
                .collect();

            let lr = schedule_lr(
                train_cfg.schedule,
                train_cfg.learning_rate,
                opt.step_index() + 1,
                total_steps,
            );
            last_lr = lr;
            if !opt.step(&mut params, &mut grads, lr, train_cfg.grad_clip_norm, train_cfg.weight_decay) {
                skipped += 1;
            }

            // Epoch metrics from this batch's forward pass.
            let u_k = pass.record.controls_per_iter.last().unwrap();
            let n_ctrl = u_k.len() / chunk.len();
            let d_u = normalizer.u_mean.len();
            let mut bc = 0.0;
            for b in 0..chunk.len() {
                for i in 0..n_ctrl {
                    let d = (u_k[b * n_ctrl + i] - u_star[b * n_ctrl + i]) / normalizer.u_std[i % d_u];
                    bc += d * d;
                }
            }
            bc /= chunk.len() as f64;
            let imp = improvement_metric(&pass.record.costs_per_iter);
            ep_bc += bc;
            ep_imp += imp;
            ep_total += loss_val;
            for (k, costs) in pass.record.costs_per_iter.iter().enumerate() {
                let mut acc = 0.0;
                let mut cnt = 0usize;
                for b in 0..chunk.len() {
                    let j0 = pass.record.costs_per_iter[0][b];
                    if j0 > 0.0 {
                        acc += costs[b] / j0;
                        cnt += 1;
                    }
                }
                if cnt > 0 {
                    ep_cost_curve[k] += acc / cnt as f64;
                }
            }
            ep_batches += 1;
        }

        let nb = ep_batches.max(1) as f64;
        let val = validation_loss(&params, trc_cfg, problem, &normalizer, samples, &val_idx)?;
        let record = MetricsRecord {
            epoch,
            control_loss: ep_bc / nb,
            improvement_metric: ep_imp / nb,
            mean_cost_per_iter: ep_cost_curve.iter().map(|v| v / nb).collect(),
            total_loss: ep_total / nb,
            learning_rate: last_lr,
            val_control_loss: val,
            skipped_steps: skipped,
        };
        if record.total_loss.is_nan() {
            nan_epochs += 1;
            if nan_epochs >= 3 {
                return Err(TrcError::Training(
                    "loss was NaN for 3 consecutive epochs; aborting with partial artifacts".into(),
                ));
            }
        } else {
            nan_epochs = 0;
        }
        if !val.is_nan() && val < best_val {
            best_val = val;
            best_params = params.clone();
            best_epoch = epoch;
        }
        if let Some(cb) = progress.as_deref_mut() {
            cb(&record);
        }
        metrics.push(record);
    }
    if best_val.is_infinite() {
        best_params = params.clone();
        best_epoch = train_cfg.epochs.saturating_sub(1);
    }

    Ok(TrainOutcome { final_params: params, best_params, best_epoch, metrics, normalizer })
}

// ── Evaluation ──────────────────────────────────────────────────────

/// What produces the evaluated control sequences.
pub enum ControlSource<'a> {
    /// The refinement network.
    Model { params: &'a ParamStore, cfg: &'a TrcConfig },
    /// Replay the dataset's own oracle controls through the identical
    /// report path (cost ratio is then exactly 1).
    OracleReplay,
}

/// Aggregate evaluation of a checkpoint (or oracle replay) on a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub mean_trc_cost: f64,
    pub mean_oracle_cost: f64,
    pub cost_ratio: f64,
    /// Mean stored oracle cost from the dataset file (replay sanity).
    pub mean_stored_oracle_cost: f64,
    pub mean_terminal_error_norm: f64,
    pub median_terminal_error_norm: f64,
    /// Mean cost after each refinement iteration (pre-projection).
    pub mean_cost_per_iter: Vec<f64>,
    /// Mean of per-sample J_k / J_0.
    pub mean_normalized_cost_per_iter: Vec<f64>,
    pub monotone_fraction: f64,
    pub improvement_metric: f64,
    pub median_residual_norm_per_iter: Vec<f64>,
    /// Cost quantiles per iteration: 25th, 50th, 75th.
    pub cost_quantiles_per_iter: Vec<[f64; 3]>,
    /// Mean pairwise z_H distance per iteration and its final/initial ratio.
    pub latent_spread_per_iter: Vec<f64>,
    pub latent_collapse_ratio: f64,
    /// Fraction of samples whose first residual has positive cosine
    /// similarity with the negated true cost gradient at u0.
    pub descent_alignment_fraction: f64,
    pub rocket: Option<RocketEvalStats>,
}

/// Constraint statistics for powered-descent evaluations, computed on the
/// norm-projected reported controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocketEvalStats {
    pub mean_fuel: f64,
    pub mean_oracle_fuel: f64,
    pub thrust_norm_min: f64,
    pub thrust_norm_max: f64,
    pub glideslope_depth_max: f64,
    /// Fraction of trajectories with glideslope violation depth < 5 m.
    pub glideslope_ok_fraction: f64,
    pub mean_touchdown_speed: f64,
}

/// Per-sample per-iteration rows for the refinement export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefinementRow {
    pub sample_id: usize,
    pub iteration: usize,
    pub cost: f64,
    /// Residual norm that produced this iterate (0 for iteration 0).
    pub residual_norm: f64,
    pub u_mean: f64,
    pub u_std: f64,
    pub u_min: f64,
    pub u_max: f64,
}

/// Per-sample per-iteration z_H snapshot plus the sample's final cost.
#[derive(Debug, Clone)]
pub struct LatentSnapshot {
    pub sample_id: usize,
    pub iteration: usize,
    pub z: Vec<f64>,
    pub final_cost: f64,
}

/// Full evaluation artifacts: the aggregate report plus per-sample rows
/// backing the refinement and latent exports.
pub struct Evaluation {
    pub report: EvalReport,
    pub refinement_rows: Vec<RefinementRow>,
    pub latents: Vec<LatentSnapshot>,
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

fn mean_pairwise_distance(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            total += d.sqrt();
            count += 1;
        }
    }
    total / count as f64
}

/// Fixed evaluation chunk so results are independent of dataset size
/// batching effects.
const EVAL_CHUNK: usize = 256;

/// Evaluate a control source over a test set. The oracle baseline is
/// re-simulated through the same code path as the evaluated controls, so
/// replaying the oracle's own controls yields a cost ratio of exactly 1.
pub fn evaluate(
    source: &ControlSource,
    problem: &ControlProblem,
    norm: &Normalizer,
    samples: &[Sample],
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(TrcError::Contract("evaluation dataset is empty".into()));
    }
    let (k_iters, n_cycles, d_z) = match source {
        ControlSource::Model { cfg, .. } => (cfg.outer_iters, cfg.inner_cycles, cfg.d_z),
        ControlSource::OracleReplay => (3, 1, 1),
    };
    let n_ctrl = problem.horizon * problem.d_u;

    let mut trc_costs = Vec::with_capacity(samples.len());
    let mut oracle_costs = Vec::with_capacity(samples.len());
    let mut terminal_norms = Vec::with_capacity(samples.len());
    let mut costs_per_iter: Vec<Vec<f64>> = vec![Vec::new(); k_iters + 1];
    let mut residual_norms: Vec<Vec<f64>> = vec![Vec::new(); k_iters];
    let mut monotone = 0usize;
    let mut refinement_rows = Vec::new();
    let mut latents: Vec<LatentSnapshot> = Vec::new();
    let mut aligned = 0usize;
    let mut align_total = 0usize;
    let mut rocket_fuel = Vec::new();
    let mut rocket_oracle_fuel = Vec::new();
    let mut thrust_min = f64::INFINITY;
    let mut thrust_max: f64 = 0.0;
    let mut depth_max: f64 = 0.0;
    let mut depth_ok = 0usize;
    let mut touchdown = Vec::new();

    for (chunk_start, chunk) in samples.chunks(EVAL_CHUNK).enumerate().map(|(i, c)| (i * EVAL_CHUNK, c)) {
        let idx: Vec<usize> = (0..chunk.len()).collect();
        let (x0, _) = batch_inputs(chunk, &idx);

        // Per-iteration controls for this chunk.
        let (record, latent_rows): (crate::model::ForwardRecord, Vec<Vec<Vec<f64>>>) = match source {
            ControlSource::Model { params, cfg } => {
                let mut tape = Tape::new();
                let p = BoundParams::new(params, &mut tape, false)?;
                let pass = forward(&mut tape, &p, cfg, problem, norm, &x0, chunk.len(), k_iters, n_cycles)?;
                let lat = pass
                    .record
                    .latents_per_iter
                    .iter()
                    .map(|flat| flat.chunks(d_z).map(|r| r.to_vec()).collect())
                    .collect();
                (pass.record, lat)
            }
            ControlSource::OracleReplay => {
                // u_star at every iteration; zero residuals; no latents.
                let mut controls = Vec::with_capacity(chunk.len() * n_ctrl);
                for s in chunk {
                    controls.extend_from_slice(&s.u_star);
                }
                let mut costs = Vec::with_capacity(chunk.len());
                for s in chunk {
                    costs.push(simulate(problem, &s.x0, &s.u_star)?.cost);
                }
                let rec = crate::model::ForwardRecord {
                    batch: chunk.len(),
                    controls_per_iter: vec![controls.clone(); k_iters + 1],
                    costs_per_iter: vec![costs.clone(); k_iters + 1],
                    latents_per_iter: Vec::new(),
                    errors_per_iter: Vec::new(),
                    residual_norms: vec![vec![0.0; chunk.len()]; k_iters],
                    residuals_per_iter: vec![vec![0.0; chunk.len() * n_ctrl]; k_iters],
                };
                (rec, Vec::new())
            }
        };

        // Oracle baseline through the identical rollout path.
        for s in chunk {
            oracle_costs.push(simulate(problem, &s.x0, &s.u_star)?.cost);
        }

        // Criterion-level descent alignment: cosine between the first
        // residual and the negated cost gradient at u0, batched.
        if !record.residuals_per_iter.is_empty() && !record.residuals_per_iter[0].iter().all(|&v| v == 0.0) {
            let u0 = &record.controls_per_iter[0];
            let mut tape = Tape::new();
            let x0_t = tape.constant(x0.clone(), vec![chunk.len(), problem.d_x])?;
            let u_t = tape.leaf(u0.clone(), vec![chunk.len(), n_ctrl], true)?;
            let rec = crate::dynamics::rollout_op(&mut tape, problem, x0_t, u_t)?;
            let loss = tape.sum(rec.costs);
            tape.backward(loss)?;
            let grad = tape.grad(u_t).expect("controls require grad");
            let du1 = &record.residuals_per_iter[0];
            for b in 0..chunk.len() {
                let g = &grad[b * n_ctrl..(b + 1) * n_ctrl];
                let d = &du1[b * n_ctrl..(b + 1) * n_ctrl];
                let dot: f64 = g.iter().zip(d).map(|(x, y)| -x * y).sum();
                let gn: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dn: f64 = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                if gn > 1e-12 && dn > 1e-12 {
                    align_total += 1;
                    if dot / (gn * dn) > 0.0 {
                        aligned += 1;
                    }
                }
            }
        }

        for b in 0..chunk.len() {
            let sid = chunk_start + b;
            let s = &chunk[b];

            // Per-iteration bookkeeping (pre-projection).
            let sample_costs: Vec<f64> = record.costs_per_iter.iter().map(|c| c[b]).collect();
            let mono = sample_costs.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12));
            if mono {
                monotone += 1;
            }
            for (k, &c) in sample_costs.iter().enumerate() {
                costs_per_iter[k].push(c);
                let u = &record.controls_per_iter[k][b * n_ctrl..(b + 1) * n_ctrl];
                let mean = u.iter().sum::<f64>() / u.len() as f64;
                let var = u.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / u.len() as f64;
                refinement_rows.push(RefinementRow {
                    sample_id: sid,
                    iteration: k,
                    cost: c,
                    residual_norm: if k == 0 { 0.0 } else { record.residual_norms[k - 1][b] },
                    u_mean: mean,
                    u_std: var.sqrt(),
                    u_min: u.iter().cloned().fold(f64::INFINITY, f64::min),
                    u_max: u.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                });
            }
            for k in 0..k_iters {
                residual_norms[k].push(record.residual_norms[k][b]);
            }

            // Reported controls: final iterate, norm-projected for the
            // rocket, then re-simulated.
            let mut u_final = record.controls_per_iter[k_iters][b * n_ctrl..(b + 1) * n_ctrl].to_vec();
            if let SystemParams::Rocket(p) = &problem.params {
                project_thrust_norm(p, &mut u_final);
            }
            let traj = simulate(problem, &s.x0, &u_final)?;
            trc_costs.push(traj.cost);
            let x_t = traj.states.last().unwrap();
            let e = crate::dynamics::terminal_error(problem, x_t);
            terminal_norms.push(e.iter().map(|v| v * v).sum::<f64>().sqrt());

            if let SystemParams::Rocket(p) = &problem.params {
                rocket_fuel.push(s.x0[6] - x_t[6]);
                let otraj = simulate(problem, &s.x0, &s.u_star)?;
                rocket_oracle_fuel.push(s.x0[6] - otraj.states.last().unwrap()[6]);
                for step in u_final.chunks(3) {
                    let n = (step[0] * step[0] + step[1] * step[1] + step[2] * step[2]).sqrt();
                    thrust_min = thrust_min.min(n);
                    thrust_max = thrust_max.max(n);
                }
                let depth = glideslope_depth(p, &traj.states);
                depth_max = depth_max.max(depth);
                if depth < 5.0 {
                    depth_ok += 1;
                }
                let speed = (3..6).map(|i| (x_t[i] - s.x_target[i]).powi(2)).sum::<f64>().sqrt();
                touchdown.push(speed);
            }

            for (k, rows) in latent_rows.iter().enumerate() {
                latents.push(LatentSnapshot {
                    sample_id: sid,
                    iteration: k,
                    z: rows[b].clone(),
                    final_cost: *trc_costs.last().unwrap(),
                });
            }
        }
    }

    let n = samples.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let mean_trc = mean(&trc_costs);
    let mean_oracle = mean(&oracle_costs);

    let mut latent_spread_per_iter = Vec::new();
    if !latents.is_empty() {
        for k in 0..=k_iters {
            let rows: Vec<Vec<f64>> =
                latents.iter().filter(|l| l.iteration == k).map(|l| l.z.clone()).collect();
            latent_spread_per_iter.push(mean_pairwise_distance(&rows));
        }
    }
    let latent_collapse_ratio = match latent_spread_per_iter.as_slice() {
        [] => f64::NAN,
        spreads => spreads[spreads.len() - 1] / spreads[0].max(1e-12),
    };

    let mean_cost_per_iter: Vec<f64> = costs_per_iter.iter().map(|c| mean(c)).collect();
    let mean_normalized_cost_per_iter: Vec<f64> = (0..=k_iters)
        .map(|k| {
            let mut acc = 0.0;
            let mut cnt = 0usize;
            for b in 0..samples.len() {
                let j0 = costs_per_iter[0][b];
                if j0 > 0.0 {
                    acc += costs_per_iter[k][b] / j0;
                    cnt += 1;
                }
            }
            acc / cnt.max(1) as f64
        })
        .collect();
    let cost_quantiles_per_iter: Vec<[f64; 3]> = costs_per_iter
        .iter()
        .map(|c| {
            let mut v = c.clone();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            [quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75)]
        })
        .collect();

    let per_iter_costs_by_k: Vec<Vec<f64>> = costs_per_iter.clone();
    let improvement = improvement_metric(&per_iter_costs_by_k);

    let mut term_sorted = terminal_norms.clone();
    let median_term = median(&mut term_sorted);

    let rocket = if matches!(problem.params, SystemParams::Rocket(_)) {
        Some(RocketEvalStats {
            mean_fuel: mean(&rocket_fuel),
            mean_oracle_fuel: mean(&rocket_oracle_fuel),
            thrust_norm_min: thrust_min,
            thrust_norm_max: thrust_max,
            glideslope_depth_max: depth_max,
            glideslope_ok_fraction: depth_ok as f64 / n,
            mean_touchdown_speed: mean(&touchdown),
        })
    } else {
        None
    };

    let report = EvalReport {
        n_samples: samples.len(),
        mean_trc_cost: mean_trc,
        mean_oracle_cost: mean_oracle,
        cost_ratio: mean_trc / mean_oracle,
        mean_stored_oracle_cost: mean(&samples.iter().map(|s| s.j_star).collect::<Vec<_>>()),
        mean_terminal_error_norm: mean(&terminal_norms),
        median_terminal_error_norm: median_term,
        mean_cost_per_iter,
        mean_normalized_cost_per_iter,
        monotone_fraction: monotone as f64 / n,
        improvement_metric: improvement,
        median_residual_norm_per_iter: residual_norms
            .iter()
            .map(|v| {
                let mut c = v.clone();
                median(&mut c)
            })
            .collect(),
        cost_quantiles_per_iter,
        latent_spread_per_iter,
        latent_collapse_ratio,
        descent_alignment_fraction: if align_total > 0 { aligned as f64 / align_total as f64 } else { f64::NAN },
        rocket,
    };

    Ok(Evaluation { report, refinement_rows, latents })
}

/// Gradient check of the complete training loss on a tiny configuration;
/// used by tests and the acceptance suite.
pub fn loss_gradient_max_rel_err(
    problem: &ControlProblem,
    cfg: &TrcConfig,
    train_cfg: &TrainConfig,
    samples: &[Sample],
    probes_per_tensor: usize,
) -> Result<f64> {
    let norm = Normalizer::fit(samples, problem.d_x, problem.d_u)?;
    let idx: Vec<usize> = (0..samples.len()).collect();
    let (x0, u_star) = batch_inputs(samples, &idx);
    let mut params = crate::model::init_params(cfg, 123);

    let eval_loss = |params: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let p = BoundParams::new(params, &mut tape, false)?;
        let pass = forward(&mut tape, &p, cfg, problem, &norm, &x0, samples.len(), cfg.outer_iters, cfg.inner_cycles)?;
        let loss = process_supervision_loss(&mut tape, &pass, &u_star, &norm, train_cfg.lambda)?;
        Ok(tape.data(loss)[0])
    };

    let mut tape = Tape::new();
    let bound = BoundParams::new(&params, &mut tape, true)?;
    let pass = forward(&mut tape, &bound, cfg, problem, &norm, &x0, samples.len(), cfg.outer_iters, cfg.inner_cycles)?;
    let loss = process_supervision_loss(&mut tape, &pass, &u_star, &norm, train_cfg.lambda)?;
    tape.backward(loss)?;
    let grads: Vec<Vec<f64>> = bound
        .ids
        .iter()
        .zip(&params.tensors)
        .map(|(&id, t)| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.data.len()]))
        .collect();
    drop(tape);

    let h = 1e-5;
    let mut worst = 0.0_f64;
    let n_tensors = params.tensors.len();
    for ti in 0..n_tensors {
        let len = params.tensors[ti].data.len();
        for probe in 0..probes_per_tensor.min(len) {
            // Spread probes across the tensor deterministically.
            let i = (probe * 2654435761) % len;
            let orig = params.tensors[ti].data[i];
            params.tensors[ti].data[i] = orig + h;
            let up = eval_loss(&params)?;
            params.tensors[ti].data[i] = orig - h;
            let dn = eval_loss(&params)?;
            params.tensors[ti].data[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            let analytic = grads[ti][i];
            // The floor absorbs central-difference roundoff
            // (eps * |loss| / h ~ 1e-7) on near-zero gradient entries.
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}


#[cfg(test)]
mod bench_tests {
    use super::*;
    use crate::dynamics::ControlProblem;
    use crate::model::TrcConfig;
    use crate::oracle::Sample;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    #[ignore]
    fn bench_training_step() {
        let problem = ControlProblem::vdp();
        let mut cfg = TrcConfig::defaults(&problem);
        cfg.d_z = 128;
        cfg.d_h = 256;
        cfg.blocks = 2;
        cfg.outer_iters = 3;
        cfg.inner_cycles = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let samples: Vec<Sample> = (0..64)
            .map(|_| Sample {
                x0: vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
                x_target: vec![0.0, 0.0],
                u_star: (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                j_star: 100.0,
            })
            .collect();
        let tc = TrainConfig { epochs: 1, batch_size: 64, ..TrainConfig::default() };
        let t0 = std::time::Instant::now();
        let out = train(&problem, &samples, &cfg, &tc, None).unwrap();
        println!(
            "1 epoch (1 step of B=58 + val 6): {:?}; loss {:.3}",
            t0.elapsed(),
            out.metrics[0].total_loss
        );
        // Timed pure steps: 3 batches of 64 on the full set.
        let tc = TrainConfig { epochs: 3, batch_size: 64, val_fraction: 0.0, ..TrainConfig::default() };
        let t0 = std::time::Instant::now();
        let _ = train(&problem, &samples, &cfg, &tc, None).unwrap();
        println!("3 steps of B=64: {:?} ({:?}/step)", t0.elapsed(), t0.elapsed() / 3);
    }
}
