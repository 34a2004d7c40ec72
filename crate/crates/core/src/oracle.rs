//! Classical trajectory optimization used both to generate supervised
//! datasets and to verify the learned refinement operator.
//!
//! The workhorse is direct shooting: Adam on the flattened control sequence,
//! differentiated through the RK4 rollout, with a per-sample backtracking
//! line search so the accepted cost sequence never increases. When the
//! momentum direction stops improving (stale after large early steps) the
//! moments are reset from the raw gradient before declaring stationarity.
//! Rocket constraints (thrust-norm annulus, glideslope cone, touchdown
//! speed) enter as quadratic hinge penalties annealed over outer rounds.
//!
//! A finite-horizon Riccati recursion provides the closed-form LQR solution
//! used as an independent optimality oracle.

use crate::autodiff::{Tape, TensorId};
use crate::dynamics::{
    clip_controls, project_thrust_norm, rollout_op, simulate, ControlProblem, SystemParams,
};
use crate::error::{Result, TrcError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Penalty weights for rocket constraints, annealed by `growth` per round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PenaltyWeights {
    /// Quadratic hinge on the thrust norm outside `[t_min, t_max]`, per N^2.
    pub thrust_norm: f64,
    /// Quadratic hinge on glideslope cone violation, per m^2.
    pub glideslope: f64,
    /// Extra annealed weight on touchdown speed beyond `v_tol`, per (m/s)^2.
    pub terminal_velocity: f64,
    pub growth: f64,
    pub rounds: usize,
}

impl Default for PenaltyWeights {
    fn default() -> Self {
        Self { thrust_norm: 1e-4, glideslope: 1.0, terminal_velocity: 10.0, growth: 10.0, rounds: 3 }
    }
}

/// Direct-shooting solver configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub max_iters: usize,
    /// Step size in normalized control units; the effective step is
    /// `step_size * max(|u_min|, |u_max|)`.
    pub step_size: f64,
    pub optimizer: OptimizerKind,
    /// Relative accepted-cost change over `convergence_window` iterations
    /// below which a sample is declared converged.
    pub convergence_tol: f64,
    pub convergence_window: usize,
    pub penalty_weights: PenaltyWeights,
    pub restarts: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    AdamOnControls,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            step_size: 0.05,
            optimizer: OptimizerKind::AdamOnControls,
            convergence_tol: 1e-7,
            convergence_window: 10,
            penalty_weights: PenaltyWeights::default(),
            restarts: 3,
            seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(TrcError::Config("oracle max_iters must be >= 1".into()));
        }
        if self.step_size <= 0.0 {
            return Err(TrcError::Config("oracle step_size must be positive".into()));
        }
        if self.convergence_tol <= 0.0 {
            return Err(TrcError::Config("oracle convergence_tol must be positive".into()));
        }
        if self.restarts == 0 {
            return Err(TrcError::Config("oracle restarts must be >= 1".into()));
        }
        Ok(())
    }
}

/// One supervised training record: initial state, target, the optimal
/// controls found by the oracle, and their trajectory cost.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    pub x0: Vec<f64>,
    pub x_target: Vec<f64>,
    /// Row-major `T x d_u`.
    pub u_star: Vec<f64>,
    pub j_star: f64,
}

/// Finite-horizon discrete LQR instance, used as a verification oracle.
#[derive(Debug, Clone)]
pub struct LqrProblem {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub qf: Vec<Vec<f64>>,
    pub horizon: usize,
}

impl LqrProblem {
    /// Discretized double integrator, the standard verification instance.
    pub fn double_integrator(dt: f64, horizon: usize) -> Self {
        LqrProblem {
            a: vec![vec![1.0, dt], vec![0.0, 1.0]],
            b: vec![vec![0.0], vec![dt]],
            q: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            r: vec![vec![1.0]],
            qf: vec![vec![10.0, 0.0], vec![0.0, 10.0]],
            horizon,
        }
    }
}

// ── Small dense matrix helpers (dimensions are tiny) ────────────────

fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut c = vec![vec![0.0; n]; m];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i][p];
            for j in 0..n {
                c[i][j] += aip * b[p][j];
            }
        }
    }
    c
}

fn mat_t(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (m, n) = (a.len(), a[0].len());
    let mut t = vec![vec![0.0; m]; n];
    for (i, row) in a.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            t[j][i] = v;
        }
    }
    t
}

fn mat_add(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect())
        .collect()
}

fn mat_neg(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter().map(|r| r.iter().map(|v| -v).collect()).collect()
}

fn mat_vec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(x).map(|(c, v)| c * v).sum()).collect()
}

/// Solve `A X = B` by Gauss-Jordan with partial pivoting.
fn mat_solve(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    let w = b[0].len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().chain(rb).copied().collect())
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())
            .unwrap();
        if m[piv][col].abs() < 1e-12 {
            return Err(TrcError::Numerical("singular matrix in Riccati gain solve".into()));
        }
        m.swap(col, piv);
        let d = m[col][col];
        for v in &mut m[col] {
            *v /= d;
        }
        for row in 0..n {
            if row != col {
                let f = m[row][col];
                if f != 0.0 {
                    for j in 0..n + w {
                        let sub = f * m[col][j];
                        m[row][j] -= sub;
                    }
                }
            }
        }
    }
    Ok(m.into_iter().map(|row| row[n..].to_vec()).collect())
}

/// Backward Riccati recursion for the finite-horizon LQR problem. Returns
/// the optimal cost from `x0` and the time-varying gain sequence `K_t`
/// (the optimal feedback is `u_t = -K_t x_t`).
pub fn riccati_lqr(lqr: &LqrProblem, x0: &[f64]) -> Result<(f64, Vec<Vec<Vec<f64>>>)> {
    let at = mat_t(&lqr.a);
    let bt = mat_t(&lqr.b);
    let mut p = lqr.qf.clone();
    let mut gains = vec![Vec::new(); lqr.horizon];
    for t in (0..lqr.horizon).rev() {
        let pb = mat_mul(&p, &lqr.b);
        let pa = mat_mul(&p, &lqr.a);
        let s = mat_add(&lqr.r, &mat_mul(&bt, &pb)); // R + B'PB
        let k = mat_solve(&s, &mat_mul(&bt, &pa))?; // (R + B'PB)^{-1} B'PA
        // P = Q + A'P(A - BK), symmetrized against drift.
        let abk = mat_add(&lqr.a, &mat_neg(&mat_mul(&lqr.b, &k)));
        p = mat_add(&lqr.q, &mat_mul(&at, &mat_mul(&p, &abk)));
        let pt = mat_t(&p);
        p = mat_add(&p, &pt).iter().map(|r| r.iter().map(|v| 0.5 * v).collect()).collect();
        gains[t] = k;
    }
    let px = mat_vec(&p, x0);
    let j = x0.iter().zip(&px).map(|(a, b)| a * b).sum();
    Ok((j, gains))
}

/// Cost of an explicit control sequence on an LQR instance.
pub fn lqr_cost(lqr: &LqrProblem, x0: &[f64], controls: &[Vec<f64>]) -> f64 {
    let mut x = x0.to_vec();
    let mut cost = 0.0;
    for u in controls {
        let qx = mat_vec(&lqr.q, &x);
        let ru = mat_vec(&lqr.r, u);
        cost += x.iter().zip(&qx).map(|(a, b)| a * b).sum::<f64>();
        cost += u.iter().zip(&ru).map(|(a, b)| a * b).sum::<f64>();
        let ax = mat_vec(&lqr.a, &x);
        let bu = mat_vec(&lqr.b, u);
        x = ax.iter().zip(&bu).map(|(a, b)| a + b).collect();
    }
    let qfx = mat_vec(&lqr.qf, &x);
    cost + x.iter().zip(&qfx).map(|(a, b)| a * b).sum::<f64>()
}

// ── Generic batched monotone shooting ───────────────────────────────

/// Problem-specific pieces of the shooting solver: objective construction
/// on the tape plus bound and scaling metadata.
trait ShootSpec {
    /// Flattened controls per sample.
    fn n_per_sample(&self) -> usize;
    fn rounds(&self) -> usize;
    fn bound_pattern(&self) -> (Vec<f64>, Vec<f64>);
    /// Characteristic control magnitude; the Adam step is
    /// `step_size * scale`.
    fn step_scale(&self) -> f64;
    /// Per-sample optimization objective (`B x 1`) for the sample subset
    /// `idx`, given flat controls of shape `B x n`.
    fn objective(&self, tape: &mut Tape, idx: &[usize], controls: TensorId, round: usize) -> Result<TensorId>;
}

#[derive(Debug, Clone)]
struct SolveResult {
    controls: Vec<f64>,
    objective: f64,
    converged: bool,
    iterations: usize,
    /// Accepted objective values, concatenated across penalty rounds.
    history: Vec<f64>,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const LADDER_DEPTH: usize = 30;
const LADDER_DEPTH_RESET: usize = 40;

fn eval_objective(spec: &dyn ShootSpec, idx: &[usize], flat: &[f64], round: usize) -> Result<Vec<f64>> {
    let n = spec.n_per_sample();
    let mut tape = Tape::new();
    let u = tape.constant(flat.to_vec(), vec![idx.len(), n])?;
    let costs = spec.objective(&mut tape, idx, u, round)?;
    Ok(tape.data(costs).to_vec())
}

fn grad_objective(spec: &dyn ShootSpec, idx: &[usize], flat: &[f64], round: usize) -> Result<Vec<f64>> {
    let n = spec.n_per_sample();
    let mut tape = Tape::new();
    let u = tape.leaf(flat.to_vec(), vec![idx.len(), n], true)?;
    let costs = spec.objective(&mut tape, idx, u, round)?;
    let loss = tape.sum(costs);
    tape.backward(loss)?;
    Ok(tape.grad(u).expect("controls require grad").to_vec())
}

/// Minimize the objective for every sample, restarting from each entry of
/// `inits` and keeping the per-sample best by final-round objective.
fn solve_shooting(spec: &dyn ShootSpec, inits: &[Vec<Vec<f64>>], cfg: &OracleConfig) -> Result<Vec<SolveResult>> {
    cfg.validate()?;
    let n = spec.n_per_sample();
    let n_samples = inits[0].len();
    let (lo, hi) = spec.bound_pattern();
    let eta_base = cfg.step_size * spec.step_scale();
    let mut best: Vec<Option<SolveResult>> = vec![None; n_samples];

    for init in inits {
        let mut u: Vec<Vec<f64>> = init.clone();
        for ub in &mut u {
            clip_controls(ub, &lo, &hi);
        }
        let mut history: Vec<Vec<f64>> = vec![Vec::new(); n_samples];
        let mut converged = vec![false; n_samples];
        let mut iterations = vec![0usize; n_samples];
        let mut c_prev = vec![f64::INFINITY; n_samples];

        for round in 0..spec.rounds() {
            let all: Vec<usize> = (0..n_samples).collect();
            let flat: Vec<f64> = u.iter().flatten().copied().collect();
            c_prev = eval_objective(spec, &all, &flat, round)?;
            if c_prev.iter().any(|c| !c.is_finite()) {
                return Err(TrcError::Divergence(
                    "non-finite objective at round start; lower the step size".into(),
                ));
            }
            let mut round_hist: Vec<Vec<f64>> = c_prev.iter().map(|&c| vec![c]).collect();
            let mut m = vec![vec![0.0; n]; n_samples];
            let mut v = vec![vec![0.0; n]; n_samples];
            let mut t_adam = vec![0usize; n_samples];
            let mut eta_start = vec![eta_base; n_samples];
            let mut active = vec![true; n_samples];
            // Convergence of earlier rounds does not carry over; only the
            // final round's verdict is reported.
            converged.iter_mut().for_each(|c| *c = false);

            for _iter in 0..cfg.max_iters {
                let idx: Vec<usize> = (0..n_samples).filter(|&b| active[b]).collect();
                if idx.is_empty() {
                    break;
                }
                let flat: Vec<f64> = idx.iter().flat_map(|&b| u[b].iter().copied()).collect();
                let grads = grad_objective(spec, &idx, &flat, round)?;

                // Per-sample Adam direction.
                let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(idx.len());
                for (pos, &b) in idx.iter().enumerate() {
                    let g = &grads[pos * n..(pos + 1) * n];
                    t_adam[b] += 1;
                    let bc1 = 1.0 - ADAM_B1.powi(t_adam[b] as i32);
                    let bc2 = 1.0 - ADAM_B2.powi(t_adam[b] as i32);
                    let mut d = vec![0.0; n];
                    for i in 0..n {
                        m[b][i] = ADAM_B1 * m[b][i] + (1.0 - ADAM_B1) * g[i];
                        v[b][i] = ADAM_B2 * v[b][i] + (1.0 - ADAM_B2) * g[i] * g[i];
                        d[i] = (m[b][i] / bc1) / ((v[b][i] / bc2).sqrt() + ADAM_EPS);
                    }
                    dirs.push(d);
                }

                // Backtracking ladder; a second pass restarts the moments
                // from the raw gradient before declaring stationarity.
                let mut accepted = vec![false; idx.len()];
                for phase in 0..2 {
                    if phase == 1 {
                        for (pos, &b) in idx.iter().enumerate() {
                            if accepted[pos] {
                                continue;
                            }
                            let g = &grads[pos * n..(pos + 1) * n];
                            t_adam[b] = 1;
                            for i in 0..n {
                                m[b][i] = (1.0 - ADAM_B1) * g[i];
                                v[b][i] = (1.0 - ADAM_B2) * g[i] * g[i];
                                dirs[pos][i] = g[i] / (g[i].abs() + ADAM_EPS);
                            }
                        }
                    }
                    let mut eta: Vec<f64> = idx.iter().map(|&b| eta_start[b]).collect();
                    let depth = if phase == 0 { LADDER_DEPTH } else { LADDER_DEPTH_RESET };
                    for _attempt in 0..depth {
                        let searching: Vec<usize> = (0..idx.len()).filter(|&p| !accepted[p]).collect();
                        if searching.is_empty() {
                            break;
                        }
                        let mut cand = Vec::with_capacity(searching.len() * n);
                        for &p in &searching {
                            let b = idx[p];
                            let mut c: Vec<f64> = (0..n).map(|i| u[b][i] - eta[p] * dirs[p][i]).collect();
                            clip_controls(&mut c, &lo, &hi);
                            cand.extend_from_slice(&c);
                        }
                        let sub: Vec<usize> = searching.iter().map(|&p| idx[p]).collect();
                        let costs = eval_objective(spec, &sub, &cand, round)?;
                        for (s, &p) in searching.iter().enumerate() {
                            let b = idx[p];
                            if costs[s].is_finite() && costs[s] <= c_prev[b] {
                                u[b].copy_from_slice(&cand[s * n..(s + 1) * n]);
                                c_prev[b] = costs[s];
                                eta_start[b] = (eta[p] * 4.0).min(eta_base);
                                accepted[p] = true;
                            } else {
                                eta[p] *= 0.5;
                            }
                        }
                    }
                    if accepted.iter().all(|&a| a) {
                        break;
                    }
                }

                for (pos, &b) in idx.iter().enumerate() {
                    if accepted[pos] {
                        iterations[b] += 1;
                        round_hist[b].push(c_prev[b]);
                        let h = &round_hist[b];
                        if h.len() > cfg.convergence_window {
                            let old = h[h.len() - 1 - cfg.convergence_window];
                            let now = *h.last().unwrap();
                            if (old - now).abs() < cfg.convergence_tol * now.abs().max(1.0) {
                                active[b] = false;
                                converged[b] = true;
                            }
                        }
                    } else {
                        // Stationary: even the raw-gradient direction
                        // cannot improve the objective.
                        active[b] = false;
                        converged[b] = true;
                    }
                }
            }
            for b in 0..n_samples {
                history[b].extend(round_hist[b].iter().copied());
            }
        }

        for b in 0..n_samples {
            let better = match &best[b] {
                None => true,
                Some(prev) => c_prev[b] < prev.objective,
            };
            if better {
                best[b] = Some(SolveResult {
                    controls: u[b].clone(),
                    objective: c_prev[b],
                    converged: converged[b],
                    iterations: iterations[b],
                    history: history[b].clone(),
                });
            }
        }
    }
    Ok(best.into_iter().map(|r| r.expect("at least one restart")).collect())
}

// ── Shooting on a ControlProblem ────────────────────────────────────

struct ProblemShoot<'a> {
    problem: &'a ControlProblem,
    x0s: &'a [Vec<f64>],
    penalties: &'a PenaltyWeights,
}

impl ShootSpec for ProblemShoot<'_> {
    fn n_per_sample(&self) -> usize {
        self.problem.horizon * self.problem.d_u
    }

    fn rounds(&self) -> usize {
        match self.problem.params {
            SystemParams::Vdp(_) => 1,
            SystemParams::Rocket(_) => self.penalties.rounds.max(1),
        }
    }

    fn bound_pattern(&self) -> (Vec<f64>, Vec<f64>) {
        (self.problem.u_min.clone(), self.problem.u_max.clone())
    }

    fn step_scale(&self) -> f64 {
        self.problem
            .u_min
            .iter()
            .chain(&self.problem.u_max)
            .fold(0.0_f64, |acc, &v| acc.max(v.abs()))
    }

    fn objective(&self, tape: &mut Tape, idx: &[usize], controls: TensorId, round: usize) -> Result<TensorId> {
        let d_x = self.problem.d_x;
        let mut x0 = Vec::with_capacity(idx.len() * d_x);
        for &b in idx {
            x0.extend_from_slice(&self.x0s[b]);
        }
        let x0 = tape.constant(x0, vec![idx.len(), d_x])?;
        let rec = rollout_op(tape, self.problem, x0, controls)?;
        match &self.problem.params {
            SystemParams::Vdp(_) => Ok(rec.costs),
            SystemParams::Rocket(p) => {
                let rho = self.penalties.growth.powi(round as i32);
                // Thrust-norm annulus hinge, summed over steps.
                let mut pen: Option<TensorId> = None;
                for &u_t in &rec.step_controls {
                    let tn = tape.l2_norm_last(u_t)?;
                    let below = tape.scale(tn, -1.0);
                    let below = tape.shift(below, p.t_min);
                    let below = tape.relu(below);
                    let below = tape.square(below);
                    let above = tape.shift(tn, -p.t_max);
                    let above = tape.relu(above);
                    let above = tape.square(above);
                    let step_pen = tape.add(below, above)?;
                    pen = Some(match pen {
                        Some(acc) => tape.add(acc, step_pen)?,
                        None => step_pen,
                    });
                }
                let thrust_pen = tape.scale(pen.expect("horizon >= 1"), self.penalties.thrust_norm);

                // Glideslope cone hinge over the trajectory.
                let tg = p.tan_glideslope();
                let mut gs: Option<TensorId> = None;
                for &x in &rec.states {
                    let rxy = tape.slice_last(x, 0, 2)?;
                    let rn = tape.l2_norm_last(rxy)?;
                    let z = tape.slice_last(x, 2, 1)?;
                    let allow = tape.scale(z, tg);
                    let viol = tape.sub(rn, allow)?;
                    let viol = tape.relu(viol);
                    let viol = tape.square(viol);
                    gs = Some(match gs {
                        Some(acc) => tape.add(acc, viol)?,
                        None => viol,
                    });
                }
                let gs_pen = tape.scale(gs.expect("states nonempty"), self.penalties.glideslope);

                // Extra annealed touchdown-speed pressure on top of the
                // fixed cost-spec term.
                let x_t = *rec.states.last().unwrap();
                let vt = tape.slice_last(x_t, 3, 3)?;
                let v_tgt = tape.constant(self.problem.x_target[3..6].to_vec(), vec![3])?;
                let dv = tape.sub(vt, v_tgt)?;
                let vn = tape.l2_norm_last(dv)?;
                let excess = tape.shift(vn, -p.v_tol);
                let excess = tape.relu(excess);
                let vel_pen = tape.square(excess);
                let vel_pen = tape.scale(vel_pen, self.penalties.terminal_velocity * (rho - 1.0));

                let cons = tape.add(thrust_pen, gs_pen)?;
                let cons = tape.scale(cons, rho);
                let extra = tape.add(cons, vel_pen)?;
                tape.add(rec.costs, extra)
            }
        }
    }
}

fn nominal_controls(problem: &ControlProblem, x0: &[f64]) -> Vec<f64> {
    let n = problem.horizon * problem.d_u;
    match &problem.params {
        SystemParams::Vdp(_) => vec![0.0; n],
        // Hover thrust pointing up keeps the first rollout well-scaled.
        SystemParams::Rocket(p) => {
            let tz = (x0[6] * p.g_mars).clamp(p.t_min, p.t_max);
            (0..problem.horizon).flat_map(|_| [0.0, 0.0, tz]).collect()
        }
    }
}

fn restart_inits(problem: &ControlProblem, x0s: &[Vec<f64>], restarts: usize, seed: u64) -> Vec<Vec<Vec<f64>>> {
    let scale = problem
        .u_min
        .iter()
        .chain(&problem.u_max)
        .fold(0.0_f64, |acc, &v| acc.max(v.abs()));
    (0..restarts)
        .map(|r| {
            x0s.iter()
                .enumerate()
                .map(|(b, x0)| {
                    let mut u = nominal_controls(problem, x0);
                    if r > 0 {
                        let mut rng = ChaCha8Rng::seed_from_u64(
                            seed ^ (r as u64).wrapping_mul(0x9e3779b97f4a7c15)
                                ^ (b as u64).wrapping_mul(0xd1342543de82ef95),
                        );
                        for v in &mut u {
                            *v += rng.gen_range(-0.25..0.25) * scale;
                        }
                        clip_controls(&mut u, &problem.u_min, &problem.u_max);
                    }
                    u
                })
                .collect()
        })
        .collect()
}

/// Outcome of solving one batch of initial conditions.
#[derive(Debug, Clone)]
pub struct BatchSolve {
    pub controls: Vec<Vec<f64>>,
    pub objectives: Vec<f64>,
    pub converged: Vec<bool>,
    pub iterations: Vec<usize>,
    /// Accepted objective sequences (non-increasing within each penalty
    /// round), concatenated across rounds.
    pub histories: Vec<Vec<f64>>,
}

/// Direct shooting on a batch of initial conditions of one problem.
pub fn solve_batch(problem: &ControlProblem, x0s: &[Vec<f64>], cfg: &OracleConfig) -> Result<BatchSolve> {
    problem.validate()?;
    let spec = ProblemShoot { problem, x0s, penalties: &cfg.penalty_weights };
    let inits = restart_inits(problem, x0s, cfg.restarts, cfg.seed);
    let results = solve_shooting(&spec, &inits, cfg)?;
    Ok(BatchSolve {
        controls: results.iter().map(|r| r.controls.clone()).collect(),
        objectives: results.iter().map(|r| r.objective).collect(),
        converged: results.iter().map(|r| r.converged).collect(),
        iterations: results.iter().map(|r| r.iterations).collect(),
        histories: results.into_iter().map(|r| r.history).collect(),
    })
}

/// Solve one instance and package it as a dataset [`Sample`]. Rocket
/// controls get a final projection onto the feasible thrust annulus, and
/// `j_star` is recomputed from the projected controls so re-simulation
/// reproduces it exactly.
pub fn solve_direct_shooting(problem: &ControlProblem, x0: &[f64], cfg: &OracleConfig) -> Result<Sample> {
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(TrcError::Contract("x0 must be finite".into()));
    }
    let batch = solve_batch(problem, std::slice::from_ref(&x0.to_vec()), cfg)?;
    let mut u = batch.controls[0].clone();
    if let SystemParams::Rocket(p) = &problem.params {
        project_thrust_norm(p, &mut u);
    }
    let traj = simulate(problem, x0, &u)?;
    Ok(Sample { x0: x0.to_vec(), x_target: problem.x_target.clone(), u_star: u, j_star: traj.cost })
}

/// Gradient of the trajectory cost with respect to every control entry,
/// computed by reverse-mode differentiation through the rollout.
pub fn true_cost_gradient(problem: &ControlProblem, x0: &[f64], controls: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let x0_id = tape.constant(x0.to_vec(), vec![1, problem.d_x])?;
    let u_id = tape.leaf(controls.to_vec(), vec![1, controls.len()], true)?;
    let rec = rollout_op(&mut tape, problem, x0_id, u_id)?;
    let loss = tape.sum(rec.costs);
    tape.backward(loss)?;
    Ok(tape.grad(u_id).expect("controls require grad").to_vec())
}

// ── Dataset generation ──────────────────────────────────────────────

/// Generation bookkeeping recorded in the dataset manifest.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GenStats {
    pub requested: usize,
    pub emitted: usize,
    pub failures: usize,
}

/// Batch size for chunked generation; fixed so output is independent of
/// any execution parallelism.
const GEN_CHUNK: usize = 64;

/// Maximum tolerated failure fraction before generation aborts.
const MAX_FAILURE_FRACTION: f64 = 0.05;

/// Draw one initial condition from the problem's documented ranges.
pub fn sample_initial_state(problem: &ControlProblem, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match &problem.params {
        SystemParams::Vdp(_) => vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
        SystemParams::Rocket(_) => {
            let ang = rng.gen_range(0.0..std::f64::consts::TAU);
            let rad = 500.0 * rng.gen_range(0.0..1.0_f64).sqrt();
            let z0 = rng.gen_range(1500.0..2500.0);
            let vang = rng.gen_range(0.0..std::f64::consts::TAU);
            let vrad = 50.0 * rng.gen_range(0.0..1.0_f64).sqrt();
            let vz = rng.gen_range(-100.0..-50.0);
            let m0 = rng.gen_range(1800.0..2000.0);
            vec![rad * ang.cos(), rad * ang.sin(), z0, vrad * vang.cos(), vrad * vang.sin(), vz, m0]
        }
    }
}

/// Post-solve feasibility screen for rocket samples; solutions stuck in an
/// infeasible local minimum count as failures rather than being emitted.
fn rocket_sample_ok(problem: &ControlProblem, sample: &Sample) -> bool {
    let Ok(traj) = simulate(problem, &sample.x0, &sample.u_star) else {
        return false;
    };
    let SystemParams::Rocket(p) = &problem.params else { return true };
    let x_t = traj.states.last().unwrap();
    let miss = (0..3).map(|i| (x_t[i] - sample.x_target[i]).powi(2)).sum::<f64>().sqrt();
    let speed = (3..6).map(|i| (x_t[i] - sample.x_target[i]).powi(2)).sum::<f64>().sqrt();
    let depth = crate::dynamics::glideslope_depth(p, &traj.states);
    miss <= 5.0 && speed <= p.v_tol + 1.0 && depth <= 1.0
}

/// Generate supervised records by solving i.i.d. initial conditions drawn
/// from the problem's documented ranges. Deterministic under `seed`;
/// samples failing convergence or the feasibility screen are skipped and
/// counted, and generation aborts if more than 5% fail.
pub fn generate_dataset(
    problem: &ControlProblem,
    n_samples: usize,
    cfg: &OracleConfig,
    seed: u64,
    mut progress: Option<&mut dyn FnMut(usize, usize)>,
) -> Result<(Vec<Sample>, GenStats)> {
    if n_samples == 0 {
        return Err(TrcError::Contract("n_samples must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0s: Vec<Vec<f64>> = (0..n_samples).map(|_| sample_initial_state(problem, &mut rng)).collect();

    let mut samples = Vec::with_capacity(n_samples);
    let mut failures = 0usize;
    let mut done = 0usize;
    for chunk in x0s.chunks(GEN_CHUNK) {
        let solved = solve_batch(problem, chunk, cfg)?;
        for (i, x0) in chunk.iter().enumerate() {
            let mut u = solved.controls[i].clone();
            if let SystemParams::Rocket(p) = &problem.params {
                project_thrust_norm(p, &mut u);
            }
            let traj = simulate(problem, x0, &u)?;
            let sample =
                Sample { x0: x0.clone(), x_target: problem.x_target.clone(), u_star: u, j_star: traj.cost };
            let ok = solved.converged[i]
                && match &problem.params {
                    SystemParams::Vdp(_) => true,
                    SystemParams::Rocket(_) => rocket_sample_ok(problem, &sample),
                };
            if ok {
                samples.push(sample);
            } else {
                failures += 1;
            }
        }
        done += chunk.len();
        if let Some(cb) = progress.as_deref_mut() {
            cb(done, n_samples);
        }
    }
    if (failures as f64) > MAX_FAILURE_FRACTION * n_samples as f64 {
        return Err(TrcError::Generation(format!(
            "{failures} of {n_samples} samples failed convergence or feasibility (> {:.0}%)",
            MAX_FAILURE_FRACTION * 100.0
        )));
    }
    let stats = GenStats { requested: n_samples, emitted: samples.len(), failures };
    Ok((samples, stats))
}

// ── Direct shooting on an LQR instance (verification path) ─────────

struct LqrShoot<'a> {
    lqr: &'a LqrProblem,
    x0s: &'a [Vec<f64>],
    bound: f64,
}

impl ShootSpec for LqrShoot<'_> {
    fn n_per_sample(&self) -> usize {
        self.lqr.horizon * self.lqr.b[0].len()
    }

    fn rounds(&self) -> usize {
        1
    }

    fn bound_pattern(&self) -> (Vec<f64>, Vec<f64>) {
        let d_u = self.lqr.b[0].len();
        (vec![-self.bound; d_u], vec![self.bound; d_u])
    }

    fn step_scale(&self) -> f64 {
        1.0
    }

    fn objective(&self, tape: &mut Tape, idx: &[usize], controls: TensorId, _round: usize) -> Result<TensorId> {
        let d_x = self.lqr.a.len();
        let d_u = self.lqr.b[0].len();
        let flat = |m: &[Vec<f64>]| m.iter().flatten().copied().collect::<Vec<f64>>();
        let at = tape.constant(flat(&mat_t(&self.lqr.a)), vec![d_x, d_x])?;
        let bt = tape.constant(flat(&mat_t(&self.lqr.b)), vec![d_u, d_x])?;
        let q = tape.constant(flat(&self.lqr.q), vec![d_x, d_x])?;
        let r = tape.constant(flat(&self.lqr.r), vec![d_u, d_u])?;
        let qf = tape.constant(flat(&self.lqr.qf), vec![d_x, d_x])?;

        let mut x0 = Vec::with_capacity(idx.len() * d_x);
        for &b in idx {
            x0.extend_from_slice(&self.x0s[b]);
        }
        let mut x = tape.constant(x0, vec![idx.len(), d_x])?;
        let mut cost: Option<TensorId> = None;
        fn add_quad(tape: &mut Tape, v: TensorId, w: TensorId, cost: &mut Option<TensorId>) -> Result<()> {
            let vw = tape.matmul(v, w)?;
            let p = tape.mul(vw, v)?;
            let c = tape.sum_last(p)?;
            *cost = Some(match *cost {
                Some(acc) => tape.add(acc, c)?,
                None => c,
            });
            Ok(())
        }
        for t in 0..self.lqr.horizon {
            let u_t = tape.slice_last(controls, t * d_u, d_u)?;
            add_quad(tape, x, q, &mut cost)?;
            add_quad(tape, u_t, r, &mut cost)?;
            let ax = tape.matmul(x, at)?;
            let bu = tape.matmul(u_t, bt)?;
            x = tape.add(ax, bu)?;
        }
        add_quad(tape, x, qf, &mut cost)?;
        Ok(cost.expect("nonzero horizon"))
    }
}

/// Direct-shooting costs and controls on LQR instances, for comparison
/// against [`riccati_lqr`].
pub fn lqr_direct_shooting(lqr: &LqrProblem, x0s: &[Vec<f64>], cfg: &OracleConfig) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let d_u = lqr.b[0].len();
    let n = lqr.horizon * d_u;
    let spec = LqrShoot { lqr, x0s, bound: 1e3 };
    let inits: Vec<Vec<Vec<f64>>> = (0..cfg.restarts)
        .map(|r| {
            x0s.iter()
                .enumerate()
                .map(|(b, _)| {
                    if r == 0 {
                        vec![0.0; n]
                    } else {
                        let mut rng =
                            ChaCha8Rng::seed_from_u64(cfg.seed ^ ((r as u64) << 32) ^ b as u64);
                        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
                    }
                })
                .collect()
        })
        .collect();
    let results = solve_shooting(&spec, &inits, cfg)?;
    Ok((
        results.iter().map(|r| r.objective).collect(),
        results.into_iter().map(|r| r.controls).collect(),
    ))
}


#[cfg(test)]
mod bench_tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    #[ignore]
    fn bench_generation_speed() {
        let problem = ControlProblem::vdp();
        let cfg = OracleConfig { restarts: 1, ..OracleConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0s: Vec<Vec<f64>> = (0..16).map(|_| sample_initial_state(&problem, &mut rng)).collect();
        let t0 = std::time::Instant::now();
        let solved = solve_batch(&problem, &x0s, &cfg).unwrap();
        println!("vdp 16 samples: {:?}", t0.elapsed());
        println!("iterations: {:?}", solved.iterations);
        println!("converged: {:?}", solved.converged);
        println!("objectives: {:?}", solved.objectives.iter().map(|v| (v * 10.0).round() / 10.0).collect::<Vec<_>>());

        let problem = ControlProblem::rocket();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0s: Vec<Vec<f64>> = (0..8).map(|_| sample_initial_state(&problem, &mut rng)).collect();
        let t0 = std::time::Instant::now();
        let solved = solve_batch(&problem, &x0s, &cfg).unwrap();
        println!("rocket 8 samples: {:?}", t0.elapsed());
        println!("iterations: {:?}", solved.iterations);
        println!("converged: {:?}", solved.converged);
        for (i, x0) in x0s.iter().enumerate() {
            let mut u = solved.controls[i].clone();
            if let SystemParams::Rocket(p) = &problem.params {
                project_thrust_norm(p, &mut u);
            }
            let traj = simulate(&problem, x0, &u).unwrap();
            let xt = traj.states.last().unwrap();
            let miss = (xt[0] * xt[0] + xt[1] * xt[1] + xt[2] * xt[2]).sqrt();
            let vt = (xt[3] * xt[3] + xt[4] * xt[4] + xt[5] * xt[5]).sqrt();
            println!(
                "  sample {i}: miss={miss:.3} vT={vt:.3} fuel={:.1} J={:.2}",
                x0[6] - xt[6],
                traj.cost
            );
        }
    }
}
