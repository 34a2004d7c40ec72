//! Differentiable system models and rollouts.
//!
//! Two systems are provided: the controlled Van der Pol oscillator and a
//! 3-DOF powered-descent vehicle with variable mass. Both integrate with
//! classical RK4 under a zero-order hold on the control across each step.
//! Rollouts are built on a [`Tape`] so trajectory costs are differentiable
//! end-to-end with respect to the control sequence; all builders operate on
//! batched tensors (`B x d_x` states, `B x (T*d_u)` control sequences).

use crate::autodiff::{Tape, TensorId};
use crate::error::{Result, TrcError};
use serde::{Deserialize, Serialize};

/// Van der Pol damping parameter. `mu = 1.0` puts the oscillator in the
/// weakly nonlinear regime with a stable limit cycle.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VdpParams {
    pub mu: f64,
}

impl Default for VdpParams {
    fn default() -> Self {
        Self { mu: 1.0 }
    }
}

/// Powered-descent vehicle and environment constants (Mars landing).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RocketParams {
    /// Mars surface gravity, m/s^2.
    pub g_mars: f64,
    /// Specific impulse, s.
    pub i_sp: f64,
    /// Standard gravity used in the mass-flow relation, m/s^2.
    pub g0: f64,
    /// Thrust magnitude bounds, N.
    pub t_min: f64,
    pub t_max: f64,
    /// Glideslope half-angle from vertical, degrees.
    pub gamma_gs_deg: f64,
    /// Allowed touchdown speed, m/s.
    pub v_tol: f64,
    /// Mass bounds, kg.
    pub m_dry: f64,
    pub m_wet: f64,
}

impl Default for RocketParams {
    fn default() -> Self {
        Self {
            g_mars: 3.71,
            i_sp: 200.7,
            g0: 9.81,
            t_min: 4000.0,
            t_max: 13000.0,
            gamma_gs_deg: 75.0,
            v_tol: 1.0,
            m_dry: 1000.0,
            m_wet: 2000.0,
        }
    }
}

impl RocketParams {
    pub fn tan_glideslope(&self) -> f64 {
        self.gamma_gs_deg.to_radians().tan()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.t_min && self.t_min < self.t_max) {
            return Err(TrcError::Config(format!(
                "thrust bounds must satisfy 0 < t_min < t_max, got [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        if self.m_dry >= self.m_wet {
            return Err(TrcError::Config(format!(
                "mass bounds must satisfy m_dry < m_wet, got [{}, {}]",
                self.m_dry, self.m_wet
            )));
        }
        if !(0.0 < self.gamma_gs_deg && self.gamma_gs_deg < 90.0) {
            return Err(TrcError::Config(format!(
                "glideslope angle must lie in (0, 90) degrees, got {}",
                self.gamma_gs_deg
            )));
        }
        Ok(())
    }
}

/// System dynamics together with their parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "system", rename_all = "snake_case")]
pub enum SystemParams {
    Vdp(VdpParams),
    Rocket(RocketParams),
}

impl SystemParams {
    pub fn name(&self) -> &'static str {
        match self {
            SystemParams::Vdp(_) => "vdp",
            SystemParams::Rocket(_) => "rocket",
        }
    }
}

/// Cost specification for a control problem. Matrices are row-major
/// `d x d` (state) and `d_u x d_u` (control).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostSpec {
    /// Stage cost `x'Qx + u'Ru` plus terminal `(x_T - x_tgt)'Qf(x_T - x_tgt)`.
    Quadratic { q: Vec<Vec<f64>>, r: Vec<Vec<f64>>, qf: Vec<Vec<f64>> },
    /// Mayer fuel cost `m_0 - m(t_f)` plus terminal penalties on position
    /// miss and excess touchdown speed; the penalties give the refinement
    /// loop a terminal-accuracy signal that raw fuel alone lacks.
    Fuel { w_pos: f64, w_vel: f64, v_tol: f64 },
}

/// A finite-horizon control problem: dynamics, horizon, bounds, cost, target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlProblem {
    pub params: SystemParams,
    pub d_x: usize,
    pub d_u: usize,
    /// Number of steps T; a rollout has T+1 states.
    pub horizon: usize,
    /// Step size, seconds.
    pub dt: f64,
    /// Per-component control bounds, length `d_u`.
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub cost: CostSpec,
    pub x_target: Vec<f64>,
}

impl ControlProblem {
    /// Van der Pol stabilization: Q = diag(10, 5), R = 0.5, Qf = 20 Q,
    /// |u| <= 2, 100 steps of 0.05 s.
    pub fn vdp() -> Self {
        let q = vec![vec![10.0, 0.0], vec![0.0, 5.0]];
        let qf = vec![vec![200.0, 0.0], vec![0.0, 100.0]];
        ControlProblem {
            params: SystemParams::Vdp(VdpParams::default()),
            d_x: 2,
            d_u: 1,
            horizon: 100,
            dt: 0.05,
            u_min: vec![-2.0],
            u_max: vec![2.0],
            cost: CostSpec::Quadratic { q, r: vec![vec![0.5]], qf },
            x_target: vec![0.0, 0.0],
        }
    }

    /// Mars powered descent to the origin pad: fuel cost with terminal
    /// penalties, componentwise thrust bounds, 50 steps of 1.15 s.
    pub fn rocket() -> Self {
        let p = RocketParams::default();
        ControlProblem {
            params: SystemParams::Rocket(p),
            d_x: 7,
            d_u: 3,
            horizon: 50,
            dt: 1.15,
            u_min: vec![-p.t_max; 3],
            u_max: vec![p.t_max; 3],
            cost: CostSpec::Fuel { w_pos: 1.0, w_vel: 10.0, v_tol: p.v_tol },
            x_target: vec![0.0; 7],
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "vdp" => Ok(Self::vdp()),
            "rocket" => Ok(Self::rocket()),
            other => Err(TrcError::Config(format!("unknown problem '{other}', expected vdp or rocket"))),
        }
    }

    /// Dimension of the terminal-error signal fed back to the network:
    /// the full state for Van der Pol, position and velocity (mass
    /// excluded) for the rocket.
    pub fn error_dim(&self) -> usize {
        match self.params {
            SystemParams::Vdp(_) => self.d_x,
            SystemParams::Rocket(_) => 6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.u_min.len() != self.d_u || self.u_max.len() != self.d_u {
            return Err(TrcError::Config(format!(
                "control bounds must have length d_u = {}, got {} and {}",
                self.d_u,
                self.u_min.len(),
                self.u_max.len()
            )));
        }
        for i in 0..self.d_u {
            if self.u_min[i] >= self.u_max[i] {
                return Err(TrcError::Config(format!(
                    "u_min must be < u_max componentwise, got [{}, {}] at {}",
                    self.u_min[i], self.u_max[i], i
                )));
            }
        }
        if self.x_target.len() != self.d_x {
            return Err(TrcError::Config(format!(
                "x_target length {} does not match d_x = {}",
                self.x_target.len(),
                self.d_x
            )));
        }
        if self.dt <= 0.0 || self.horizon == 0 {
            return Err(TrcError::Config("horizon and dt must be positive".into()));
        }
        if let SystemParams::Rocket(p) = &self.params {
            p.validate()?;
        }
        Ok(())
    }
}

/// One rollout: `T+1` states, `T` controls, and the scalar trajectory cost.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub cost: f64,
}

/// Tape handles produced by a differentiable batched rollout.
#[derive(Debug)]
pub struct RolloutRecord {
    /// `T+1` state tensors, each `B x d_x`. The first is the supplied x0.
    pub states: Vec<TensorId>,
    /// `T` per-step control tensors, each `B x d_u`.
    pub step_controls: Vec<TensorId>,
    /// Per-sample trajectory cost, `B x 1`.
    pub costs: TensorId,
}

fn flatten(m: &[Vec<f64>]) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

/// State-rate of the system at `(x, u)`, batched: `x` is `B x d_x`,
/// `u` is `B x d_u`.
pub fn derivative_op(tape: &mut Tape, params: &SystemParams, x: TensorId, u: TensorId) -> Result<TensorId> {
    match params {
        SystemParams::Vdp(p) => {
            let x1 = tape.slice_last(x, 0, 1)?;
            let x2 = tape.slice_last(x, 1, 1)?;
            // xdot2 = mu (1 - x1^2) x2 - x1 + u
            let sq = tape.square(x1);
            let neg = tape.scale(sq, -1.0);
            let one_minus = tape.shift(neg, 1.0);
            let damp = tape.mul(one_minus, x2)?;
            let damp = tape.scale(damp, p.mu);
            let damp = tape.sub(damp, x1)?;
            let xdot2 = tape.add(damp, u)?;
            tape.concat_last(&[x2, xdot2])
        }
        SystemParams::Rocket(p) => {
            check_mass(tape, p, x, 0)?;
            let v = tape.slice_last(x, 3, 3)?;
            let m = tape.slice_last(x, 6, 1)?;
            let acc = tape.div(u, m)?;
            let g = tape.constant(vec![0.0, 0.0, -p.g_mars], vec![3])?;
            let vdot = tape.add(acc, g)?;
            let tn = tape.l2_norm_last(u)?;
            let mdot = tape.scale(tn, -1.0 / (p.i_sp * p.g0));
            tape.concat_last(&[v, vdot, mdot])
        }
    }
}

fn check_mass(tape: &Tape, p: &RocketParams, x: TensorId, step: usize) -> Result<()> {
    let d_x = *tape.shape(x).last().unwrap();
    let data = tape.data(x);
    for row in data.chunks(d_x) {
        let m = row[6];
        if m < p.m_dry {
            return Err(TrcError::InfeasibleMass { step, mass: m, m_dry: p.m_dry });
        }
    }
    Ok(())
}

/// Classical RK4 update with the control held constant across the step.
pub fn rk4_step_op(tape: &mut Tape, params: &SystemParams, x: TensorId, u: TensorId, dt: f64) -> Result<TensorId> {
    if dt <= 0.0 {
        return Err(TrcError::Contract(format!("rk4 step size must be positive, got {dt}")));
    }
    let k1 = derivative_op(tape, params, x, u)?;
    let h1 = tape.scale(k1, dt / 2.0);
    let x2 = tape.add(x, h1)?;
    let k2 = derivative_op(tape, params, x2, u)?;
    let h2 = tape.scale(k2, dt / 2.0);
    let x3 = tape.add(x, h2)?;
    let k3 = derivative_op(tape, params, x3, u)?;
    let h3 = tape.scale(k3, dt);
    let x4 = tape.add(x, h3)?;
    let k4 = derivative_op(tape, params, x4, u)?;
    let k23 = tape.add(k2, k3)?;
    let k23 = tape.scale(k23, 2.0);
    let ks = tape.add(k1, k23)?;
    let ks = tape.add(ks, k4)?;
    let inc = tape.scale(ks, dt / 6.0);
    tape.add(x, inc)
}

/// Quadratic form `rowsum((x A) * x)` as a `B x 1` tensor.
fn quad_form(tape: &mut Tape, x: TensorId, a: &[Vec<f64>]) -> Result<TensorId> {
    let d = a.len();
    let ac = tape.constant(flatten(a), vec![d, d])?;
    let xa = tape.matmul(x, ac)?;
    let prod = tape.mul(xa, x)?;
    tape.sum_last(prod)
}

/// Differentiable batched rollout. `x0` is `B x d_x`; `controls` is
/// `B x (T*d_u)` row-major by step. States and per-sample costs are
/// recorded on the tape; callers are expected to clip controls first.
pub fn rollout_op(tape: &mut Tape, problem: &ControlProblem, x0: TensorId, controls: TensorId) -> Result<RolloutRecord> {
    let (t_steps, d_u) = (problem.horizon, problem.d_u);
    let cshape = tape.shape(controls).to_vec();
    if cshape.len() != 2 || cshape[1] != t_steps * d_u {
        return Err(TrcError::Dimension(format!(
            "controls must be [B, {}], got {:?}",
            t_steps * d_u,
            cshape
        )));
    }
    let x0_shape = tape.shape(x0).to_vec();
    if x0_shape.len() != 2 || x0_shape[1] != problem.d_x || x0_shape[0] != cshape[0] {
        return Err(TrcError::Dimension(format!(
            "x0 must be [{}, {}], got {:?}",
            cshape[0], problem.d_x, x0_shape
        )));
    }
    if let SystemParams::Rocket(p) = &problem.params {
        check_mass(tape, p, x0, 0)?;
    }

    let mut states = Vec::with_capacity(t_steps + 1);
    let mut step_controls = Vec::with_capacity(t_steps);
    states.push(x0);
    let mut stage_cost: Option<TensorId> = None;
    let mut x = x0;
    for t in 0..t_steps {
        let u_t = tape.slice_last(controls, t * d_u, d_u)?;
        step_controls.push(u_t);
        if let CostSpec::Quadratic { q, r, .. } = &problem.cost {
            let cx = quad_form(tape, x, q)?;
            let cu = quad_form(tape, u_t, r)?;
            let c = tape.add(cx, cu)?;
            stage_cost = Some(match stage_cost {
                Some(acc) => tape.add(acc, c)?,
                None => c,
            });
        }
        x = rk4_step_op(tape, &problem.params, x, u_t, problem.dt).map_err(|e| match e {
            TrcError::InfeasibleMass { mass, m_dry, .. } => TrcError::InfeasibleMass { step: t + 1, mass, m_dry },
            other => other,
        })?;
        if let SystemParams::Rocket(p) = &problem.params {
            check_mass(tape, p, x, t + 1)?;
        }
        states.push(x);
    }

    let x_t = *states.last().unwrap();
    let costs = match &problem.cost {
        CostSpec::Quadratic { qf, .. } => {
            let tgt = tape.constant(problem.x_target.clone(), vec![problem.d_x])?;
            let e = tape.sub(x_t, tgt)?;
            let cf = quad_form(tape, e, qf)?;
            match stage_cost {
                Some(acc) => tape.add(acc, cf)?,
                None => cf,
            }
        }
        CostSpec::Fuel { w_pos, w_vel, v_tol } => {
            let m0 = tape.slice_last(x0, 6, 1)?;
            let mt = tape.slice_last(x_t, 6, 1)?;
            let fuel = tape.sub(m0, mt)?;
            let rt = tape.slice_last(x_t, 0, 3)?;
            let r_tgt = tape.constant(problem.x_target[0..3].to_vec(), vec![3])?;
            let dr = tape.sub(rt, r_tgt)?;
            let dr2 = tape.square(dr);
            let miss = tape.sum_last(dr2)?;
            let miss = tape.scale(miss, *w_pos);
            let vt = tape.slice_last(x_t, 3, 3)?;
            let v_tgt = tape.constant(problem.x_target[3..6].to_vec(), vec![3])?;
            let dv = tape.sub(vt, v_tgt)?;
            let vn = tape.l2_norm_last(dv)?;
            let excess = tape.shift(vn, -v_tol);
            let excess = tape.relu(excess);
            let pen_v = tape.square(excess);
            let pen_v = tape.scale(pen_v, *w_vel);
            let acc = tape.add(fuel, miss)?;
            tape.add(acc, pen_v)?
        }
    };
    Ok(RolloutRecord { states, step_controls, costs })
}

/// Plain-value rollout of a single sample; shares the differentiable code
/// path so costs agree with training and evaluation exactly.
pub fn simulate(problem: &ControlProblem, x0: &[f64], controls: &[f64]) -> Result<Trajectory> {
    let mut tape = Tape::new();
    let x0_id = tape.constant(x0.to_vec(), vec![1, problem.d_x])?;
    let u_id = tape.constant(controls.to_vec(), vec![1, problem.horizon * problem.d_u])?;
    let rec = rollout_op(&mut tape, problem, x0_id, u_id)?;
    let states = rec.states.iter().map(|&s| tape.data(s).to_vec()).collect();
    let controls = controls.chunks(problem.d_u).map(|c| c.to_vec()).collect();
    Ok(Trajectory { states, controls, cost: tape.data(rec.costs)[0] })
}

/// Trajectory cost per the problem's cost spec, recomputed from stored
/// states and controls (no re-integration).
pub fn trajectory_cost(problem: &ControlProblem, states: &[Vec<f64>], controls: &[Vec<f64>]) -> f64 {
    match &problem.cost {
        CostSpec::Quadratic { q, r, qf } => {
            let mut acc = 0.0;
            for t in 0..controls.len() {
                acc += quad_form_value(&states[t], q) + quad_form_value(&controls[t], r);
            }
            let e: Vec<f64> = states
                .last()
                .unwrap()
                .iter()
                .zip(&problem.x_target)
                .map(|(a, b)| a - b)
                .collect();
            acc + quad_form_value(&e, qf)
        }
        CostSpec::Fuel { w_pos, w_vel, v_tol } => {
            let x_t = states.last().unwrap();
            let fuel = states[0][6] - x_t[6];
            let miss: f64 = (0..3).map(|i| (x_t[i] - problem.x_target[i]).powi(2)).sum();
            let vn: f64 = (0..3)
                .map(|i| (x_t[3 + i] - problem.x_target[3 + i]).powi(2))
                .sum::<f64>()
                .sqrt();
            let excess = (vn - v_tol).max(0.0);
            fuel + w_pos * miss + w_vel * excess * excess
        }
    }
}

fn quad_form_value(x: &[f64], a: &[Vec<f64>]) -> f64 {
    let d = a.len();
    let mut total = 0.0;
    for j in 0..d {
        let mut acc = 0.0;
        for k in 0..d {
            acc += x[k] * a[k][j];
        }
        total += acc * x[j];
    }
    total
}

/// Componentwise clamp of a flattened `T x d_u` control sequence to the
/// problem bounds. Idempotent.
pub fn clip_controls(controls: &mut [f64], u_min: &[f64], u_max: &[f64]) {
    let p = u_min.len();
    for (i, u) in controls.iter_mut().enumerate() {
        *u = u.clamp(u_min[i % p], u_max[i % p]);
    }
}

/// Terminal error `x_T - x_target`; the rocket variant covers position and
/// velocity only (the target does not constrain final mass).
pub fn terminal_error(problem: &ControlProblem, x_t: &[f64]) -> Vec<f64> {
    let d_e = problem.error_dim();
    (0..d_e).map(|i| x_t[i] - problem.x_target[i]).collect()
}

/// Project each step of a rocket control sequence onto the feasible thrust
/// annulus `t_min <= |T| <= t_max`, preserving direction. A zero thrust
/// vector projects to minimum thrust straight up.
pub fn project_thrust_norm(params: &RocketParams, controls: &mut [f64]) {
    for step in controls.chunks_mut(3) {
        let n = (step[0] * step[0] + step[1] * step[1] + step[2] * step[2]).sqrt();
        if n < 1e-12 {
            step.copy_from_slice(&[0.0, 0.0, params.t_min]);
            continue;
        }
        let target = n.clamp(params.t_min, params.t_max);
        if target != n {
            let s = target / n;
            for c in step {
                *c *= s;
            }
        }
    }
}

/// Worst glideslope violation depth over a trajectory:
/// `max_t max(0, |r_xy| - z tan(gamma_gs))` in meters.
pub fn glideslope_depth(params: &RocketParams, states: &[Vec<f64>]) -> f64 {
    let tg = params.tan_glideslope();
    states
        .iter()
        .map(|x| {
            let rxy = (x[0] * x[0] + x[1] * x[1]).sqrt();
            (rxy - x[2] * tg).max(0.0)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // ── Independent plain-f64 integrator used as the reference oracle ──

    fn vdp_rate(mu: f64, x: &[f64], u: f64) -> Vec<f64> {
        vec![x[1], mu * (1.0 - x[0] * x[0]) * x[1] - x[0] + u]
    }

    fn rocket_rate(p: &RocketParams, x: &[f64], u: &[f64]) -> Vec<f64> {
        let tn = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        vec![
            x[3],
            x[4],
            x[5],
            u[0] / x[6],
            u[1] / x[6],
            u[2] / x[6] - p.g_mars,
            -tn / (p.i_sp * p.g0),
        ]
    }

    fn plain_rk4(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], dt: f64) -> Vec<f64> {
        let k1 = f(x);
        let x2: Vec<f64> = x.iter().zip(&k1).map(|(a, k)| a + dt / 2.0 * k).collect();
        let k2 = f(&x2);
        let x3: Vec<f64> = x.iter().zip(&k2).map(|(a, k)| a + dt / 2.0 * k).collect();
        let k3 = f(&x3);
        let x4: Vec<f64> = x.iter().zip(&k3).map(|(a, k)| a + dt * k).collect();
        let k4 = f(&x4);
        (0..x.len())
            .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect()
    }

    /// Integrate one control interval with `sub` RK4 sub-steps.
    fn fine_step(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], dt: f64, sub: usize) -> Vec<f64> {
        let mut x = x.to_vec();
        for _ in 0..sub {
            x = plain_rk4(f, &x, dt / sub as f64);
        }
        x
    }

    fn norm(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    fn tape_rk4(params: &SystemParams, x: &[f64], u: &[f64], dt: f64) -> Vec<f64> {
        let mut t = Tape::new();
        let xi = t.constant(x.to_vec(), vec![1, x.len()]).unwrap();
        let ui = t.constant(u.to_vec(), vec![1, u.len()]).unwrap();
        let n = rk4_step_op(&mut t, params, xi, ui, dt).unwrap();
        t.data(n).to_vec()
    }

    #[test]
    fn vdp_equilibrium_rate_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(vec![0.0, 0.0], vec![1, 2]).unwrap();
        let u = t.constant(vec![0.0], vec![1, 1]).unwrap();
        let d = derivative_op(&mut t, &SystemParams::Vdp(VdpParams::default()), x, u).unwrap();
        assert_eq!(t.data(d), &[0.0, 0.0]);
    }

    #[test]
    fn vdp_rate_direct_substitution() {
        let mut t = Tape::new();
        let x = t.constant(vec![1.0, 2.0], vec![1, 2]).unwrap();
        let u = t.constant(vec![0.5], vec![1, 1]).unwrap();
        let d = derivative_op(&mut t, &SystemParams::Vdp(VdpParams { mu: 1.0 }), x, u).unwrap();
        assert!((t.data(d)[0] - 2.0).abs() < 1e-15);
        assert!((t.data(d)[1] - -0.5).abs() < 1e-15);
    }

    #[test]
    fn rocket_rate_direct_substitution() {
        let p = RocketParams::default();
        let mut t = Tape::new();
        let x = t
            .constant(vec![0.0, 0.0, 2000.0, 0.0, 0.0, -75.0, 2000.0], vec![1, 7])
            .unwrap();
        let u = t.constant(vec![0.0, 0.0, 13000.0], vec![1, 3]).unwrap();
        let d = derivative_op(&mut t, &SystemParams::Rocket(p), x, u).unwrap();
        let out = t.data(d);
        assert_eq!(&out[0..3], &[0.0, 0.0, -75.0]);
        assert!((out[5] - 2.79).abs() < 1e-12); // 13000/2000 - 3.71
        assert!((out[6] - -6.603).abs() < 5e-4); // 13000/(200.7*9.81)
    }

    #[test]
    fn rocket_rate_rejects_infeasible_mass() {
        let p = RocketParams::default();
        let mut t = Tape::new();
        let x = t
            .constant(vec![0.0, 0.0, 2000.0, 0.0, 0.0, -75.0, 999.0], vec![1, 7])
            .unwrap();
        let u = t.constant(vec![0.0, 0.0, 5000.0], vec![1, 3]).unwrap();
        let err = derivative_op(&mut t, &SystemParams::Rocket(p), x, u);
        assert!(matches!(err, Err(TrcError::InfeasibleMass { .. })));
    }

    #[test]
    fn harmonic_oscillator_energy_conserved() {
        // mu = 0 reduces the oscillator to x'' = -x; RK4 should hold
        // x1^2 + x2^2 nearly constant.
        let params = SystemParams::Vdp(VdpParams { mu: 0.0 });
        let mut x = vec![1.0, 0.0];
        let e0 = 1.0;
        let mut prev = e0;
        for _ in 0..100 {
            x = tape_rk4(&params, &x, &[0.0], 0.05);
            let e = x[0] * x[0] + x[1] * x[1];
            assert!((e - prev).abs() < 1e-8, "per-step energy jump too large");
            prev = e;
        }
        let e_end = x[0] * x[0] + x[1] * x[1];
        assert!((e_end - e0).abs() / e0 < 1e-4);
    }

    #[test]
    fn rk4_step_matches_fine_oracle() {
        let x = tape_rk4(&SystemParams::Vdp(VdpParams { mu: 1.0 }), &[1.0, 2.0], &[0.5], 0.05);
        let f = |x: &[f64]| vdp_rate(1.0, x, 0.5);
        let reference = fine_step(&f, &[1.0, 2.0], 0.05, 100);
        assert!(norm(&x, &reference) < 1e-6);
    }

    #[test]
    fn rocket_step_matches_fine_oracle() {
        let p = RocketParams::default();
        let x0 = vec![120.0, -80.0, 2100.0, 12.0, -4.0, -80.0, 1950.0];
        let u = vec![500.0, -300.0, 9000.0];
        let coarse = tape_rk4(&SystemParams::Rocket(p), &x0, &u, 1.15);
        let f = |x: &[f64]| rocket_rate(&p, x, &u);
        let reference = fine_step(&f, &x0, 1.15, 100);
        assert!(norm(&coarse, &reference) < 1e-6, "deviation {}", norm(&coarse, &reference));
    }

    #[test]
    fn rocket_hover_thrust_balances_gravity() {
        let p = RocketParams::default();
        let m = 2000.0;
        let x0 = vec![0.0, 0.0, 2000.0, 0.0, 0.0, -10.0, m];
        let u = vec![0.0, 0.0, m * p.g_mars];
        let x1 = tape_rk4(&SystemParams::Rocket(p), &x0, &u, 1.15);
        // Vertical acceleration is ~0 (mass loss slightly unbalances it).
        assert!((x1[5] - -10.0).abs() < 0.02);
        assert!((x1[2] - (2000.0 - 10.0 * 1.15)).abs() < 0.02);
    }

    #[test]
    fn rollout_zero_from_origin_costs_nothing() {
        let problem = ControlProblem::vdp();
        let traj = simulate(&problem, &[0.0, 0.0], &vec![0.0; 100]).unwrap();
        assert_eq!(traj.states.len(), 101);
        assert!(traj.states.iter().all(|s| s == &[0.0, 0.0]));
        assert_eq!(traj.cost, 0.0);
    }

    #[test]
    fn rollout_matches_fine_oracle_over_full_horizon() {
        let problem = ControlProblem::vdp();
        let traj = simulate(&problem, &[1.0, 0.0], &vec![0.0; 100]).unwrap();
        let f = |x: &[f64]| vdp_rate(1.0, x, 0.0);
        let mut x = vec![1.0, 0.0];
        let mut worst = 0.0_f64;
        for t in 0..100 {
            x = fine_step(&f, &x, 0.05, 100);
            worst = worst.max(norm(&traj.states[t + 1], &x));
        }
        assert!(worst < 1e-5, "max deviation {worst}");
    }

    #[test]
    fn rollout_has_exactly_horizon_plus_one_states() {
        let problem = ControlProblem::rocket();
        let x0 = vec![100.0, -50.0, 2000.0, 10.0, 0.0, -75.0, 1900.0];
        let traj = simulate(&problem, &x0, &vec![0.0; 150]).unwrap();
        assert_eq!(traj.states.len(), 51);
        assert_eq!(traj.controls.len(), 50);
    }

    #[test]
    fn single_stage_quadratic_cost_by_hand() {
        let mut problem = ControlProblem::vdp();
        problem.horizon = 1;
        problem.cost = CostSpec::Quadratic {
            q: vec![vec![10.0, 0.0], vec![0.0, 5.0]],
            r: vec![vec![0.5]],
            qf: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
        };
        let traj = simulate(&problem, &[1.0, 0.0], &[1.0]).unwrap();
        assert!((traj.cost - 10.5).abs() < 1e-12);
    }

    #[test]
    fn fuel_cost_is_mass_difference_plus_penalties() {
        let problem = ControlProblem::rocket();
        let states = vec![
            vec![0.0, 0.0, 2000.0, 0.0, 0.0, -75.0, 2000.0],
            vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1870.0],
        ];
        let cost = trajectory_cost(&problem, &states, &[vec![0.0; 3]]);
        assert!((cost - 130.0).abs() < 1e-12);
    }

    #[test]
    fn tape_and_value_cost_routes_agree() {
        let mut r = ChaCha8Rng::seed_from_u64(21);
        for problem in [ControlProblem::vdp(), ControlProblem::rocket()] {
            let x0: Vec<f64> = match problem.params {
                SystemParams::Vdp(_) => (0..2).map(|_| r.gen_range(-2.0..2.0)).collect(),
                SystemParams::Rocket(_) => vec![
                    r.gen_range(-300.0..300.0),
                    r.gen_range(-300.0..300.0),
                    r.gen_range(1500.0..2500.0),
                    r.gen_range(-30.0..30.0),
                    r.gen_range(-30.0..30.0),
                    r.gen_range(-90.0..-60.0),
                    r.gen_range(1800.0..2000.0),
                ],
            };
            let n = problem.horizon * problem.d_u;
            let controls: Vec<f64> = (0..n).map(|_| r.gen_range(problem.u_min[0] * 0.5..problem.u_max[0] * 0.5)).collect();
            let traj = simulate(&problem, &x0, &controls).unwrap();
            let recomputed = trajectory_cost(&problem, &traj.states, &traj.controls);
            assert!(
                (traj.cost - recomputed).abs() <= 1e-9 * traj.cost.abs().max(1.0),
                "cost routes disagree: {} vs {}",
                traj.cost,
                recomputed
            );
        }
    }

    #[test]
    fn rocket_mass_nonincreasing_and_underflow_detected() {
        let problem = ControlProblem::rocket();
        let x0 = vec![0.0, 0.0, 2000.0, 0.0, 0.0, -75.0, 1900.0];
        let u: Vec<f64> = (0..50).flat_map(|_| [3000.0, 3000.0, 9000.0]).collect();
        let traj = simulate(&problem, &x0, &u).unwrap();
        for w in traj.states.windows(2) {
            assert!(w[1][6] < w[0][6], "mass must strictly decrease under thrust");
        }

        // Start barely above dry mass and burn hard: must fail with an index.
        let x0 = vec![0.0, 0.0, 2000.0, 0.0, 0.0, -75.0, 1010.0];
        let u: Vec<f64> = (0..50).flat_map(|_| [0.0, 0.0, 13000.0]).collect();
        match simulate(&problem, &x0, &u) {
            Err(TrcError::InfeasibleMass { step, .. }) => assert!(step > 0),
            other => panic!("expected infeasible mass, got {other:?}"),
        }
    }

    #[test]
    fn rollout_cost_gradient_matches_finite_differences() {
        // End-to-end check through the full RK4 rollout, a handful of
        // control entries per system.
        let mut r = ChaCha8Rng::seed_from_u64(33);
        for problem in [ControlProblem::vdp(), ControlProblem::rocket()] {
            let x0: Vec<f64> = match problem.params {
                SystemParams::Vdp(_) => vec![1.2, -0.7],
                SystemParams::Rocket(_) => vec![200.0, -100.0, 2000.0, 15.0, -5.0, -75.0, 1950.0],
            };
            let n = problem.horizon * problem.d_u;
            let controls: Vec<f64> = (0..n).map(|_| r.gen_range(problem.u_min[0] * 0.3..problem.u_max[0] * 0.3)).collect();

            let mut tape = Tape::new();
            let x0_id = tape.constant(x0.clone(), vec![1, problem.d_x]).unwrap();
            let u_id = tape.leaf(controls.clone(), vec![1, n], true).unwrap();
            let rec = rollout_op(&mut tape, &problem, x0_id, u_id).unwrap();
            let loss = tape.sum(rec.costs);
            tape.backward(loss).unwrap();
            let analytic = tape.grad(u_id).unwrap().to_vec();

            let eval = |u: &[f64]| simulate(&problem, &x0, u).unwrap().cost;
            // Scale-aware central difference step.
            let h = (problem.u_max[0] - problem.u_min[0]) * 2.5e-6;
            for i in 0..n {
                let mut up = controls.clone();
                up[i] += h;
                let mut dn = controls.clone();
                dn[i] -= h;
                let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
                let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(1e-8);
                assert!(rel < 1e-5, "{} entry {i}: analytic {} vs fd {}", problem.params.name(), analytic[i], fd);
            }
        }
    }

    #[test]
    fn clip_examples() {
        let mut u = vec![3.0];
        clip_controls(&mut u, &[-2.0], &[2.0]);
        assert_eq!(u, vec![2.0]);
        let mut v = vec![1.5, -0.5];
        clip_controls(&mut v, &[-2.0], &[2.0]);
        assert_eq!(v, vec![1.5, -0.5]);
    }

    #[test]
    fn terminal_error_examples() {
        let problem = ControlProblem::vdp();
        assert_eq!(terminal_error(&problem, &[0.0, 0.0]), vec![0.0, 0.0]);
        let e = terminal_error(&problem, &[1.0, 2.0]);
        assert_eq!(e, vec![1.0, 2.0]);
        let miss = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((miss - 5.0_f64.sqrt()).abs() < 1e-15);

        let rocket = ControlProblem::rocket();
        let e = terminal_error(&rocket, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 1500.0]);
        assert_eq!(e.len(), 6);
        assert_eq!(e, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn thrust_projection_enforces_annulus() {
        let p = RocketParams::default();
        let mut u = vec![100.0, 0.0, 0.0, 0.0, 0.0, 20000.0, 0.0, 0.0, 0.0, 3000.0, 4000.0, 5000.0];
        project_thrust_norm(&p, &mut u);
        for step in u.chunks(3) {
            let n = (step[0] * step[0] + step[1] * step[1] + step[2] * step[2]).sqrt();
            assert!(n >= p.t_min - 1e-9 && n <= p.t_max + 1e-9, "norm {n}");
        }
        // Direction preserved where nonzero.
        assert!(u[0] > 0.0 && u[1] == 0.0 && u[2] == 0.0);
    }

    #[test]
    fn glideslope_depth_measures_cone_violation() {
        let p = RocketParams::default();
        let tg = p.tan_glideslope();
        let inside = vec![vec![10.0, 0.0, 100.0, 0.0, 0.0, 0.0, 1500.0]];
        assert_eq!(glideslope_depth(&p, &inside), 0.0);
        let outside = vec![vec![50.0, 0.0, 10.0, 0.0, 0.0, 0.0, 1500.0]];
        let depth = glideslope_depth(&p, &outside);
        assert!((depth - (50.0 - 10.0 * tg)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn clip_is_idempotent_and_bounded(u in proptest::collection::vec(-10.0..10.0f64, 1..60)) {
            let mut once = u.clone();
            clip_controls(&mut once, &[-2.0], &[2.0]);
            prop_assert!(once.iter().all(|&v| (-2.0..=2.0).contains(&v)));
            let mut twice = once.clone();
            clip_controls(&mut twice, &[-2.0], &[2.0]);
            prop_assert_eq!(once, twice);
        }
    }
}
