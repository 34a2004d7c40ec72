//! The two-level recursive refinement network.
//!
//! A compact set of weights is applied repeatedly: per outer iteration the
//! low-level latent runs `n` tactical cycles against the context encoding,
//! the high-level latent updates once from what the low level learned, and a
//! residual decoder nudges the control sequence, which is clipped to bounds
//! and re-simulated. The reasoning module is a single parameter set shared
//! by both latent levels and every one of the `K*(n+1)` applications, so
//! iteration depth adds computation but no parameters.

use crate::autodiff::{Tape, TensorId};
use crate::dynamics::{rollout_op, ControlProblem, SystemParams};
use crate::error::{Result, TrcError};
use crate::train::Normalizer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Architecture and iteration-depth settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrcConfig {
    /// Latent dimension.
    pub d_z: usize,
    /// Feed-forward hidden dimension.
    pub d_h: usize,
    /// Reasoning blocks per module application.
    pub blocks: usize,
    /// Attention heads.
    pub heads: usize,
    /// Outer refinement iterations K.
    pub outer_iters: usize,
    /// Low-level cycles n per outer iteration.
    pub inner_cycles: usize,
    // Problem shapes.
    pub d_x: usize,
    pub d_u: usize,
    pub horizon: usize,
    pub d_e: usize,
}

impl TrcConfig {
    /// Full-scale defaults: d_z 256, d_h 512, 3 blocks, 8 heads, K = 3,
    /// n = 4 for Van der Pol and 6 for the rocket.
    pub fn defaults(problem: &ControlProblem) -> Self {
        let inner_cycles = match problem.params {
            SystemParams::Vdp(_) => 4,
            SystemParams::Rocket(_) => 6,
        };
        TrcConfig {
            d_z: 256,
            d_h: 512,
            blocks: 3,
            heads: 8,
            outer_iters: 3,
            inner_cycles,
            d_x: problem.d_x,
            d_u: problem.d_u,
            horizon: problem.horizon,
            d_e: problem.error_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_z == 0 || self.d_z % self.heads != 0 {
            return Err(TrcError::Config(format!(
                "d_z ({}) must be a positive multiple of heads ({})",
                self.d_z, self.heads
            )));
        }
        if self.outer_iters == 0 {
            return Err(TrcError::Config("outer_iters must be >= 1".into()));
        }
        if self.inner_cycles == 0 {
            return Err(TrcError::Config("inner_cycles must be >= 1".into()));
        }
        if self.blocks == 0 {
            return Err(TrcError::Config("blocks must be >= 1".into()));
        }
        Ok(())
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// All learnable weights, in a fixed creation order that also defines the
/// checkpoint blob layout.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub tensors: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(ParamTensor { name: name.to_string(), shape, data });
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> usize {
        self.tensors
            .iter()
            .position(|t| t.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Register every parameter on a tape, in store order.
    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> Result<Vec<TensorId>> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t.data.clone(), t.shape.clone(), requires_grad))
            .collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Gain applied to the latent-initialization projections W_H / W_L so the
/// iteration-0 latents are genuinely scattered across samples.
const INIT_PROJ_GAIN: f64 = 4.0;

/// Output layers of both decoders start near zero: the initial decoder then
/// emits the dataset mean control and residuals start as the identity
/// update, keeping early controls interior to the bounds.
const DECODER_OUT_GAIN: f64 = 0.01;

/// Build a freshly initialized parameter store for `cfg`.
pub fn init_params(cfg: &TrcConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::default();
    let n_ctrl = cfg.horizon * cfg.d_u;

    let linear = |p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, nin: usize, nout: usize, gain: f64| {
        let scale = gain / (nin as f64).sqrt();
        p.push(&format!("{name}.w"), vec![nin, nout], uniform(rng, nin * nout, scale));
        p.push(&format!("{name}.b"), vec![nout], vec![0.0; nout]);
    };
    let layernorm = |p: &mut ParamStore, name: &str, d: usize| {
        p.push(&format!("{name}.gamma"), vec![d], vec![1.0; d]);
        p.push(&format!("{name}.beta"), vec![d], vec![0.0; d]);
    };

    linear(&mut p, &mut rng, "state_encoder.l1", 2 * cfg.d_x + 1, cfg.d_z, 1.0);
    layernorm(&mut p, "state_encoder.ln", cfg.d_z);
    linear(&mut p, &mut rng, "state_encoder.l2", cfg.d_z, cfg.d_z, 1.0);

    linear(&mut p, &mut rng, "error_encoder.l1", cfg.d_e, cfg.d_z, 1.0);
    layernorm(&mut p, "error_encoder.ln", cfg.d_z);
    linear(&mut p, &mut rng, "error_encoder.l2", cfg.d_z, cfg.d_z, 1.0);

    linear(&mut p, &mut rng, "control_embed", n_ctrl, cfg.d_z, 1.0);

    p.push("h_init", vec![cfg.d_z], uniform(&mut rng, cfg.d_z, 0.02));
    p.push("l_init", vec![cfg.d_z], uniform(&mut rng, cfg.d_z, 0.02));
    linear(&mut p, &mut rng, "h_proj", cfg.d_z, cfg.d_z, INIT_PROJ_GAIN);
    linear(&mut p, &mut rng, "l_proj", cfg.d_z, cfg.d_z, INIT_PROJ_GAIN);

    for b in 0..cfg.blocks {
        let base = format!("reason.block{b}");
        linear(&mut p, &mut rng, &format!("{base}.wq"), cfg.d_z, cfg.d_z, 1.0);
        linear(&mut p, &mut rng, &format!("{base}.wk"), cfg.d_z, cfg.d_z, 1.0);
        linear(&mut p, &mut rng, &format!("{base}.wv"), cfg.d_z, cfg.d_z, 1.0);
        linear(&mut p, &mut rng, &format!("{base}.wo"), cfg.d_z, cfg.d_z, 1.0);
        layernorm(&mut p, &format!("{base}.ln1"), cfg.d_z);
        linear(&mut p, &mut rng, &format!("{base}.ff1"), cfg.d_z, cfg.d_h, 1.0);
        linear(&mut p, &mut rng, &format!("{base}.ff2"), cfg.d_h, cfg.d_z, 1.0);
        layernorm(&mut p, &format!("{base}.ln2"), cfg.d_z);
    }

    linear(&mut p, &mut rng, "initial_decoder.l1", cfg.d_z, cfg.d_h, 1.0);
    linear(&mut p, &mut rng, "initial_decoder.l2", cfg.d_h, n_ctrl, DECODER_OUT_GAIN);
    linear(&mut p, &mut rng, "residual_decoder.l1", cfg.d_z + n_ctrl, cfg.d_h, 1.0);
    linear(&mut p, &mut rng, "residual_decoder.l2", cfg.d_h, n_ctrl, DECODER_OUT_GAIN);

    p
}

/// Exact count of scalar learnables. Independent of K and n: iteration
/// depth reuses the same tensors.
pub fn param_count(params: &ParamStore) -> usize {
    params.param_count()
}

/// Resolved tape handles for every parameter, looked up by name once per
/// forward pass.
pub struct BoundParams<'a> {
    store: &'a ParamStore,
    pub ids: Vec<TensorId>,
}

impl<'a> BoundParams<'a> {
    pub fn new(store: &'a ParamStore, tape: &mut Tape, requires_grad: bool) -> Result<Self> {
        let ids = store.register(tape, requires_grad)?;
        Ok(BoundParams { store, ids })
    }

    fn id(&self, name: &str) -> TensorId {
        self.ids[self.store.index_of(name)]
    }
}

fn dense(tape: &mut Tape, p: &BoundParams, base: &str, x: TensorId) -> Result<TensorId> {
    let h = tape.matmul(x, p.id(&format!("{base}.w")))?;
    tape.add(h, p.id(&format!("{base}.b")))
}

fn norm_layer(tape: &mut Tape, p: &BoundParams, base: &str, x: TensorId) -> Result<TensorId> {
    tape.layernorm(x, p.id(&format!("{base}.gamma")), p.id(&format!("{base}.beta")), 1e-5)
}

/// Two linear layers with LayerNorm and GELU between them.
fn encoder_mlp(tape: &mut Tape, p: &BoundParams, base: &str, x: TensorId) -> Result<TensorId> {
    let h = dense(tape, p, &format!("{base}.l1"), x)?;
    let h = norm_layer(tape, p, &format!("{base}.ln"), h)?;
    let h = tape.gelu(h);
    dense(tape, p, &format!("{base}.l2"), h)
}

/// Problem specification to latent: MLP over `[x0; x_target; t_remaining]`
/// in normalized units.
pub fn encode_state(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &TrcConfig,
    norm: &Normalizer,
    x0s: &[f64],
    x_target: &[f64],
    batch: usize,
) -> Result<TensorId> {
    if x0s.len() != batch * cfg.d_x {
        return Err(TrcError::Dimension(format!(
            "x0 batch has {} values, expected {} x {}",
            x0s.len(),
            batch,
            cfg.d_x
        )));
    }
    let tgt_n = norm.normalize_state(x_target);
    let width = 2 * cfg.d_x + 1;
    let mut inp = Vec::with_capacity(batch * width);
    for b in 0..batch {
        let x0n = norm.normalize_state(&x0s[b * cfg.d_x..(b + 1) * cfg.d_x]);
        inp.extend_from_slice(&x0n);
        inp.extend_from_slice(&tgt_n);
        // Full-horizon planning: the whole sequence is produced at once.
        inp.push(1.0);
    }
    let inp = tape.constant(inp, vec![batch, width])?;
    encoder_mlp(tape, p, "state_encoder", inp)
}

/// Terminal tracking error to latent.
pub fn encode_error(tape: &mut Tape, p: &BoundParams, e_norm: TensorId) -> Result<TensorId> {
    encoder_mlp(tape, p, "error_encoder", e_norm)
}

/// Current (normalized) control sequence to latent: a single linear map.
pub fn embed_controls(tape: &mut Tape, p: &BoundParams, u_norm: TensorId) -> Result<TensorId> {
    dense(tape, p, "control_embed", u_norm)
}

/// One application of the shared reasoning module: the pair is laid out as
/// the 2-token sequence `[self; context]`, run through the blocks
/// (self-attention then feed-forward, post-LN residual sublayers), and the
/// first token is returned.
pub fn reasoning_step(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &TrcConfig,
    z_self: TensorId,
    z_context: TensorId,
) -> Result<TensorId> {
    let batch = tape.shape(z_self)[0];
    let d_head = cfg.d_z / cfg.heads;
    let inv_sqrt = 1.0 / (d_head as f64).sqrt();
    let mut a = z_self;
    let mut c = z_context;
    for blk in 0..cfg.blocks {
        let base = format!("reason.block{blk}");
        let qa = dense(tape, p, &format!("{base}.wq"), a)?;
        let ka = dense(tape, p, &format!("{base}.wk"), a)?;
        let va = dense(tape, p, &format!("{base}.wv"), a)?;
        let qc = dense(tape, p, &format!("{base}.wq"), c)?;
        let kc = dense(tape, p, &format!("{base}.wk"), c)?;
        let vc = dense(tape, p, &format!("{base}.wv"), c)?;
        // Heads become rows so per-head attention over the 2 tokens is
        // plain row arithmetic.
        let hs = vec![batch * cfg.heads, d_head];
        let qa = tape.reshape(qa, hs.clone())?;
        let ka = tape.reshape(ka, hs.clone())?;
        let va = tape.reshape(va, hs.clone())?;
        let qc = tape.reshape(qc, hs.clone())?;
        let kc = tape.reshape(kc, hs.clone())?;
        let vc = tape.reshape(vc, hs.clone())?;

        let attend = |tape: &mut Tape, q: TensorId| -> Result<TensorId> {
            let s_self = tape.mul(q, ka)?;
            let s_self = tape.sum_last(s_self)?;
            let s_self = tape.scale(s_self, inv_sqrt);
            let s_ctx = tape.mul(q, kc)?;
            let s_ctx = tape.sum_last(s_ctx)?;
            let s_ctx = tape.scale(s_ctx, inv_sqrt);
            let scores = tape.concat_last(&[s_self, s_ctx])?;
            let w = tape.softmax(scores)?;
            let w_self = tape.slice_last(w, 0, 1)?;
            let w_ctx = tape.slice_last(w, 1, 1)?;
            let o_self = tape.mul(va, w_self)?;
            let o_ctx = tape.mul(vc, w_ctx)?;
            let o = tape.add(o_self, o_ctx)?;
            tape.reshape(o, vec![batch, cfg.d_z])
        };
        let oa = attend(tape, qa)?;
        let oc = attend(tape, qc)?;

        let sublayers = |tape: &mut Tape, x: TensorId, attn: TensorId| -> Result<TensorId> {
            let proj = dense(tape, p, &format!("{base}.wo"), attn)?;
            let x = tape.add(x, proj)?;
            let x = norm_layer(tape, p, &format!("{base}.ln1"), x)?;
            let h = dense(tape, p, &format!("{base}.ff1"), x)?;
            let h = tape.gelu(h);
            let h = dense(tape, p, &format!("{base}.ff2"), h)?;
            let x = tape.add(x, h)?;
            norm_layer(tape, p, &format!("{base}.ln2"), x)
        };
        a = sublayers(tape, a, oa)?;
        c = sublayers(tape, c, oc)?;
    }
    Ok(a)
}

/// Everything produced by one forward pass: plain values for reporting and
/// the tape handles needed to build the training loss.
#[derive(Debug)]
pub struct ForwardPass {
    pub record: ForwardRecord,
    /// `K+1` control tensors, each `B x (T*d_u)`.
    pub control_ids: Vec<TensorId>,
    /// `K+1` per-sample trajectory costs, each `B x 1`.
    pub cost_ids: Vec<TensorId>,
}

/// Per-iteration values of one forward pass over a batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForwardRecord {
    pub batch: usize,
    /// `K+1` entries of `B * T * d_u` flattened controls.
    pub controls_per_iter: Vec<Vec<f64>>,
    /// `K+1` entries of `B` per-sample trajectory costs.
    pub costs_per_iter: Vec<Vec<f64>>,
    /// `K+1` entries of `B * d_z` high-level latent snapshots.
    pub latents_per_iter: Vec<Vec<f64>>,
    /// `K` entries of `B * d_e` terminal errors.
    pub errors_per_iter: Vec<Vec<f64>>,
    /// `K` entries of `B` residual Euclidean norms.
    pub residual_norms: Vec<Vec<f64>>,
    /// `K` entries of `B * T * d_u` raw decoder residuals (pre-clip).
    pub residuals_per_iter: Vec<Vec<f64>>,
}

/// Characteristic scale of the terminal-error feedback, per component.
/// The oscillator's errors live on the state distribution's scale; the
/// rocket's feedback must resolve touchdown tolerances, so its scale comes
/// from the terminal cost weighting (velocities at v_tol, positions at
/// sqrt(w_vel/w_pos) * v_tol).
fn error_scale(problem: &ControlProblem, norm: &Normalizer) -> Vec<f64> {
    match &problem.cost {
        crate::dynamics::CostSpec::Quadratic { .. } => norm.x_std[..problem.error_dim()].to_vec(),
        crate::dynamics::CostSpec::Fuel { w_pos, w_vel, v_tol } => {
            let vel = *v_tol;
            let pos = (w_vel / w_pos).sqrt() * vel;
            vec![pos, pos, pos, vel, vel, vel]
        }
    }
}

fn tile(pattern: &[f64], reps: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(pattern.len() * reps);
    for _ in 0..reps {
        out.extend_from_slice(pattern);
    }
    out
}

/// Run the full refinement loop for `k_iters` outer iterations, recording
/// controls, costs, latents, errors, and residual norms per iteration.
/// `k_iters = 0` degenerates to the initial decoder alone.
#[allow(clippy::too_many_arguments)]
pub fn forward(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &TrcConfig,
    problem: &ControlProblem,
    norm: &Normalizer,
    x0s: &[f64],
    batch: usize,
    k_iters: usize,
    n_cycles: usize,
) -> Result<ForwardPass> {
    cfg.validate()?;
    let n_ctrl = cfg.horizon * cfg.d_u;
    let d_e = cfg.d_e;

    let u_mean = tile(&norm.u_mean, cfg.horizon);
    let u_istd: Vec<f64> = tile(&norm.u_std, cfg.horizon).iter().map(|s| 1.0 / s).collect();
    let u_mean_t = tape.constant(u_mean, vec![n_ctrl])?;
    let u_std_t = tape.constant(tile(&norm.u_std, cfg.horizon), vec![n_ctrl])?;
    let u_istd_t = tape.constant(u_istd, vec![n_ctrl])?;
    let e_istd: Vec<f64> = error_scale(problem, norm).iter().map(|s| 1.0 / s).collect();
    let e_istd_t = tape.constant(e_istd, vec![d_e])?;
    let e_tgt = tape.constant(problem.x_target[..d_e].to_vec(), vec![d_e])?;
    let x0_t = tape.constant(x0s.to_vec(), vec![batch, cfg.d_x])?;

    // Problem encoding, kept fixed across iterations.
    let z0 = encode_state(tape, p, cfg, norm, x0s, &problem.x_target, batch)?;

    // Latent initialization: learnable vectors plus sample-specific
    // projections of the problem encoding.
    let hp = dense(tape, p, "h_proj", z0)?;
    let mut z_h = tape.add(hp, p.id("h_init"))?;
    let lp = dense(tape, p, "l_proj", z0)?;
    let mut z_l = tape.add(lp, p.id("l_init"))?;

    // Initial control estimate, denormalized and clipped.
    let h = dense(tape, p, "initial_decoder.l1", z0)?;
    let h = tape.gelu(h);
    let raw = dense(tape, p, "initial_decoder.l2", h)?;
    let scaled = tape.mul(raw, u_std_t)?;
    let unclipped = tape.add(scaled, u_mean_t)?;
    let mut u = tape.clamp(unclipped, &problem.u_min, &problem.u_max)?;

    let mut pass = ForwardPass {
        record: ForwardRecord {
            batch,
            controls_per_iter: vec![tape.data(u).to_vec()],
            costs_per_iter: Vec::new(),
            latents_per_iter: vec![tape.data(z_h).to_vec()],
            errors_per_iter: Vec::new(),
            residual_norms: Vec::new(),
            residuals_per_iter: Vec::new(),
        },
        control_ids: vec![u],
        cost_ids: Vec::new(),
    };

    for k in 1..=k_iters {
        let rec = rollout_op(tape, problem, x0_t, u).map_err(|e| match e {
            TrcError::InfeasibleMass { step, mass, m_dry } => TrcError::Contract(format!(
                "refinement iteration {k}: infeasible mass {mass:.3} kg < {m_dry} kg at rollout step {step}"
            )),
            other => other,
        })?;
        pass.cost_ids.push(rec.costs);
        pass.record.costs_per_iter.push(tape.data(rec.costs).to_vec());

        // Terminal error, normalized by the state scales.
        let x_t = *rec.states.last().unwrap();
        let e_raw = tape.slice_last(x_t, 0, d_e)?;
        let e_raw = tape.sub(e_raw, e_tgt)?;
        pass.record.errors_per_iter.push(tape.data(e_raw).to_vec());
        let e_n = tape.mul(e_raw, e_istd_t)?;

        let z_err = encode_error(tape, p, e_n)?;
        let u_shift = tape.sub(u, u_mean_t)?;
        let u_n = tape.mul(u_shift, u_istd_t)?;
        let z_ctrl = embed_controls(tape, p, u_n)?;
        let zc = tape.add(z0, z_err)?;
        let z_ctx = tape.add(zc, z_ctrl)?;

        // n tactical cycles against the fixed high-level guidance, then one
        // strategic update from the final low-level state.
        let guidance = tape.add(z_h, z_ctx)?;
        for _ in 0..n_cycles {
            z_l = reasoning_step(tape, p, cfg, z_l, guidance)?;
        }
        z_h = reasoning_step(tape, p, cfg, z_h, z_l)?;
        pass.record.latents_per_iter.push(tape.data(z_h).to_vec());

        // Residual update of the control sequence.
        let dec_in = tape.concat_last(&[z_h, u_n])?;
        let h = dense(tape, p, "residual_decoder.l1", dec_in)?;
        let h = tape.gelu(h);
        let raw = dense(tape, p, "residual_decoder.l2", h)?;
        let du = tape.mul(raw, u_std_t)?;
        let du_vals = tape.data(du).to_vec();
        let norms: Vec<f64> = du_vals
            .chunks(n_ctrl)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        pass.record.residual_norms.push(norms);
        pass.record.residuals_per_iter.push(du_vals);

        let sum = tape.add(u, du)?;
        u = tape.clamp(sum, &problem.u_min, &problem.u_max)?;
        pass.control_ids.push(u);
        pass.record.controls_per_iter.push(tape.data(u).to_vec());
    }

    // Cost of the final controls.
    let rec = rollout_op(tape, problem, x0_t, u)?;
    pass.cost_ids.push(rec.costs);
    pass.record.costs_per_iter.push(tape.data(rec.costs).to_vec());
    Ok(pass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ControlProblem;

    fn tiny_config(problem: &ControlProblem) -> TrcConfig {
        let mut cfg = TrcConfig::defaults(problem);
        cfg.d_z = 16;
        cfg.d_h = 24;
        cfg.blocks = 1;
        cfg.heads = 2;
        cfg.outer_iters = 2;
        cfg.inner_cycles = 1;
        cfg
    }

    fn identity_norm(problem: &ControlProblem) -> Normalizer {
        Normalizer {
            x_mean: vec![0.0; problem.d_x],
            x_std: vec![1.0; problem.d_x],
            u_mean: vec![0.0; problem.d_u],
            u_std: vec![1.0; problem.d_u],
        }
    }

    #[test]
    fn param_count_at_paper_defaults_is_in_range() {
        let problem = ControlProblem::vdp();
        let cfg = TrcConfig::defaults(&problem);
        let params = init_params(&cfg, 0);
        let n = param_count(&params);
        assert!(
            (1_000_000..=2_500_000).contains(&n),
            "parameter count {n} outside [1.0M, 2.5M]"
        );
    }

    #[test]
    fn param_count_is_invariant_to_iteration_depth() {
        let problem = ControlProblem::vdp();
        let mut counts = Vec::new();
        for (k, n) in [(1, 1), (3, 4), (6, 8)] {
            let mut cfg = TrcConfig::defaults(&problem);
            cfg.outer_iters = k;
            cfg.inner_cycles = n;
            counts.push(param_count(&init_params(&cfg, 0)));
        }
        assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
    }

    #[test]
    fn encoders_have_latent_shape_and_distinguish_inputs() {
        let problem = ControlProblem::vdp();
        let cfg = tiny_config(&problem);
        let params = init_params(&cfg, 1);
        let norm = identity_norm(&problem);
        let mut tape = Tape::new();
        let p = BoundParams::new(&params, &mut tape, false).unwrap();
        let x0s = vec![1.0, -0.5, -1.2, 0.7];
        let z0 = encode_state(&mut tape, &p, &cfg, &norm, &x0s, &[0.0, 0.0], 2).unwrap();
        assert_eq!(tape.shape(z0), &[2, cfg.d_z]);
        let rows = tape.data(z0);
        let (a, b) = rows.split_at(cfg.d_z);
        assert!(
            a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-9),
            "distinct x0 must map to distinct z0"
        );
    }

    #[test]
    fn zero_error_encodes_identically_across_samples() {
        let problem = ControlProblem::vdp();
        let cfg = tiny_config(&problem);
        let params = init_params(&cfg, 2);
        let mut tape = Tape::new();
        let p = BoundParams::new(&params, &mut tape, false).unwrap();
        let e = tape.constant(vec![0.0; 2 * cfg.d_e], vec![2, cfg.d_e]).unwrap();
        let z = encode_error(&mut tape, &p, e).unwrap();
        let rows = tape.data(z);
        let (a, b) = rows.split_at(cfg.d_z);
        assert!(a.iter().zip(b).all(|(x, y)| x == y));
    }

    #[test]
    fn control_embedding_is_affine() {
        let problem = ControlProblem::vdp();
        let cfg = tiny_config(&problem);
        let params = init_params(&cfg, 3);
        let n = cfg.horizon * cfg.d_u;
        let embed = |u: &[f64]| -> Vec<f64> {
            let mut tape = Tape::new();
            let p = BoundParams::new(&params, &mut tape, false).unwrap();
            let ut = tape.constant(u.to_vec(), vec![1, n]).unwrap();
            let z = embed_controls(&mut tape, &p, ut).unwrap();
            tape.data(z).to_vec()
        };
        let bias = embed(&vec![0.0; n]);
        let ua: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let ub: Vec<f64> = (0..n).map(|i| (i as f64 * 0.11).cos()).collect();
        let uab: Vec<f64> = ua.iter().zip(&ub).map(|(a, b)| a + b).collect();
        let (za, zb, zab) = (embed(&ua), embed(&ub), embed(&uab));
        for i in 0..za.len() {
            let rhs = za[i] + zb[i] - bias[i];
            assert!((zab[i] - rhs).abs() < 1e-9, "affine identity violated at {i}");
        }
    }

    #[test]
    fn reasoning_step_output_shape() {
        let problem = ControlProblem::vdp();
        let cfg = tiny_config(&problem);
        let params = init_params(&cfg, 4);
        let mut tape = Tape::new();
        let p = BoundParams::new(&params, &mut tape, false).unwrap();
        let a = tape.constant(vec![0.3; 3 * cfg.d_z], vec![3, cfg.d_z]).unwrap();
        let c = tape.constant(vec![-0.2; 3 * cfg.d_z], vec![3, cfg.d_z]).unwrap();
        let out = reasoning_step(&mut tape, &p, &cfg, a, c).unwrap();
        assert_eq!(tape.shape(out), &[3, cfg.d_z]);
    }

    #[test]
    fn forward_shapes_and_bounds() {
        let problem = ControlProblem::vdp();
        let cfg = tiny_config(&problem);
        let params = init_params(&cfg, 5);
        let norm = identity_norm(&problem);
        let mut tape = Tape::new();
        let p = BoundParams::new(&params, &mut tape, false).unwrap();
        let x0s = vec![1.5, -1.0, 0.3, 0.9, -1.8, -0.2];
        let pass = forward(&mut tape, &p, &cfg, &problem, &norm, &x0s, 3, 3, 2).unwrap();
        assert_eq!(pass.record.controls_per_iter.len(), 4);
        assert_eq!(pass.record.costs_per_iter.len(), 4);
        assert_eq!(pass.record.latents_per_iter.len(), 4);
        assert_eq!(pass.record.errors_per_iter.len(), 3);
        assert_eq!(pass.record.residual_norms.len(), 3);
        assert_eq!(pass.record.controls_per_iter[0].len(), 3 * 100);
        for controls in &pass.record.controls_per_iter {
            assert!(controls.iter().all(|&u| (-2.0..=2.0).contains(&u)));
        }
    }

    #[test]
    fn forward_with_zero_iterations_is_initial_decoder_only() {
        let problem = ControlProblem::vdp();
        let cfg = tiny_config(&problem);
        let params = init_params(&cfg, 6);
        let norm = identity_norm(&problem);
        let mut tape = Tape::new();
        let p = BoundParams::new(&params, &mut tape, false).unwrap();
        let pass = forward(&mut tape, &p, &cfg, &problem, &norm, &[0.5, 0.5], 1, 0, 2).unwrap();
        assert_eq!(pass.record.controls_per_iter.len(), 1);
        assert_eq!(pass.record.costs_per_iter.len(), 1);
        assert!(pass.record.errors_per_iter.is_empty());
    }

    #[test]
    fn forward_is_deterministic() {
        let problem = ControlProblem::vdp();
        let cfg = tiny_config(&problem);
        let params = init_params(&cfg, 7);
        let norm = identity_norm(&problem);
        let run = || {
            let mut tape = Tape::new();
            let p = BoundParams::new(&params, &mut tape, false).unwrap();
            forward(&mut tape, &p, &cfg, &problem, &norm, &[1.1, -0.6], 1, 2, 2)
                .unwrap()
                .record
        };
        let (a, b) = (run(), run());
        for (ca, cb) in a.controls_per_iter.iter().zip(&b.controls_per_iter) {
            assert!(ca.iter().zip(cb).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        for (ca, cb) in a.costs_per_iter.iter().zip(&b.costs_per_iter) {
            assert!(ca.iter().zip(cb).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn gradients_flow_to_all_parameters_and_grow_with_depth() {
        let problem = ControlProblem::vdp();
        let cfg = tiny_config(&problem);
        let params = init_params(&cfg, 8);
        let norm = identity_norm(&problem);
        let reason_grad_norm = |k: usize| -> f64 {
            let mut tape = Tape::new();
            let p = BoundParams::new(&params, &mut tape, true).unwrap();
            let pass = forward(&mut tape, &p, &cfg, &problem, &norm, &[1.0, -0.5], 1, k, 2).unwrap();
            let last = *pass.control_ids.last().unwrap();
            let sq = tape.square(last);
            let loss = tape.mean(sq);
            tape.backward(loss).unwrap();
            let mut total = 0.0;
            for (i, t) in params.tensors.iter().enumerate() {
                if t.name.starts_with("reason.") {
                    if let Some(g) = tape.grad(p.ids[i]) {
                        total += g.iter().map(|v| v * v).sum::<f64>();
                    }
                }
            }
            total.sqrt()
        };
        let g1 = reason_grad_norm(1);
        let g3 = reason_grad_norm(3);
        assert!(g1 > 0.0, "reasoning gradients must be nonzero");
        assert!(g3 > g1, "more refinement iterations must accumulate more gradient: {g3} vs {g1}");

        // Every parameter, encoders included, receives gradient from the
        // final loss.
        let mut tape = Tape::new();
        let p = BoundParams::new(&params, &mut tape, true).unwrap();
        let pass = forward(&mut tape, &p, &cfg, &problem, &norm, &[1.0, -0.5], 1, 2, 2).unwrap();
        let last = *pass.control_ids.last().unwrap();
        let sq = tape.square(last);
        let loss = tape.mean(sq);
        tape.backward(loss).unwrap();
        for (i, t) in params.tensors.iter().enumerate() {
            let g = tape.grad(p.ids[i]);
            assert!(g.is_some(), "no gradient for {}", t.name);
            let norm2: f64 = g.unwrap().iter().map(|v| v * v).sum();
            assert!(norm2 > 0.0, "zero gradient for {}", t.name);
        }
    }
}
