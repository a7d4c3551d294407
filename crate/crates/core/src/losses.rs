//! Training objectives with exact gradients:
//!
//! * multistep critic loss: LINEX divergence between `d((s_i,a_i), g_j)` and the
//!   gradient-blocked target `d(s^w_i, g_j) - k'_i log γ`, over all `B²` pairs;
//! * action invariance: `(exp(-d(ψ(s_i), φ(s_i, a_j))) - 1)²` over all pairs;
//! * DDPG+BC policy loss against a frozen critic.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::ActionSpace;
use crate::nn::{Matrix, MlpSpec, NetShape, NnError, ParamStore};
use crate::par::Execution;
use crate::quasimetric::{
    mrn, mrn_grad, pairwise_backward, pairwise_distances, CriticGradient, QuasimetricCritic,
    QuasimetricError,
};
use crate::sampling::TrainBatch;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("policy loss needs a continuous action space; use greedy critic extraction for discrete actions")]
    DiscreteActionSpace,
    #[error("batch shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Quasimetric(#[from] QuasimetricError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Which `(s_i, a_j)` pairs the invariance loss visits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InvariancePairing {
    /// every state with every batch action (`B²` terms)
    #[default]
    Cross,
    /// only `i == j`
    Matched,
}

impl std::str::FromStr for InvariancePairing {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cross" => Ok(Self::Cross),
            "matched" => Ok(Self::Matched),
            _ => Err(format!("expected cross|matched, got `{s}`")),
        }
    }
}

impl std::fmt::Display for InvariancePairing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Cross => "cross",
            Self::Matched => "matched",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticLossConfig {
    pub gamma: f64,
    pub zeta: f64,
    pub divergence_clip: f64,
    pub invariance_pairing: InvariancePairing,
}

impl Default for CriticLossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.995,
            zeta: 1.0,
            divergence_clip: 5.0,
            invariance_pairing: InvariancePairing::Cross,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyLossConfig {
    pub alpha: f64,
    pub normalize_ddpg_term: bool,
    /// Gaussian std as a fraction of the action range.
    pub policy_std: f64,
}

impl Default for PolicyLossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.03,
            normalize_ddpg_term: true,
            policy_std: 0.2,
        }
    }
}

/// `L(δ) = exp(δ) - δ` with `δ = clip(d - d_target, ±clip)`; returns the loss
/// and `∂L/∂d` (zero once the clip is active). `d_target` is a constant.
pub fn bregman_linex(d: f64, d_target: f64, clip: f64) -> Result<(f64, f64), LossError> {
    if !d.is_finite() || !d_target.is_finite() {
        return Err(LossError::NonFinite("bregman_linex"));
    }
    Ok(linex(d - d_target, clip))
}

#[inline]
fn linex(raw: f64, clip: f64) -> (f64, f64) {
    let delta = raw.clamp(-clip, clip);
    let e = delta.exp();
    let grad = if raw.abs() > clip { 0.0 } else { e - 1.0 };
    (e - delta, grad)
}

/// Value and critic gradient of one critic objective.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticLoss {
    pub value: f64,
    pub grad: CriticGradient,
}

fn check_batch(critic: &QuasimetricCritic, batch: &TrainBatch) -> Result<(), LossError> {
    let b = batch.len();
    let od = critic.obs_dim();
    let shapes_ok = batch.s.cols == od
        && batch.s_w.cols == od
        && batch.g.cols == od
        && batch.a.cols == critic.act_dim()
        && [
            batch.a.rows,
            batch.s_w.rows,
            batch.g.rows,
            batch.k_prime.len(),
        ]
        .iter()
        .all(|&r| r == b);
    if !shapes_ok || b == 0 {
        return Err(LossError::Shape(format!(
            "batch of {b} rows with obs {}/act {} columns does not fit critic (obs {od}, act {})",
            batch.s.cols,
            batch.a.cols,
            critic.act_dim()
        )));
    }
    Ok(())
}

/// Regression targets `d(s^w_i, g_j) - k'_i log γ` as a `B × B` matrix.
pub fn multistep_targets(
    critic: &QuasimetricCritic,
    batch: &TrainBatch,
    cfg: &CriticLossConfig,
) -> Result<Matrix, LossError> {
    check_batch(critic, batch)?;
    let b = batch.len();
    let waypoints = critic.psi.predict(&batch.s_w)?;
    let goals = critic.psi.predict(&batch.g)?;
    let mut target = pairwise_distances(&waypoints, &goals, &critic.mrn, Execution::Parallel);
    let log_gamma = cfg.gamma.ln();
    for i in 0..b {
        let shift = -(batch.k_prime[i] as f64) * log_gamma;
        for v in target.row_mut(i) {
            *v += shift;
        }
    }
    Ok(target)
}

/// Mean over all `(i, j)` of `L(d((s_i,a_i), g_j) - [d(s^w_i, g_j) - k'_i log γ])`.
/// The target is treated as a constant.
pub fn critic_multistep_loss(
    critic: &QuasimetricCritic,
    batch: &TrainBatch,
    cfg: &CriticLossConfig,
) -> Result<CriticLoss, LossError> {
    let targets = multistep_targets(critic, batch, cfg)?;
    critic_multistep_loss_with_targets(critic, batch, cfg, &targets)
}

/// The multistep loss against precomputed `targets`.
pub fn critic_multistep_loss_with_targets(
    critic: &QuasimetricCritic,
    batch: &TrainBatch,
    cfg: &CriticLossConfig,
    targets: &Matrix,
) -> Result<CriticLoss, LossError> {
    check_batch(critic, batch)?;
    let b = batch.len();
    if targets.rows != b || targets.cols != b {
        return Err(LossError::Shape(format!(
            "targets are {}x{}, batch needs {b}x{b}",
            targets.rows, targets.cols
        )));
    }
    let exec = Execution::Parallel;
    let (left, left_tape) = critic.phi.forward(&Matrix::hcat(&batch.s, &batch.a)?)?;
    let (goals, goal_tape) = critic.psi.forward(&batch.g)?;
    let dist = pairwise_distances(&left, &goals, &critic.mrn, exec);
    let norm = 1.0 / (b * b) as f64;
    let mut value = 0.0;
    let mut upstream = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            let (l, g) = linex(dist.get(i, j) - targets.get(i, j), cfg.divergence_clip);
            value += l;
            upstream.data[i * b + j] = g * norm;
        }
    }
    value *= norm;
    if !value.is_finite() {
        return Err(LossError::NonFinite("critic_multistep_loss"));
    }
    let (gl, gg) = pairwise_backward(&left, &goals, &critic.mrn, &upstream, true, true, exec);
    let mut grad = CriticGradient::zeros_like(critic);
    critic
        .phi
        .backward_into(&left_tape, &gl.expect("requested"), &mut grad.phi)?;
    critic
        .psi
        .backward_into(&goal_tape, &gg.expect("requested"), &mut grad.psi)?;
    Ok(CriticLoss { value, grad })
}

/// Distinct batch actions (by bit pattern) with their multiplicities, in first
/// occurrence order.
fn unique_actions(a: &Matrix) -> (Matrix, Vec<usize>) {
    let mut keys: Vec<Vec<u64>> = Vec::new();
    let mut counts = Vec::new();
    let mut rows = Vec::new();
    for i in 0..a.rows {
        let key: Vec<u64> = a.row(i).iter().map(|v| v.to_bits()).collect();
        match keys.iter().position(|k| *k == key) {
            Some(p) => counts[p] += 1,
            None => {
                keys.push(key);
                counts.push(1);
                rows.push(i);
            }
        }
    }
    (a.gather_rows(&rows), counts)
}

/// Mean of `(exp(-d(ψ(s_i), φ(s_i, a_j))) - 1)²` over the pairs selected by
/// `pairing`. Repeated actions are evaluated once and weighted by their count.
pub fn action_invariance_loss(
    critic: &QuasimetricCritic,
    batch: &TrainBatch,
    pairing: InvariancePairing,
) -> Result<CriticLoss, LossError> {
    check_batch(critic, batch)?;
    let b = batch.len();
    let (states, state_tape) = critic.psi.forward(&batch.s)?;

    // (row of s, weight) per φ input row
    let (sa_input, pair_state, pair_weight, norm) = match pairing {
        InvariancePairing::Matched => (
            Matrix::hcat(&batch.s, &batch.a)?,
            (0..b).collect::<Vec<_>>(),
            vec![1.0; b],
            1.0 / b as f64,
        ),
        InvariancePairing::Cross => {
            let (actions, counts) = unique_actions(&batch.a);
            let u = actions.rows;
            let idx: Vec<usize> = (0..b * u).map(|r| r / u).collect();
            let act_idx: Vec<usize> = (0..b * u).map(|r| r % u).collect();
            let input = Matrix::hcat(&batch.s.gather_rows(&idx), &actions.gather_rows(&act_idx))?;
            let weights = act_idx.iter().map(|&k| counts[k] as f64).collect();
            (input, idx, weights, 1.0 / (b * b) as f64)
        }
    };
    let (sa, sa_tape) = critic.phi.forward(&sa_input)?;
    let mut value = 0.0;
    let mut g_states = Matrix::zeros(states.rows, states.cols);
    let mut g_sa = Matrix::zeros(sa.rows, sa.cols);
    for r in 0..sa.rows {
        let i = pair_state[r];
        let d = mrn(states.row(i), sa.row(r), &critic.mrn);
        let e = (-d).exp();
        let w = pair_weight[r] * norm;
        value += w * (e - 1.0) * (e - 1.0);
        let up = w * 2.0 * (e - 1.0) * (-e);
        if up != 0.0 {
            let gs = &mut g_states.data[i * states.cols..(i + 1) * states.cols];
            mrn_grad(
                states.row(i),
                sa.row(r),
                &critic.mrn,
                up,
                Some(gs),
                Some(g_sa.row_mut(r)),
            );
        }
    }
    if !value.is_finite() {
        return Err(LossError::NonFinite("action_invariance_loss"));
    }
    let mut grad = CriticGradient::zeros_like(critic);
    critic
        .psi
        .backward_into(&state_tape, &g_states, &mut grad.psi)?;
    critic.phi.backward_into(&sa_tape, &g_sa, &mut grad.phi)?;
    Ok(CriticLoss { value, grad })
}

/// Multistep loss plus `ζ` times the invariance loss.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedCriticLoss {
    pub total: f64,
    pub multistep: f64,
    pub invariance: f64,
    pub grad: CriticGradient,
}

pub fn combined_critic_loss(
    critic: &QuasimetricCritic,
    batch: &TrainBatch,
    cfg: &CriticLossConfig,
) -> Result<CombinedCriticLoss, LossError> {
    let ms = critic_multistep_loss(critic, batch, cfg)?;
    let mut grad = ms.grad;
    let invariance = if cfg.zeta != 0.0 {
        let inv = action_invariance_loss(critic, batch, cfg.invariance_pairing)?;
        grad.add_scaled(&inv.grad, cfg.zeta);
        inv.value
    } else {
        0.0
    };
    Ok(CombinedCriticLoss {
        total: ms.value + cfg.zeta * invariance,
        multistep: ms.value,
        invariance,
        grad,
    })
}

/// A critic that scores continuous actions: distances `d((s_i, a_i), g_i)` and
/// their gradients with respect to `a_i`.
pub trait ActionCritic {
    fn distances_and_action_grad(
        &self,
        s: &Matrix,
        a: &Matrix,
        g: &Matrix,
    ) -> Result<(Vec<f64>, Matrix), LossError>;
}

impl ActionCritic for QuasimetricCritic {
    fn distances_and_action_grad(
        &self,
        s: &Matrix,
        a: &Matrix,
        g: &Matrix,
    ) -> Result<(Vec<f64>, Matrix), LossError> {
        let (left, tape) = self.phi.forward(&Matrix::hcat(s, a)?)?;
        let goals = self.psi.predict(g)?;
        let mut d = Vec::with_capacity(left.rows);
        let mut up = Matrix::zeros(left.rows, left.cols);
        for i in 0..left.rows {
            d.push(mrn(left.row(i), goals.row(i), &self.mrn));
            mrn_grad(
                left.row(i),
                goals.row(i),
                &self.mrn,
                1.0,
                Some(up.row_mut(i)),
                None,
            );
        }
        // parameter gradients are computed and dropped; the critic is frozen here
        let (_, input_grad) = self.phi.backward(&tape, &up)?;
        Ok((d, input_grad.columns(s.cols, s.cols + a.cols)))
    }
}

/// Fixed-std Gaussian policy whose mean is `scale · tanh(net([s | g]))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub net: ParamStore,
    pub action_scale: f64,
    pub std: f64,
}

impl GaussianPolicy {
    pub fn new(
        obs_dim: usize,
        space: ActionSpace,
        shape: &NetShape,
        std_fraction: f64,
        seed: u64,
    ) -> Result<Self, LossError> {
        let ActionSpace::Continuous { dim, bound } = space else {
            return Err(LossError::DiscreteActionSpace);
        };
        let spec: MlpSpec = shape.spec(2 * obs_dim, dim);
        Ok(Self {
            net: ParamStore::init(&spec, seed)?,
            action_scale: bound,
            std: std_fraction * 2.0 * bound,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.net.spec().input_dim / 2
    }

    pub fn act_dim(&self) -> usize {
        self.net.spec().output_dim
    }

    pub fn mean_actions(&self, s: &Matrix, g: &Matrix) -> Result<Matrix, LossError> {
        let mut out = self.net.predict(&Matrix::hcat(s, g)?)?;
        out.data
            .iter_mut()
            .for_each(|v| *v = self.action_scale * v.tanh());
        Ok(out)
    }

    pub fn act(&self, s: &[f64], g: &[f64]) -> Result<Vec<f64>, LossError> {
        Ok(self
            .mean_actions(&Matrix::from_rows(&[s])?, &Matrix::from_rows(&[g])?)?
            .data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyLoss {
    pub value: f64,
    pub ddpg_term: f64,
    pub bc_term: f64,
    pub grad: Vec<f64>,
}

/// `mean_ij d((s_i, μ(s_i, g_j)), g_j) [/ detached mean |d|] - α mean_i log π(a_i | s_i, g_i)`.
/// The critic only supplies action gradients; its parameters are untouched.
pub fn policy_loss<C: ActionCritic + ?Sized>(
    policy: &GaussianPolicy,
    critic: &C,
    batch: &TrainBatch,
    cfg: &PolicyLossConfig,
) -> Result<PolicyLoss, LossError> {
    let b = batch.len();
    if b == 0 || batch.s.cols != policy.obs_dim() || batch.a.cols != policy.act_dim() {
        return Err(LossError::Shape("batch does not fit policy".into()));
    }
    let idx_s: Vec<usize> = (0..b * b).map(|r| r / b).collect();
    let idx_g: Vec<usize> = (0..b * b).map(|r| r % b).collect();
    let s_rep = batch.s.gather_rows(&idx_s);
    let g_rep = batch.g.gather_rows(&idx_g);
    let (raw, tape) = policy.net.forward(&Matrix::hcat(&s_rep, &g_rep)?)?;
    let tanh: Vec<f64> = raw.data.iter().map(|v| v.tanh()).collect();
    let mean = Matrix {
        rows: raw.rows,
        cols: raw.cols,
        data: tanh.iter().map(|t| policy.action_scale * t).collect(),
    };
    let (dist, d_grad) = critic.distances_and_action_grad(&s_rep, &mean, &g_rep)?;

    let pairs = (b * b) as f64;
    let ddpg_raw = dist.iter().sum::<f64>() / pairs;
    let scale = if cfg.normalize_ddpg_term {
        let m = dist.iter().map(|d| d.abs()).sum::<f64>() / pairs;
        1.0 / m.max(1e-8)
    } else {
        1.0
    };
    let ddpg_term = ddpg_raw * scale;

    let var = policy.std * policy.std;
    let act_dim = policy.act_dim();
    let log_norm = 0.5 * act_dim as f64 * (2.0 * std::f64::consts::PI * var).ln();
    let mut bc_sum = 0.0;
    let mut g_mean = Matrix::zeros(mean.rows, mean.cols);
    for r in 0..mean.rows {
        for (k, gm) in g_mean.row_mut(r).iter_mut().enumerate() {
            *gm = d_grad.get(r, k) * scale / pairs;
        }
    }
    for i in 0..b {
        let r = i * b + i;
        let mut sq = 0.0;
        for k in 0..act_dim {
            let diff = mean.get(r, k) - batch.a.get(i, k);
            sq += diff * diff;
            g_mean.data[r * act_dim + k] += cfg.alpha / b as f64 * diff / var;
        }
        bc_sum += sq / (2.0 * var) + log_norm;
    }
    let bc_term = cfg.alpha * bc_sum / b as f64;
    let value = ddpg_term + bc_term;
    if !value.is_finite() {
        return Err(LossError::NonFinite("policy_loss"));
    }
    let mut g_raw = g_mean;
    for (g, t) in g_raw.data.iter_mut().zip(&tanh) {
        *g *= policy.action_scale * (1.0 - t * t);
    }
    let (grad, _) = policy.net.backward(&tape, &g_raw)?;
    Ok(PolicyLoss {
        value,
        ddpg_term,
        bc_term,
        grad,
    })
}
