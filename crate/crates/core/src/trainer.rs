//! The MQE training loop: sample a batch, take one Adam step on the combined
//! critic loss, then (continuous actions only) one Adam step on the DDPG+BC
//! policy loss with the critic frozen.
//!
//! Every batch is drawn from the stream `(seed, "batch", step)`, so a
//! checkpoint only needs the step counter to resume the exact sequence.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{ActionSpace, Dataset};
use crate::losses::{
    action_invariance_loss, combined_critic_loss, critic_multistep_loss, policy_loss,
    CriticLossConfig, GaussianPolicy, LossError, PolicyLossConfig,
};
use crate::nn::{adam_step, AdamState, MlpSpec, NetShape, NnError, ParamStore};
use crate::quasimetric::{MrnConfig, QuasimetricCritic, QuasimetricError};
use crate::rng;
use crate::sampling::{SamplerConfig, SamplingError, TrainBatch, TransitionSampler};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dataset does not match config: {0}")]
    Dimension(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: usize, what: String },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint does not match config: field `{0}` differs")]
    Mismatch(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Quasimetric(#[from] QuasimetricError),
}

/// Lines 4 and 5 of the algorithm as one step on `L_T + ζ L_I`, or as two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CriticUpdate {
    #[default]
    Fused,
    Separate,
}

impl FromStr for CriticUpdate {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fused" => Ok(Self::Fused),
            "separate" => Ok(Self::Separate),
            _ => Err(format!("expected fused|separate, got `{s}`")),
        }
    }
}

impl fmt::Display for CriticUpdate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fused => "fused",
            Self::Separate => "separate",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// 256 at paper scale
    pub batch_size: usize,
    pub total_steps: usize,
    pub sampler: SamplerConfig,
    pub critic_loss: CriticLossConfig,
    pub policy_loss: PolicyLossConfig,
    /// (512, 512, 512) at paper scale
    pub encoder: NetShape,
    pub policy: NetShape,
    /// 8 components of 64 at paper scale
    pub mrn: MrnConfig,
    pub learning_rate: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub critic_update: CriticUpdate,
    /// Wall time makes metrics nondeterministic, so it is off unless asked for.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            total_steps: 50_000,
            sampler: SamplerConfig::default(),
            critic_loss: CriticLossConfig::default(),
            policy_loss: PolicyLossConfig::default(),
            encoder: NetShape::default(),
            policy: NetShape::default(),
            mrn: MrnConfig::default(),
            learning_rate: 3e-4,
            seed: 0,
            eval_every: 1000,
            checkpoint_every: 10_000,
            critic_update: CriticUpdate::Fused,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.total_steps < 1 {
            return bad("total_steps must be >= 1".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive".into());
        }
        if self.eval_every < 1 {
            return bad("eval_every must be >= 1".into());
        }
        let cl = &self.critic_loss;
        if !(cl.gamma > 0.0 && cl.gamma < 1.0) {
            return bad("critic_loss.gamma must lie in (0,1)".into());
        }
        if !(cl.zeta >= 0.0) || !(cl.divergence_clip > 0.0) {
            return bad("critic_loss.zeta must be >= 0 and divergence_clip > 0".into());
        }
        let pl = &self.policy_loss;
        if !(pl.alpha >= 0.0) || !(pl.policy_std > 0.0) {
            return bad("policy_loss.alpha must be >= 0 and policy_std > 0".into());
        }
        self.sampler
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        self.mrn
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        for (name, shape) in [("encoder", &self.encoder), ("policy", &self.policy)] {
            shape
                .spec(1, 1)
                .validate()
                .map_err(|e| TrainError::Config(format!("{name}: {e}")))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub critic_loss: f64,
    pub invariance_loss: f64,
    pub policy_loss: f64,
    pub mean_distance_sa_g: f64,
    pub mean_distance_s_g: f64,
    pub wall_time_s: f64,
}

pub const METRICS_HEADER: &str =
    "step,critic_loss,invariance_loss,policy_loss,mean_distance_sa_g,mean_distance_s_g,wall_time_s";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e}\n",
            r.step,
            r.critic_loss,
            r.invariance_loss,
            r.policy_loss,
            r.mean_distance_sa_g,
            r.mean_distance_s_g,
            r.wall_time_s
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredNet {
    spec: MlpSpec,
    params: Vec<f64>,
}

impl StoredNet {
    fn of(p: &ParamStore) -> Self {
        Self {
            spec: p.spec().clone(),
            params: p.flat().to_vec(),
        }
    }

    fn restore(self, field: &str) -> Result<ParamStore, TrainError> {
        ParamStore::from_flat(&self.spec, self.params)
            .map_err(|e| TrainError::Corrupt(format!("{field}: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredPolicy {
    net: StoredNet,
    action_scale: f64,
    std: f64,
    optimizer: AdamState,
}

/// Everything needed to resume training bit-for-bit: parameters, optimizer
/// moments and the step counter (which also fixes the batch rng stream).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub step: usize,
    pub env_digest: String,
    pub config: TrainConfig,
    mrn: MrnConfig,
    psi: StoredNet,
    phi: StoredNet,
    psi_optimizer: AdamState,
    phi_optimizer: AdamState,
    policy: Option<StoredPolicy>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let v: serde_json::Value =
            serde_json::from_str(text).map_err(|e| TrainError::Corrupt(e.to_string()))?;
        let version = v
            .get("version")
            .and_then(|x| x.as_u64())
            .ok_or_else(|| TrainError::Corrupt("missing version tag".into()))?;
        if version != CHECKPOINT_VERSION as u64 {
            return Err(TrainError::Version {
                found: version as u32,
                expected: CHECKPOINT_VERSION,
            });
        }
        serde_json::from_value(v).map_err(|e| TrainError::Corrupt(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.to_json()).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn critic(&self) -> Result<QuasimetricCritic, TrainError> {
        Ok(QuasimetricCritic::from_parts(
            self.mrn,
            self.psi.clone().restore("psi")?,
            self.phi.clone().restore("phi")?,
        )?)
    }

    pub fn policy(&self) -> Result<Option<GaussianPolicy>, TrainError> {
        self.policy
            .as_ref()
            .map(|p| {
                Ok(GaussianPolicy {
                    net: p.net.clone().restore("policy")?,
                    action_scale: p.action_scale,
                    std: p.std,
                })
            })
            .transpose()
    }
}

/// Loss values from one iteration, measured before its parameter update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub critic_loss: f64,
    pub multistep_loss: f64,
    pub invariance_loss: f64,
    pub policy_loss: f64,
}

pub struct Trainer<'d> {
    config: TrainConfig,
    dataset: &'d Dataset,
    sampler: TransitionSampler<'d>,
    critic: QuasimetricCritic,
    psi_opt: AdamState,
    phi_opt: AdamState,
    policy: Option<(GaussianPolicy, AdamState)>,
    step: usize,
}

impl<'d> Trainer<'d> {
    pub fn new(config: TrainConfig, dataset: &'d Dataset) -> Result<Self, TrainError> {
        config.validate()?;
        let sampler = TransitionSampler::new(&dataset.trajectories)?;
        check_dataset(dataset)?;
        let mut init = rng::stream(config.seed, "init", 0);
        let obs_dim = dataset.env.obs_dim();
        let space = dataset.env.action_space();
        let critic = QuasimetricCritic::new(
            obs_dim,
            dataset.env.act_dim(),
            &config.encoder,
            config.mrn,
            init.random(),
        )?;
        let policy = match space {
            ActionSpace::Discrete(_) => None,
            ActionSpace::Continuous { .. } => {
                let p = GaussianPolicy::new(
                    obs_dim,
                    space,
                    &config.policy,
                    config.policy_loss.policy_std,
                    init.random(),
                )?;
                let opt = AdamState::new(p.net.len(), config.learning_rate);
                Some((p, opt))
            }
        };
        Ok(Self {
            psi_opt: AdamState::new(critic.psi.len(), config.learning_rate),
            phi_opt: AdamState::new(critic.phi.len(), config.learning_rate),
            config,
            dataset,
            sampler,
            critic,
            policy,
            step: 0,
        })
    }

    /// Rebuilds a trainer from a checkpoint. Network shapes and the environment
    /// must match `config` / `dataset`; `total_steps` and logging knobs may differ.
    pub fn resume(
        checkpoint: &Checkpoint,
        config: TrainConfig,
        dataset: &'d Dataset,
    ) -> Result<Self, TrainError> {
        let saved = &checkpoint.config;
        let fields: [(&str, bool); 8] = [
            (
                "encoder.hidden_dims",
                saved.encoder.hidden_dims == config.encoder.hidden_dims,
            ),
            (
                "encoder.layer_norm",
                saved.encoder.layer_norm == config.encoder.layer_norm,
            ),
            (
                "encoder.activation",
                saved.encoder.activation == config.encoder.activation,
            ),
            (
                "policy.hidden_dims",
                saved.policy.hidden_dims == config.policy.hidden_dims,
            ),
            (
                "mrn.components",
                saved.mrn.components == config.mrn.components,
            ),
            ("mrn.dim", saved.mrn.dim == config.mrn.dim),
            ("batch_size", saved.batch_size == config.batch_size),
            ("seed", saved.seed == config.seed),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, same)| !same) {
            return Err(TrainError::Mismatch((*name).into()));
        }
        if checkpoint.env_digest != dataset.env_digest() {
            return Err(TrainError::Mismatch("env_digest".into()));
        }
        let mut t = Self::new(config, dataset)?;
        let critic = checkpoint.critic()?;
        if critic.psi.spec() != t.critic.psi.spec() || critic.phi.spec() != t.critic.phi.spec() {
            return Err(TrainError::Mismatch("encoder".into()));
        }
        t.critic = critic;
        t.psi_opt = checkpoint.psi_optimizer.clone();
        t.phi_opt = checkpoint.phi_optimizer.clone();
        if t.psi_opt.m.len() != t.critic.psi.len() || t.phi_opt.m.len() != t.critic.phi.len() {
            return Err(TrainError::Corrupt("optimizer state length".into()));
        }
        match (&mut t.policy, &checkpoint.policy) {
            (None, None) => {}
            (Some((p, opt)), Some(saved)) => {
                let restored = checkpoint.policy()?.expect("policy present");
                if restored.net.spec() != p.net.spec() {
                    return Err(TrainError::Mismatch("policy".into()));
                }
                *p = restored;
                *opt = saved.optimizer.clone();
            }
            _ => return Err(TrainError::Mismatch("policy".into())),
        }
        t.step = checkpoint.step;
        Ok(t)
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn critic(&self) -> &QuasimetricCritic {
        &self.critic
    }

    pub fn policy(&self) -> Option<&GaussianPolicy> {
        self.policy.as_ref().map(|(p, _)| p)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// The batch used by iteration `step` (0-based).
    pub fn batch_for(&self, step: usize) -> Result<TrainBatch, TrainError> {
        let mut r = rng::stream(self.config.seed, "batch", step as u64);
        Ok(self
            .sampler
            .batch(self.config.batch_size, &self.config.sampler, &mut r)?)
    }

    /// One iteration of the algorithm.
    pub fn step(&mut self) -> Result<StepReport, TrainError> {
        let batch = self.batch_for(self.step)?;
        let step = self.step + 1;
        let non_finite = |what: &str| TrainError::NonFinite {
            step,
            what: what.into(),
        };
        let cfg = &self.config.critic_loss;
        let (critic_loss, multistep, invariance) = match self.config.critic_update {
            CriticUpdate::Fused => {
                let loss = combined_critic_loss(&self.critic, &batch, cfg)
                    .map_err(|e| nonfinite_or(e, step))?;
                if !loss.total.is_finite() {
                    return Err(non_finite("critic loss"));
                }
                adam_step(
                    self.critic.psi.flat_mut(),
                    &loss.grad.psi,
                    &mut self.psi_opt,
                )
                .map_err(|_| non_finite("critic gradient"))?;
                adam_step(
                    self.critic.phi.flat_mut(),
                    &loss.grad.phi,
                    &mut self.phi_opt,
                )
                .map_err(|_| non_finite("critic gradient"))?;
                (loss.total, loss.multistep, loss.invariance)
            }
            CriticUpdate::Separate => {
                let ms = critic_multistep_loss(&self.critic, &batch, cfg)
                    .map_err(|e| nonfinite_or(e, step))?;
                adam_step(self.critic.psi.flat_mut(), &ms.grad.psi, &mut self.psi_opt)
                    .map_err(|_| non_finite("critic gradient"))?;
                adam_step(self.critic.phi.flat_mut(), &ms.grad.phi, &mut self.phi_opt)
                    .map_err(|_| non_finite("critic gradient"))?;
                let inv = if cfg.zeta != 0.0 {
                    let inv = action_invariance_loss(&self.critic, &batch, cfg.invariance_pairing)
                        .map_err(|e| nonfinite_or(e, step))?;
                    let scale = |g: &[f64]| g.iter().map(|v| v * cfg.zeta).collect::<Vec<_>>();
                    adam_step(
                        self.critic.psi.flat_mut(),
                        &scale(&inv.grad.psi),
                        &mut self.psi_opt,
                    )
                    .map_err(|_| non_finite("invariance gradient"))?;
                    adam_step(
                        self.critic.phi.flat_mut(),
                        &scale(&inv.grad.phi),
                        &mut self.phi_opt,
                    )
                    .map_err(|_| non_finite("invariance gradient"))?;
                    inv.value
                } else {
                    0.0
                };
                (ms.value + cfg.zeta * inv, ms.value, inv)
            }
        };
        let mut pl = 0.0;
        if let Some((policy, opt)) = &mut self.policy {
            let loss = policy_loss(policy, &self.critic, &batch, &self.config.policy_loss)
                .map_err(|e| nonfinite_or(e, step))?;
            adam_step(policy.net.flat_mut(), &loss.grad, opt)
                .map_err(|_| non_finite("policy gradient"))?;
            pl = loss.value;
        }
        self.step = step;
        Ok(StepReport {
            step,
            critic_loss,
            multistep_loss: multistep,
            invariance_loss: invariance,
            policy_loss: pl,
        })
    }

    /// Mean `d((s,a),g)` and `d(s,g)` over the matched rows of a batch.
    pub fn batch_distances(&self, batch: &TrainBatch) -> Result<(f64, f64), TrainError> {
        let n = batch.len() as f64;
        let sa = self
            .critic
            .d_stateaction_goal_batch(&batch.s, &batch.a, &batch.g)?;
        let s = self.critic.d_state_goal_batch(&batch.s, &batch.g)?;
        Ok((sa.iter().sum::<f64>() / n, s.iter().sum::<f64>() / n))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            step: self.step,
            env_digest: self.dataset.env_digest(),
            config: self.config.clone(),
            mrn: self.critic.mrn,
            psi: StoredNet::of(&self.critic.psi),
            phi: StoredNet::of(&self.critic.phi),
            psi_optimizer: self.psi_opt.clone(),
            phi_optimizer: self.phi_opt.clone(),
            policy: self.policy.as_ref().map(|(p, opt)| StoredPolicy {
                net: StoredNet::of(&p.net),
                action_scale: p.action_scale,
                std: p.std,
                optimizer: opt.clone(),
            }),
        }
    }

    /// Runs until `total_steps`, emitting a metrics row every `eval_every`
    /// steps and at the final step, and handing a checkpoint to
    /// `on_checkpoint` every `checkpoint_every` steps.
    pub fn run<F>(&mut self, mut on_checkpoint: F) -> Result<TrainOutput, TrainError>
    where
        F: FnMut(&Checkpoint) -> Result<(), TrainError>,
    {
        let start = Instant::now();
        let mut metrics = Vec::new();
        let mut loss_history =
            Vec::with_capacity(self.config.total_steps.saturating_sub(self.step));
        while self.step < self.config.total_steps {
            let next = self.step + 1;
            let emit = next % self.config.eval_every == 0 || next == self.config.total_steps;
            let distances = if emit {
                Some(self.batch_distances(&self.batch_for(self.step)?)?)
            } else {
                None
            };
            let report = self.step()?;
            loss_history.push(report.critic_loss);
            if let Some((sa, s)) = distances {
                metrics.push(MetricsRow {
                    step: report.step,
                    critic_loss: report.critic_loss,
                    invariance_loss: report.invariance_loss,
                    policy_loss: report.policy_loss,
                    mean_distance_sa_g: sa,
                    mean_distance_s_g: s,
                    wall_time_s: if self.config.log_wall_time {
                        start.elapsed().as_secs_f64()
                    } else {
                        0.0
                    },
                });
            }
            if self.config.checkpoint_every > 0 && report.step % self.config.checkpoint_every == 0 {
                on_checkpoint(&self.checkpoint())?;
            }
        }
        Ok(TrainOutput {
            critic: self.critic.clone(),
            policy: self.policy().cloned(),
            metrics,
            loss_history,
            checkpoint: self.checkpoint(),
        })
    }
}

fn nonfinite_or(e: LossError, step: usize) -> TrainError {
    match e {
        LossError::NonFinite(what) => TrainError::NonFinite {
            step,
            what: what.into(),
        },
        other => other.into(),
    }
}

fn check_dataset(dataset: &Dataset) -> Result<(), TrainError> {
    let od = dataset.env.obs_dim();
    let ad = dataset.env.act_dim();
    for (i, t) in dataset.trajectories.iter().enumerate() {
        t.validate()?;
        if t.observations[0].len() != od || t.actions[0].len() != ad {
            return Err(TrainError::Dimension(format!(
                "trajectory {i} has obs/act dims {}/{}, environment expects {od}/{ad}",
                t.observations[0].len(),
                t.actions[0].len()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub critic: QuasimetricCritic,
    pub policy: Option<GaussianPolicy>,
    pub metrics: Vec<MetricsRow>,
    /// combined critic loss of every iteration run
    pub loss_history: Vec<f64>,
    pub checkpoint: Checkpoint,
}

/// Trains from scratch for `config.total_steps` iterations.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutput, TrainError> {
    Trainer::new(config.clone(), dataset)?.run(|_| Ok(()))
}
