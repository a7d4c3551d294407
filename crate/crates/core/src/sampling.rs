//! Geometric future-goal sampling, waypoint sampling and training batch
//! assembly.
//!
//! For a transition at time `t`, the goal offset is `K = 1 + Geom(1 - γ)`
//! (support `{1, 2, ...}`) capped at the end of the trajectory. The waypoint
//! offset `k'` is 1 with probability `p`, otherwise `min(1 + Geom(1 - λ), K)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplingError {
    #[error("trajectory of length {len} has no transition at t = {t}")]
    TrajectoryTooShort { len: usize, t: usize },
    #[error(
        "goal offset K must be >= 1 and stay inside the trajectory (K = {k}, t = {t}, len = {len})"
    )]
    InvalidOffset { k: usize, t: usize, len: usize },
    #[error("dataset has no transitions")]
    EmptyDataset,
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("invalid sampler config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub tag: String,
}

impl Trajectory {
    pub fn new(
        observations: Vec<Vec<f64>>,
        actions: Vec<Vec<f64>>,
        tag: impl Into<String>,
    ) -> Result<Self, SamplingError> {
        let t = Self {
            observations,
            actions,
            tag: tag.into(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), SamplingError> {
        if self.observations.len() < 2 {
            return Err(SamplingError::InvalidTrajectory(format!(
                "needs at least 2 observations, has {}",
                self.observations.len()
            )));
        }
        if self.actions.len() + 1 != self.observations.len() {
            return Err(SamplingError::InvalidTrajectory(format!(
                "{} observations but {} actions",
                self.observations.len(),
                self.actions.len()
            )));
        }
        let od = self.observations[0].len();
        let ad = self.actions[0].len();
        if self.observations.iter().any(|o| o.len() != od)
            || self.actions.iter().any(|a| a.len() != ad)
        {
            return Err(SamplingError::InvalidTrajectory("ragged vectors".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn num_transitions(&self) -> usize {
        self.actions.len()
    }
}

/// How the non-Bernoulli branch of the waypoint offset is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum WaypointDistribution {
    /// `min(1 + Geom(1 - λ), K)`
    #[default]
    Geometric,
    /// uniform on `[1, K]`
    Uniform,
    /// `min(n, K)`
    Fixed(usize),
}

impl fmt::Display for WaypointDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WaypointDistribution::Geometric => f.write_str("geometric"),
            WaypointDistribution::Uniform => f.write_str("uniform"),
            WaypointDistribution::Fixed(n) => write!(f, "fixed:{n}"),
        }
    }
}

impl FromStr for WaypointDistribution {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "geometric" => Ok(Self::Geometric),
            "uniform" => Ok(Self::Uniform),
            _ => {
                let n = s
                    .strip_prefix("fixed:")
                    .and_then(|n| n.parse::<usize>().ok())
                    .filter(|&n| n >= 1)
                    .ok_or_else(|| format!("expected geometric|uniform|fixed:N, got `{s}`"))?;
                Ok(Self::Fixed(n))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub p: f64,
    pub waypoint: WaypointDistribution,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            gamma: 0.995,
            lambda: 0.95,
            p: 0.2,
            waypoint: WaypointDistribution::Geometric,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplingError> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(SamplingError::Config(format!(
                "gamma must lie in (0,1), got {}",
                self.gamma
            )));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(SamplingError::Config(format!(
                "lambda must lie in (0,1), got {}",
                self.lambda
            )));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(SamplingError::Config(format!(
                "p must lie in [0,1], got {}",
                self.p
            )));
        }
        Ok(())
    }
}

/// `1 + Geom(1 - discount)`, i.e. `P(k) = (1 - discount) discount^(k-1)`.
fn geometric_offset<R: Rng + ?Sized>(discount: f64, rng: &mut R) -> usize {
    let dist = Geometric::new(1.0 - discount).expect("success probability in (0, 1]");
    let failures = dist.sample(rng);
    usize::try_from(failures)
        .unwrap_or(usize::MAX)
        .saturating_add(1)
}

/// Draws the future goal `s_{t+K}` with `K ~ Geom(1 - γ)` capped at the last
/// index.
pub fn sample_future_goal<'a, R: Rng + ?Sized>(
    traj: &'a Trajectory,
    t: usize,
    gamma: f64,
    rng: &mut R,
) -> Result<(&'a [f64], usize), SamplingError> {
    let len = traj.len();
    if t + 1 >= len {
        return Err(SamplingError::TrajectoryTooShort { len, t });
    }
    let k = geometric_offset(gamma, rng).min(len - 1 - t);
    Ok((&traj.observations[t + k], k))
}

/// Offset `k' ∈ [1, K]` of the waypoint.
pub fn sample_waypoint_offset<R: Rng + ?Sized>(
    k_goal: usize,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> usize {
    debug_assert!(k_goal >= 1);
    if rng.random::<f64>() < cfg.p {
        return 1;
    }
    match cfg.waypoint {
        WaypointDistribution::Geometric => geometric_offset(cfg.lambda, rng).min(k_goal),
        WaypointDistribution::Uniform => rng.random_range(1..=k_goal),
        WaypointDistribution::Fixed(n) => n.min(k_goal),
    }
}

/// Draws the waypoint `s_{t+k'}` for a goal at offset `K` using the
/// geometric/Bernoulli mixture.
pub fn sample_waypoint<'a, R: Rng + ?Sized>(
    traj: &'a Trajectory,
    t: usize,
    k_goal: usize,
    lambda: f64,
    p: f64,
    rng: &mut R,
) -> Result<(&'a [f64], usize), SamplingError> {
    let len = traj.len();
    if k_goal < 1 || t + k_goal >= len {
        return Err(SamplingError::InvalidOffset { k: k_goal, t, len });
    }
    let cfg = SamplerConfig {
        lambda,
        p,
        ..SamplerConfig::default()
    };
    let k = sample_waypoint_offset(k_goal, &cfg, rng);
    Ok((&traj.observations[t + k], k))
}

/// One sampled training batch; row `i` comes from trajectory `traj_index[i]`
/// at time `time_index[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub s: Matrix,
    pub a: Matrix,
    pub s_next: Matrix,
    pub s_w: Matrix,
    pub g: Matrix,
    pub k_prime: Vec<usize>,
    pub k_goal: Vec<usize>,
    pub traj_index: Vec<usize>,
    pub time_index: Vec<usize>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.s.rows
    }

    pub fn is_empty(&self) -> bool {
        self.s.rows == 0
    }
}

/// Uniform sampler over all transitions of a trajectory set.
#[derive(Debug, Clone)]
pub struct TransitionSampler<'a> {
    trajectories: &'a [Trajectory],
    /// cumulative transition counts, `cumulative[i]` = transitions before trajectory i+1
    cumulative: Vec<usize>,
}

impl<'a> TransitionSampler<'a> {
    pub fn new(trajectories: &'a [Trajectory]) -> Result<Self, SamplingError> {
        let mut total = 0;
        let mut cumulative = Vec::with_capacity(trajectories.len());
        for t in trajectories {
            total += t.num_transitions();
            cumulative.push(total);
        }
        if total == 0 {
            return Err(SamplingError::EmptyDataset);
        }
        Ok(Self {
            trajectories,
            cumulative,
        })
    }

    pub fn num_transitions(&self) -> usize {
        *self.cumulative.last().unwrap_or(&0)
    }

    /// Maps a global transition index to `(trajectory, t)`.
    pub fn locate(&self, index: usize) -> (usize, usize) {
        let traj = self.cumulative.partition_point(|&c| c <= index);
        let before = if traj == 0 {
            0
        } else {
            self.cumulative[traj - 1]
        };
        (traj, index - before)
    }

    pub fn batch<R: Rng + ?Sized>(
        &self,
        size: usize,
        cfg: &SamplerConfig,
        rng: &mut R,
    ) -> Result<TrainBatch, SamplingError> {
        cfg.validate()?;
        if size == 0 {
            return Err(SamplingError::Config("batch size must be >= 1".into()));
        }
        let first = &self.trajectories[self.locate(0).0];
        let (od, ad) = (first.observations[0].len(), first.actions[0].len());
        let mut s = Vec::with_capacity(size * od);
        let mut a = Vec::with_capacity(size * ad);
        let mut s_next = Vec::with_capacity(size * od);
        let mut s_w = Vec::with_capacity(size * od);
        let mut g = Vec::with_capacity(size * od);
        let mut k_prime = Vec::with_capacity(size);
        let mut k_goal = Vec::with_capacity(size);
        let mut traj_index = Vec::with_capacity(size);
        let mut time_index = Vec::with_capacity(size);
        for _ in 0..size {
            let (ti, t) = self.locate(rng.random_range(0..self.num_transitions()));
            let traj = &self.trajectories[ti];
            let (goal, k) = sample_future_goal(traj, t, cfg.gamma, rng)?;
            let kp = sample_waypoint_offset(k, cfg, rng);
            s.extend_from_slice(&traj.observations[t]);
            a.extend_from_slice(&traj.actions[t]);
            s_next.extend_from_slice(&traj.observations[t + 1]);
            s_w.extend_from_slice(&traj.observations[t + kp]);
            g.extend_from_slice(goal);
            k_prime.push(kp);
            k_goal.push(k);
            traj_index.push(ti);
            time_index.push(t);
        }
        let m = |data: Vec<f64>, cols: usize| Matrix {
            rows: size,
            cols,
            data,
        };
        Ok(TrainBatch {
            s: m(s, od),
            a: m(a, ad),
            s_next: m(s_next, od),
            s_w: m(s_w, od),
            g: m(g, od),
            k_prime,
            k_goal,
            traj_index,
            time_index,
        })
    }
}

/// Samples `size` rows uniformly over all transitions in `trajectories`.
pub fn assemble_batch<R: Rng + ?Sized>(
    trajectories: &[Trajectory],
    size: usize,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<TrainBatch, SamplingError> {
    TransitionSampler::new(trajectories)?.batch(size, cfg, rng)
}
