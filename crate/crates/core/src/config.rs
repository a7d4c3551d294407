//! Flat `key = value` run configuration with dotted keys.
//!
//! Every training, environment, dataset and evaluation knob is addressable by
//! one key; unknown keys are rejected. `entries` echoes the effective values in
//! a form that parses back to the same configuration.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::env::{
    BehaviorPolicy, Cell, Env, EnvError, GeneratorConfig, GridMaze, ObsEncoding, PointMaze,
};
use crate::eval::{maze_diameter, EvalConfig, EvalError, EvalTask, State};
use crate::nn::Activation;
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {msg}")]
    InvalidValue {
        key: String,
        value: String,
        msg: String,
    },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("cannot read {path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    Grid,
    Point,
}

impl FromStr for EnvKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "grid" => Ok(Self::Grid),
            "point" => Ok(Self::Point),
            _ => Err(format!("expected grid|point, got `{s}`")),
        }
    }
}

impl std::fmt::Display for EnvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Grid => "grid",
            Self::Point => "point",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSettings {
    pub kind: EnvKind,
    /// one of the named layouts
    pub layout: String,
    pub encoding: ObsEncoding,
    pub max_step: f64,
    pub goal_radius: f64,
}

impl Default for EnvSettings {
    fn default() -> Self {
        Self {
            kind: EnvKind::Grid,
            layout: "maze8".into(),
            encoding: ObsEncoding::Coordinates,
            max_step: 0.5,
            goal_radius: 0.25,
        }
    }
}

impl EnvSettings {
    pub fn build(&self) -> Result<Env, EnvError> {
        let maze = GridMaze::named(&self.layout, self.encoding)?;
        Ok(match self.kind {
            EnvKind::Grid => Env::Grid(maze),
            EnvKind::Point => Env::Point(PointMaze::new(maze, self.max_step, self.goal_radius)?),
        })
    }
}

/// Evaluation task endpoints as `start>goal` cell pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSpec {
    pub start: Cell,
    pub goal: Cell,
}

impl FromStr for TaskSpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s
            .split_once('>')
            .ok_or_else(|| format!("expected x,y>x,y, got `{s}`"))?;
        Ok(Self {
            start: a.trim().parse()?,
            goal: b.trim().parse()?,
        })
    }
}

impl std::fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}>{}", self.start, self.goal)
    }
}

/// Built-in long-range tasks for the named layouts.
pub fn default_tasks(layout: &str) -> Vec<TaskSpec> {
    let t = |a: (i64, i64), b: (i64, i64)| TaskSpec {
        start: Cell::new(a.0, a.1),
        goal: Cell::new(b.0, b.1),
    };
    match layout {
        "maze12" => vec![
            t((0, 0), (2, 10)),
            t((2, 10), (11, 0)),
            t((11, 2), (5, 2)),
            t((0, 11), (0, 0)),
            t((5, 2), (11, 2)),
        ],
        _ => vec![t((0, 0), (7, 7)), t((7, 0), (0, 7)), t((7, 7), (2, 2))],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub episodes: usize,
    pub jitter: f64,
    /// 0 selects four times the maze diameter
    pub horizon: usize,
    /// empty selects the layout's built-in tasks
    pub tasks: Vec<TaskSpec>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            episodes: e.episodes_per_task,
            jitter: e.start_jitter,
            horizon: 0,
            tasks: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub env: EnvSettings,
    /// `data.seed` falls back to `seed` when unset
    pub data: GeneratorConfig,
    pub data_seed: Option<u64>,
    pub eval: EvalSettings,
    pub heatmap_goal: Option<Cell>,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
        msg: e.to_string(),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str, sep: char) -> Result<Vec<T>, ConfigError>
where
    T::Err: Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(sep).map(|v| parse(key, v.trim())).collect()
}

fn join<T: Display>(items: &[T], sep: &str) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(sep)
}

/// Every recognised key, in echo order.
pub const KEYS: &[&str] = &[
    "seed",
    "batch_size",
    "total_steps",
    "learning_rate",
    "eval_every",
    "checkpoint_every",
    "critic_update",
    "log_wall_time",
    "sampler.gamma",
    "sampler.lambda",
    "sampler.p",
    "sampler.waypoint",
    "critic_loss.gamma",
    "critic_loss.zeta",
    "critic_loss.divergence_clip",
    "critic_loss.invariance_pairing",
    "policy_loss.alpha",
    "policy_loss.normalize_ddpg_term",
    "policy_loss.policy_std",
    "encoder.hidden_dims",
    "encoder.layer_norm",
    "encoder.activation",
    "policy.hidden_dims",
    "policy.layer_norm",
    "policy.activation",
    "mrn.components",
    "mrn.dim",
    "env.kind",
    "env.layout",
    "env.encoding",
    "env.max_step",
    "env.goal_radius",
    "data.policy",
    "data.n_traj",
    "data.max_len",
    "data.epsilon",
    "data.seed",
    "eval.episodes",
    "eval.jitter",
    "eval.horizon",
    "eval.tasks",
    "heatmap.goal",
];

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        let t = &mut self.train;
        match key {
            "seed" => t.seed = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "total_steps" => t.total_steps = parse(key, v)?,
            "learning_rate" => t.learning_rate = parse(key, v)?,
            "eval_every" => t.eval_every = parse(key, v)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "critic_update" => t.critic_update = parse(key, v)?,
            "log_wall_time" => t.log_wall_time = parse(key, v)?,
            "sampler.gamma" => t.sampler.gamma = parse(key, v)?,
            "sampler.lambda" => t.sampler.lambda = parse(key, v)?,
            "sampler.p" => t.sampler.p = parse(key, v)?,
            "sampler.waypoint" => t.sampler.waypoint = parse(key, v)?,
            "critic_loss.gamma" => t.critic_loss.gamma = parse(key, v)?,
            "critic_loss.zeta" => t.critic_loss.zeta = parse(key, v)?,
            "critic_loss.divergence_clip" => t.critic_loss.divergence_clip = parse(key, v)?,
            "critic_loss.invariance_pairing" => t.critic_loss.invariance_pairing = parse(key, v)?,
            "policy_loss.alpha" => t.policy_loss.alpha = parse(key, v)?,
            "policy_loss.normalize_ddpg_term" => t.policy_loss.normalize_ddpg_term = parse(key, v)?,
            "policy_loss.policy_std" => t.policy_loss.policy_std = parse(key, v)?,
            "encoder.hidden_dims" => t.encoder.hidden_dims = parse_list(key, v, ',')?,
            "encoder.layer_norm" => t.encoder.layer_norm = parse(key, v)?,
            "encoder.activation" => t.encoder.activation = parse::<Activation>(key, v)?,
            "policy.hidden_dims" => t.policy.hidden_dims = parse_list(key, v, ',')?,
            "policy.layer_norm" => t.policy.layer_norm = parse(key, v)?,
            "policy.activation" => t.policy.activation = parse::<Activation>(key, v)?,
            "mrn.components" => t.mrn.components = parse(key, v)?,
            "mrn.dim" => t.mrn.dim = parse(key, v)?,
            "env.kind" => self.env.kind = parse(key, v)?,
            "env.layout" => {
                GridMaze::named(v, ObsEncoding::Coordinates).map_err(|e| {
                    ConfigError::InvalidValue {
                        key: key.into(),
                        value: v.into(),
                        msg: e.to_string(),
                    }
                })?;
                self.env.layout = v.into();
            }
            "env.encoding" => self.env.encoding = parse(key, v)?,
            "env.max_step" => self.env.max_step = parse(key, v)?,
            "env.goal_radius" => self.env.goal_radius = parse(key, v)?,
            "data.policy" => self.data.policy = parse::<BehaviorPolicy>(key, v)?,
            "data.n_traj" => self.data.n_traj = parse(key, v)?,
            "data.max_len" => self.data.max_len = parse(key, v)?,
            "data.epsilon" => self.data.epsilon = parse(key, v)?,
            "data.seed" => {
                self.data_seed = if v.is_empty() {
                    None
                } else {
                    Some(parse(key, v)?)
                };
            }
            "eval.episodes" => self.eval.episodes = parse(key, v)?,
            "eval.jitter" => self.eval.jitter = parse(key, v)?,
            "eval.horizon" => self.eval.horizon = parse(key, v)?,
            "eval.tasks" => self.eval.tasks = parse_list(key, v, ';')?,
            "heatmap.goal" => {
                self.heatmap_goal = if v.is_empty() {
                    None
                } else {
                    Some(parse(key, v)?)
                };
            }
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        Some(match key {
            "seed" => t.seed.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "total_steps" => t.total_steps.to_string(),
            "learning_rate" => t.learning_rate.to_string(),
            "eval_every" => t.eval_every.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            "critic_update" => t.critic_update.to_string(),
            "log_wall_time" => t.log_wall_time.to_string(),
            "sampler.gamma" => t.sampler.gamma.to_string(),
            "sampler.lambda" => t.sampler.lambda.to_string(),
            "sampler.p" => t.sampler.p.to_string(),
            "sampler.waypoint" => t.sampler.waypoint.to_string(),
            "critic_loss.gamma" => t.critic_loss.gamma.to_string(),
            "critic_loss.zeta" => t.critic_loss.zeta.to_string(),
            "critic_loss.divergence_clip" => t.critic_loss.divergence_clip.to_string(),
            "critic_loss.invariance_pairing" => t.critic_loss.invariance_pairing.to_string(),
            "policy_loss.alpha" => t.policy_loss.alpha.to_string(),
            "policy_loss.normalize_ddpg_term" => t.policy_loss.normalize_ddpg_term.to_string(),
            "policy_loss.policy_std" => t.policy_loss.policy_std.to_string(),
            "encoder.hidden_dims" => join(&t.encoder.hidden_dims, ","),
            "encoder.layer_norm" => t.encoder.layer_norm.to_string(),
            "encoder.activation" => t.encoder.activation.to_string(),
            "policy.hidden_dims" => join(&t.policy.hidden_dims, ","),
            "policy.layer_norm" => t.policy.layer_norm.to_string(),
            "policy.activation" => t.policy.activation.to_string(),
            "mrn.components" => t.mrn.components.to_string(),
            "mrn.dim" => t.mrn.dim.to_string(),
            "env.kind" => self.env.kind.to_string(),
            "env.layout" => self.env.layout.clone(),
            "env.encoding" => self.env.encoding.to_string(),
            "env.max_step" => self.env.max_step.to_string(),
            "env.goal_radius" => self.env.goal_radius.to_string(),
            "data.policy" => self.data.policy.to_string(),
            "data.n_traj" => self.data.n_traj.to_string(),
            "data.max_len" => self.data.max_len.to_string(),
            "data.epsilon" => self.data.epsilon.to_string(),
            "data.seed" => self.data_seed.map(|s| s.to_string()).unwrap_or_default(),
            "eval.episodes" => self.eval.episodes.to_string(),
            "eval.jitter" => self.eval.jitter.to_string(),
            "eval.horizon" => self.eval.horizon.to_string(),
            "eval.tasks" => join(&self.eval.tasks, ";"),
            "heatmap.goal" => self.heatmap_goal.map(|c| c.to_string()).unwrap_or_default(),
            _ => return None,
        })
    }

    /// Every key with its effective value.
    pub fn entries(&self) -> Vec<(String, String)> {
        KEYS.iter()
            .map(|k| (k.to_string(), self.get(k).expect("listed keys resolve")))
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Parses `key = value` lines; `#` starts a comment, blank lines are
    /// skipped, a key may appear once.
    pub fn parse_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: format!("expected key = value, got `{line}`"),
            })?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    msg: format!("duplicate key `{k}`"),
                });
            }
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::parse_text(&text)
    }

    /// Applies `KEY=VALUE` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), ConfigError> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::InvalidValue {
                key: o.into(),
                value: String::new(),
                msg: "expected KEY=VALUE".into(),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            seed: self.data_seed.unwrap_or(self.train.seed),
            ..self.data.clone()
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            episodes_per_task: self.eval.episodes,
            start_jitter: self.eval.jitter,
            seed: self.train.seed,
        }
    }

    /// Tasks placed in `env`, with oracle distances and the default horizon
    /// resolved.
    pub fn tasks(&self, env: &Env) -> Result<Vec<EvalTask>, EvalError> {
        let specs = if self.eval.tasks.is_empty() {
            default_tasks(&self.env.layout)
        } else {
            self.eval.tasks.clone()
        };
        let maze = env.layout();
        let horizon = if self.eval.horizon == 0 {
            4 * maze_diameter(maze) as usize
        } else {
            self.eval.horizon
        };
        specs
            .iter()
            .map(|t| {
                for c in [t.start, t.goal] {
                    if !maze.is_free(c) {
                        return Err(EvalError::GoalInWall(c));
                    }
                }
                let mut task = EvalTask::grid(maze, t.start, t.goal, horizon)?;
                if let Env::Point(_) = env {
                    task.start = State::Point(PointMaze::center(t.start));
                    task.goal = State::Point(PointMaze::center(t.goal));
                }
                Ok(task)
            })
            .collect()
    }
}
