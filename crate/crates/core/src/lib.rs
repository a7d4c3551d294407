//! Multistep quasimetric estimation (MQE) for offline goal-conditioned RL on
//! toy mazes: an MRN quasimetric critic trained with multistep LINEX backups
//! and an action-invariance penalty, DDPG+BC policy extraction, and exact
//! shortest-path oracles to check what was learned.

pub mod config;
pub mod env;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod par;
pub mod quasimetric;
pub mod rng;
pub mod sampling;
pub mod selftest;
pub mod trainer;

pub use env::{Cell, Dataset, Env, GridAction, GridMaze, ObsEncoding, PointMaze};
pub use nn::{Matrix, MlpSpec, NetShape, ParamStore};
pub use quasimetric::{MrnConfig, QuasimetricCritic};
pub use sampling::{SamplerConfig, TrainBatch, Trajectory};
pub use trainer::{train, TrainConfig};
