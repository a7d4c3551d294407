//! Toy maze environments, stitch-style offline dataset generation and the
//! line-delimited dataset file format.
//!
//! Grid cells are `(x, y)` with row `y = 0` at the top. The point maze reuses the
//! same wall layout with each cell a unit square `[x, x+1) × [y, y+1)`.

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::par::{self, Execution};
use crate::rng;
use crate::sampling::Trajectory;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Distance kept between a clipped point and the wall face it ran into.
pub const WALL_MARGIN: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid maze: {0}")]
    InvalidMaze(String),
    #[error("cell ({0}, {1}) is not free")]
    NotFree(i64, i64),
    #[error("unknown layout `{0}`")]
    UnknownLayout(String),
    #[error("invalid generator config: {0}")]
    Generator(String),
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(
        "environment checksum mismatch: header says {expected}, environment hashes to {found}"
    )]
    Checksum { expected: String, found: String },
    #[error("unsupported dataset format version {0}")]
    Version(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ActionSpace {
    Discrete(usize),
    Continuous { dim: usize, bound: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObsEncoding {
    /// `(x / (w-1), y / (h-1))`
    #[default]
    Coordinates,
    /// one slot per cell, row-major
    OneHot,
}

impl std::str::FromStr for ObsEncoding {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "coordinates" => Ok(Self::Coordinates),
            "onehot" => Ok(Self::OneHot),
            _ => Err(format!("expected coordinates|onehot, got `{s}`")),
        }
    }
}

impl fmt::Display for ObsEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Coordinates => "coordinates",
            Self::OneHot => "onehot",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: i64,
    pub y: i64,
}

impl Cell {
    pub const fn new(x: i64, y: i64) -> Self {
        Self { x, y }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.x, self.y)
    }
}

impl std::str::FromStr for Cell {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (x, y) = s
            .split_once(',')
            .ok_or_else(|| format!("expected x,y, got `{s}`"))?;
        let p = |v: &str| {
            v.trim()
                .parse::<i64>()
                .map_err(|e| format!("bad coordinate `{v}`: {e}"))
        };
        Ok(Cell::new(p(x)?, p(y)?))
    }
}

/// Grid actions in tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GridAction {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl GridAction {
    pub const ALL: [GridAction; 5] = [Self::Up, Self::Down, Self::Left, Self::Right, Self::Stay];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    fn delta(self) -> (i64, i64) {
        match self {
            Self::Up => (0, -1),
            Self::Down => (0, 1),
            Self::Left => (-1, 0),
            Self::Right => (1, 0),
            Self::Stay => (0, 0),
        }
    }

    /// One-hot 5-vector.
    pub fn encode(self) -> Vec<f64> {
        let mut v = vec![0.0; 5];
        v[self.index()] = 1.0;
        v
    }

    /// Inverse of [`encode`](Self::encode); the largest entry wins, lowest index on ties.
    pub fn decode(v: &[f64]) -> Option<Self> {
        if v.len() != 5 {
            return None;
        }
        let mut best = 0;
        for (i, &x) in v.iter().enumerate() {
            if x > v[best] {
                best = i;
            }
        }
        Self::from_index(best)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GridMazeRepr", into = "GridMazeRepr")]
pub struct GridMaze {
    width: usize,
    height: usize,
    walls: Vec<bool>,
    encoding: ObsEncoding,
}

#[derive(Serialize, Deserialize)]
struct GridMazeRepr {
    layout: Vec<String>,
    encoding: ObsEncoding,
}

impl TryFrom<GridMazeRepr> for GridMaze {
    type Error = EnvError;
    fn try_from(r: GridMazeRepr) -> Result<Self, Self::Error> {
        GridMaze::from_ascii(&r.layout, r.encoding)
    }
}

impl From<GridMaze> for GridMazeRepr {
    fn from(m: GridMaze) -> Self {
        GridMazeRepr {
            layout: m.ascii_rows(),
            encoding: m.encoding,
        }
    }
}

const OPEN8: [&str; 8] = ["........"; 8];

const MAZE8: [&str; 8] = [
    "........", ".##.###.", ".#....#.", ".#.##.#.", "...#..#.", "##.#.##.", "...#....", ".#...##.",
];

const MAZE12: [&str; 12] = [
    "............",
    ".##########.",
    ".#......#...",
    ".#.####.#.##",
    ".#.#....#...",
    ".#.#.######.",
    "...#.#......",
    "####.#.####.",
    "...........#",
    ".#########.#",
    ".#.........#",
    "...#########",
];

impl GridMaze {
    /// Parses rows of `.` (free) and `#` (wall).
    pub fn from_ascii<S: AsRef<str>>(rows: &[S], encoding: ObsEncoding) -> Result<Self, EnvError> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.as_ref().chars().count());
        if width == 0 || height == 0 {
            return Err(EnvError::InvalidMaze("empty layout".into()));
        }
        let mut walls = Vec::with_capacity(width * height);
        for (y, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.chars().count() != width {
                return Err(EnvError::InvalidMaze(format!(
                    "row {y} has a different width"
                )));
            }
            for c in r.chars() {
                walls.push(match c {
                    '.' => false,
                    '#' => true,
                    other => {
                        return Err(EnvError::InvalidMaze(format!(
                            "unexpected character `{other}`"
                        )))
                    }
                });
            }
        }
        let maze = Self {
            width,
            height,
            walls,
            encoding,
        };
        maze.validate()?;
        Ok(maze)
    }

    /// Built-in layouts: `open8`, `maze8`, `maze12`.
    pub fn named(name: &str, encoding: ObsEncoding) -> Result<Self, EnvError> {
        match name {
            "open8" => Self::from_ascii(&OPEN8, encoding),
            "maze8" => Self::from_ascii(&MAZE8, encoding),
            "maze12" => Self::from_ascii(&MAZE12, encoding),
            other => Err(EnvError::UnknownLayout(other.into())),
        }
    }

    fn validate(&self) -> Result<(), EnvError> {
        let free = self.free_cells();
        let Some(&first) = free.first() else {
            return Err(EnvError::InvalidMaze("no free cells".into()));
        };
        let reached = self
            .neighbor_distances(first)
            .iter()
            .filter(|d| d.is_some())
            .count();
        if reached != free.len() {
            return Err(EnvError::InvalidMaze("free cells are not connected".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn encoding(&self) -> ObsEncoding {
        self.encoding
    }

    pub fn with_encoding(mut self, encoding: ObsEncoding) -> Self {
        self.encoding = encoding;
        self
    }

    pub fn ascii_rows(&self) -> Vec<String> {
        (0..self.height)
            .map(|y| {
                (0..self.width)
                    .map(|x| {
                        if self.walls[y * self.width + x] {
                            '#'
                        } else {
                            '.'
                        }
                    })
                    .collect()
            })
            .collect()
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.x >= 0 && c.y >= 0 && (c.x as usize) < self.width && (c.y as usize) < self.height
    }

    pub fn is_free(&self, c: Cell) -> bool {
        self.in_bounds(c) && !self.walls[self.index(c)]
    }

    pub fn index(&self, c: Cell) -> usize {
        c.y as usize * self.width + c.x as usize
    }

    pub fn cell_at(&self, index: usize) -> Cell {
        Cell::new((index % self.width) as i64, (index / self.width) as i64)
    }

    /// Free cells in row-major order.
    pub fn free_cells(&self) -> Vec<Cell> {
        (0..self.width * self.height)
            .filter(|&i| !self.walls[i])
            .map(|i| self.cell_at(i))
            .collect()
    }

    /// One move; blocked moves leave the agent in place.
    pub fn step(&self, c: Cell, action: GridAction) -> Result<Cell, EnvError> {
        if !self.is_free(c) {
            return Err(EnvError::NotFree(c.x, c.y));
        }
        let (dx, dy) = action.delta();
        let next = Cell::new(c.x + dx, c.y + dy);
        Ok(if self.is_free(next) { next } else { c })
    }

    pub fn obs_dim(&self) -> usize {
        match self.encoding {
            ObsEncoding::Coordinates => 2,
            ObsEncoding::OneHot => self.width * self.height,
        }
    }

    pub fn observe(&self, c: Cell) -> Vec<f64> {
        match self.encoding {
            ObsEncoding::Coordinates => vec![
                c.x as f64 / (self.width.max(2) - 1) as f64,
                c.y as f64 / (self.height.max(2) - 1) as f64,
            ],
            ObsEncoding::OneHot => {
                let mut v = vec![0.0; self.width * self.height];
                v[self.index(c)] = 1.0;
                v
            }
        }
    }

    pub fn decode(&self, obs: &[f64]) -> Option<Cell> {
        let c = match self.encoding {
            ObsEncoding::Coordinates => {
                let [ox, oy] = obs else { return None };
                Cell::new(
                    (ox * (self.width.max(2) - 1) as f64).round() as i64,
                    (oy * (self.height.max(2) - 1) as f64).round() as i64,
                )
            }
            ObsEncoding::OneHot => {
                if obs.len() != self.width * self.height {
                    return None;
                }
                self.cell_at(obs.iter().position(|&v| v == 1.0)?)
            }
        };
        self.is_free(c).then_some(c)
    }

    /// Shortest move counts from `from` to every cell over 4-neighbour moves,
    /// indexed like the wall grid. Movement is symmetric, so these are also
    /// distances *to* `from`.
    pub(crate) fn neighbor_distances(&self, from: Cell) -> Vec<Option<u32>> {
        let mut dist = vec![None; self.width * self.height];
        if !self.is_free(from) {
            return dist;
        }
        dist[self.index(from)] = Some(0);
        let mut queue = VecDeque::from([from]);
        while let Some(c) = queue.pop_front() {
            let d = dist[self.index(c)].unwrap_or(0);
            for a in &GridAction::ALL[..4] {
                let (dx, dy) = a.delta();
                let n = Cell::new(c.x + dx, c.y + dy);
                if self.is_free(n) && dist[self.index(n)].is_none() {
                    dist[self.index(n)] = Some(d + 1);
                    queue.push_back(n);
                }
            }
        }
        dist
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMaze {
    pub layout: GridMaze,
    pub max_step_size: f64,
    pub goal_radius: f64,
}

impl PointMaze {
    pub fn new(layout: GridMaze, max_step_size: f64, goal_radius: f64) -> Result<Self, EnvError> {
        if !(max_step_size > 0.0 && max_step_size < 1.0) {
            return Err(EnvError::InvalidMaze(
                "max_step_size must lie in (0, 1)".into(),
            ));
        }
        if goal_radius <= 0.0 {
            return Err(EnvError::InvalidMaze("goal_radius must be positive".into()));
        }
        Ok(Self {
            layout,
            max_step_size,
            goal_radius,
        })
    }

    pub fn cell_of(&self, pos: [f64; 2]) -> Cell {
        Cell::new(pos[0].floor() as i64, pos[1].floor() as i64)
    }

    pub fn is_free(&self, pos: [f64; 2]) -> bool {
        pos.iter().all(|v| v.is_finite()) && self.layout.is_free(self.cell_of(pos))
    }

    pub fn center(c: Cell) -> [f64; 2] {
        [c.x as f64 + 0.5, c.y as f64 + 0.5]
    }

    /// Moves along x, then along y, stopping `WALL_MARGIN` short of any wall
    /// face or boundary. Actions are clamped to `±max_step_size`.
    pub fn step(&self, pos: [f64; 2], action: &[f64]) -> [f64; 2] {
        let m = self.max_step_size;
        let ax = action.first().copied().unwrap_or(0.0).clamp(-m, m);
        let ay = action.get(1).copied().unwrap_or(0.0).clamp(-m, m);
        let x = self.slide(pos, 0, ax);
        [x, self.slide([x, pos[1]], 1, ay)]
    }

    fn slide(&self, pos: [f64; 2], axis: usize, delta: f64) -> f64 {
        let mut target = pos;
        target[axis] += delta;
        if delta == 0.0 || self.is_free(target) {
            return target[axis];
        }
        // |delta| < 1, so at most one boundary is crossed
        let face = if delta > 0.0 {
            pos[axis].floor() + 1.0 - WALL_MARGIN
        } else {
            pos[axis].floor() + WALL_MARGIN
        };
        if delta > 0.0 {
            face.max(pos[axis]).min(target[axis])
        } else {
            face.min(pos[axis]).max(target[axis])
        }
    }

    pub fn observe(&self, pos: [f64; 2]) -> Vec<f64> {
        vec![
            pos[0] / self.layout.width as f64,
            pos[1] / self.layout.height as f64,
        ]
    }

    pub fn decode(&self, obs: &[f64]) -> Option<[f64; 2]> {
        let [ox, oy] = obs else { return None };
        Some([
            ox * self.layout.width as f64,
            oy * self.layout.height as f64,
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Env {
    Grid(GridMaze),
    Point(PointMaze),
}

impl Env {
    pub fn obs_dim(&self) -> usize {
        match self {
            Env::Grid(g) => g.obs_dim(),
            Env::Point(_) => 2,
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        match self {
            Env::Grid(_) => ActionSpace::Discrete(5),
            Env::Point(p) => ActionSpace::Continuous {
                dim: 2,
                bound: p.max_step_size,
            },
        }
    }

    pub fn act_dim(&self) -> usize {
        match self.action_space() {
            ActionSpace::Discrete(n) => n,
            ActionSpace::Continuous { dim, .. } => dim,
        }
    }

    pub fn layout(&self) -> &GridMaze {
        match self {
            Env::Grid(g) => g,
            Env::Point(p) => &p.layout,
        }
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("environment serializes")
    }

    /// SHA-256 of the canonical JSON description, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// Whether `(obs, act) -> next` is reproduced by the step function.
    pub fn transition_consistent(&self, obs: &[f64], act: &[f64], next: &[f64]) -> bool {
        match self {
            Env::Grid(g) => {
                let (Some(c), Some(a), Some(n)) =
                    (g.decode(obs), GridAction::decode(act), g.decode(next))
                else {
                    return false;
                };
                g.step(c, a).map(|s| s == n).unwrap_or(false) && g.observe(n) == next
            }
            Env::Point(p) => {
                let (Some(pos), Some(n)) = (p.decode(obs), p.decode(next)) else {
                    return false;
                };
                let sim = p.step(pos, act);
                p.is_free(sim) && (sim[0] - n[0]).abs() <= 1e-9 && (sim[1] - n[1]).abs() <= 1e-9
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorPolicy {
    RandomWalk,
    NoisyLocalExpert,
}

impl std::str::FromStr for BehaviorPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random_walk" => Ok(Self::RandomWalk),
            "noisy_local_expert" => Ok(Self::NoisyLocalExpert),
            _ => Err(format!(
                "expected random_walk|noisy_local_expert, got `{s}`"
            )),
        }
    }
}

impl fmt::Display for BehaviorPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RandomWalk => "random_walk",
            Self::NoisyLocalExpert => "noisy_local_expert",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub policy: BehaviorPolicy,
    pub n_traj: usize,
    /// observations per trajectory
    pub max_len: usize,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            policy: BehaviorPolicy::NoisyLocalExpert,
            n_traj: 2000,
            max_len: 8,
            epsilon: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub env: Env,
    pub generator: GeneratorConfig,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn env_digest(&self) -> String {
        self.env.digest()
    }

    /// First `(trajectory, t)` whose stored transition the step function does
    /// not reproduce, if any.
    pub fn first_inconsistency(&self) -> Option<(usize, usize)> {
        self.trajectories.iter().enumerate().find_map(|(i, tr)| {
            (0..tr.num_transitions())
                .find(|&t| {
                    !self.env.transition_consistent(
                        &tr.observations[t],
                        &tr.actions[t],
                        &tr.observations[t + 1],
                    )
                })
                .map(|t| (i, t))
        })
    }

    pub fn num_transitions(&self) -> usize {
        self.trajectories.iter().map(|t| t.num_transitions()).sum()
    }
}

/// Short behaviour segments starting at uniformly random free states, each with
/// exactly `max_len` observations. `noisy_local_expert` walks shortest paths to
/// random waypoints at most `max_len - 1` moves away and takes a uniformly
/// random action with probability `epsilon`.
pub fn generate_stitch_dataset(
    env: &Env,
    cfg: &GeneratorConfig,
    exec: Execution,
) -> Result<Dataset, EnvError> {
    if cfg.max_len < 2 {
        return Err(EnvError::Generator("max_len must be >= 2".into()));
    }
    if cfg.n_traj == 0 {
        return Err(EnvError::Generator("n_traj must be >= 1".into()));
    }
    let trajectories = par::map_range(exec, cfg.n_traj, |i| {
        let mut r = rng::stream(cfg.seed, "trajectory", i as u64);
        match env {
            Env::Grid(g) => grid_trajectory(g, cfg, &mut r),
            Env::Point(p) => point_trajectory(p, cfg, &mut r),
        }
    });
    Ok(Dataset {
        env: env.clone(),
        generator: cfg.clone(),
        trajectories,
    })
}

fn pick_waypoint<R: Rng>(maze: &GridMaze, from: Cell, radius: usize, rng: &mut R) -> Option<Cell> {
    let dist = maze.neighbor_distances(from);
    let near: Vec<Cell> = dist
        .iter()
        .enumerate()
        .filter(|(_, d)| matches!(d, Some(k) if *k >= 1 && (*k as usize) <= radius))
        .map(|(i, _)| maze.cell_at(i))
        .collect();
    (!near.is_empty()).then(|| near[rng.random_range(0..near.len())])
}

/// A random action among those that move one step closer to `target`.
fn expert_action<R: Rng>(
    maze: &GridMaze,
    at: Cell,
    to_target: &[Option<u32>],
    rng: &mut R,
) -> GridAction {
    let here = to_target[maze.index(at)].unwrap_or(u32::MAX);
    let good: Vec<GridAction> = GridAction::ALL[..4]
        .iter()
        .copied()
        .filter(|&a| {
            let n = maze.step(at, a).unwrap_or(at);
            n != at && to_target[maze.index(n)].is_some_and(|d| d < here)
        })
        .collect();
    if good.is_empty() {
        GridAction::Stay
    } else {
        good[rng.random_range(0..good.len())]
    }
}

fn grid_trajectory<R: Rng>(maze: &GridMaze, cfg: &GeneratorConfig, rng: &mut R) -> Trajectory {
    let free = maze.free_cells();
    let mut cell = free[rng.random_range(0..free.len())];
    let mut obs = vec![maze.observe(cell)];
    let mut acts = Vec::with_capacity(cfg.max_len - 1);
    let mut waypoint: Option<(Cell, Vec<Option<u32>>)> = None;
    for _ in 1..cfg.max_len {
        let action = match cfg.policy {
            BehaviorPolicy::RandomWalk => GridAction::ALL[rng.random_range(0..5)],
            BehaviorPolicy::NoisyLocalExpert => {
                if waypoint.as_ref().is_none_or(|(w, _)| *w == cell) {
                    waypoint = pick_waypoint(maze, cell, cfg.max_len - 1, rng)
                        .map(|w| (w, maze.neighbor_distances(w)));
                }
                if rng.random::<f64>() < cfg.epsilon {
                    GridAction::ALL[rng.random_range(0..5)]
                } else {
                    match &waypoint {
                        Some((_, d)) => expert_action(maze, cell, d, rng),
                        None => GridAction::Stay,
                    }
                }
            }
        };
        cell = maze.step(cell, action).expect("agent stays on free cells");
        acts.push(action.encode());
        obs.push(maze.observe(cell));
    }
    Trajectory {
        observations: obs,
        actions: acts,
        tag: cfg.policy.to_string(),
    }
}

fn point_trajectory<R: Rng>(maze: &PointMaze, cfg: &GeneratorConfig, rng: &mut R) -> Trajectory {
    let free = maze.layout.free_cells();
    let start = free[rng.random_range(0..free.len())];
    let mut pos = [
        start.x as f64 + rng.random_range(0.1..0.9),
        start.y as f64 + rng.random_range(0.1..0.9),
    ];
    let m = maze.max_step_size;
    let mut obs = vec![maze.observe(pos)];
    let mut acts = Vec::with_capacity(cfg.max_len - 1);
    let mut waypoint: Option<(Cell, Vec<Option<u32>>)> = None;
    for _ in 1..cfg.max_len {
        let random = [rng.random_range(-m..=m), rng.random_range(-m..=m)];
        let action = match cfg.policy {
            BehaviorPolicy::RandomWalk => random,
            BehaviorPolicy::NoisyLocalExpert => {
                let cell = maze.cell_of(pos);
                if waypoint.as_ref().is_none_or(|(w, _)| *w == cell) {
                    let radius = ((cfg.max_len - 1) as f64 * m).floor().max(1.0) as usize;
                    waypoint = pick_waypoint(&maze.layout, cell, radius, rng)
                        .map(|w| (w, maze.layout.neighbor_distances(w)));
                }
                if rng.random::<f64>() < cfg.epsilon {
                    random
                } else {
                    match &waypoint {
                        Some((_, d)) => {
                            let a = expert_action(&maze.layout, cell, d, rng);
                            let next = maze.layout.step(cell, a).unwrap_or(cell);
                            let c = PointMaze::center(next);
                            [(c[0] - pos[0]).clamp(-m, m), (c[1] - pos[1]).clamp(-m, m)]
                        }
                        None => [0.0, 0.0],
                    }
                }
            }
        };
        // store the decoded position so replaying from the stored observation is exact
        let here = maze.decode(&maze.observe(pos)).expect("two coordinates");
        pos = maze.step(here, &action);
        acts.push(action.to_vec());
        obs.push(maze.observe(pos));
    }
    Trajectory {
        observations: obs,
        actions: acts,
        tag: cfg.policy.to_string(),
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format_version: u32,
    env_digest: String,
    env: Env,
    generator: GeneratorConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryRecord {
    obs: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
}

/// 17 significant digits.
fn write_number(out: &mut String, v: f64) {
    use std::fmt::Write;
    write!(out, "{v:.16e}").expect("write to string");
}

fn write_vectors(out: &mut String, vs: &[Vec<f64>]) {
    out.push('[');
    for (i, v) in vs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push('[');
        for (k, x) in v.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            write_number(out, *x);
        }
        out.push(']');
    }
    out.push(']');
}

/// Serializes a dataset: one header line, then one `{"obs":…,"act":…}` line per
/// trajectory.
pub fn dataset_to_string(dataset: &Dataset) -> String {
    let header = DatasetHeader {
        format_version: DATASET_FORMAT_VERSION,
        env_digest: dataset.env_digest(),
        env: dataset.env.clone(),
        generator: dataset.generator.clone(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for tr in &dataset.trajectories {
        out.push_str("{\"obs\":");
        write_vectors(&mut out, &tr.observations);
        out.push_str(",\"act\":");
        write_vectors(&mut out, &tr.actions);
        out.push_str("}\n");
    }
    out
}

pub fn dataset_save(dataset: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let io = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(dataset_to_string(dataset).as_bytes())
        .map_err(io)?;
    Ok(())
}

pub fn dataset_load(path: &Path) -> Result<Dataset, DatasetError> {
    let io = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(fs::File::open(path).map_err(io)?);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or(DatasetError::Parse {
            line: 1,
            msg: "missing header".into(),
        })?
        .map_err(io)?;
    let header: DatasetHeader =
        serde_json::from_str(&header_line).map_err(|e| DatasetError::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
    if header.format_version != DATASET_FORMAT_VERSION {
        return Err(DatasetError::Version(header.format_version));
    }
    let found = header.env.digest();
    if found != header.env_digest {
        return Err(DatasetError::Checksum {
            expected: header.env_digest,
            found,
        });
    }
    let mut trajectories = Vec::new();
    for (k, line) in lines.enumerate() {
        let line_no = k + 2;
        let line = line.map_err(io)?;
        let rec: TrajectoryRecord =
            serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
        let tr = Trajectory::new(rec.obs, rec.act, header.generator.policy.to_string()).map_err(
            |e| DatasetError::Parse {
                line: line_no,
                msg: e.to_string(),
            },
        )?;
        trajectories.push(tr);
    }
    Ok(Dataset {
        env: header.env,
        generator: header.generator,
        trajectories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn maze8() -> GridMaze {
        GridMaze::named("maze8", ObsEncoding::Coordinates).unwrap()
    }

    #[test]
    fn grid_step_rules() {
        let m = maze8();
        // (0,0) with (1,1) a wall below-right; moving up hits the boundary
        assert_eq!(
            m.step(Cell::new(0, 0), GridAction::Up).unwrap(),
            Cell::new(0, 0)
        );
        assert_eq!(
            m.step(Cell::new(0, 0), GridAction::Right).unwrap(),
            Cell::new(1, 0)
        );
        assert_eq!(
            m.step(Cell::new(1, 0), GridAction::Down).unwrap(),
            Cell::new(1, 0)
        );
        assert_eq!(
            m.step(Cell::new(2, 2), GridAction::Stay).unwrap(),
            Cell::new(2, 2)
        );
        assert!(matches!(
            m.step(Cell::new(1, 1), GridAction::Up),
            Err(EnvError::NotFree(1, 1))
        ));
    }

    #[test]
    fn layouts_parse_and_reject_bad_mazes() {
        for name in ["open8", "maze8", "maze12"] {
            GridMaze::named(name, ObsEncoding::OneHot).unwrap();
        }
        assert!(GridMaze::from_ascii(&[".#.", "###", "..."], ObsEncoding::Coordinates).is_err());
        assert!(GridMaze::from_ascii(&["..", "."], ObsEncoding::Coordinates).is_err());
        assert!(GridMaze::named("maze99", ObsEncoding::Coordinates).is_err());
    }

    #[test]
    fn observation_round_trip() {
        for enc in [ObsEncoding::Coordinates, ObsEncoding::OneHot] {
            let m = maze8().with_encoding(enc);
            for c in m.free_cells() {
                assert_eq!(m.decode(&m.observe(c)), Some(c));
            }
        }
        for a in GridAction::ALL {
            assert_eq!(GridAction::decode(&a.encode()), Some(a));
        }
    }

    #[test]
    fn point_step_rules() {
        let p = PointMaze::new(maze8(), 0.3, 0.25).unwrap();
        let pos = [0.5, 0.5];
        assert_eq!(p.step(pos, &[0.0, 0.0]), pos);
        let moved = p.step(pos, &[0.2, 0.1]);
        assert!((moved[0] - 0.7).abs() < 1e-15 && (moved[1] - 0.6).abs() < 1e-15);
        // cell (1,1) is a wall: moving down from (1.5, 0.8) stops at y = 1 - margin
        let clipped = p.step([1.5, 0.8], &[0.0, 0.3]);
        assert_eq!(clipped, [1.5, 1.0 - WALL_MARGIN]);
        // boundary on the left
        let left = p.step([0.1, 0.5], &[-0.3, 0.0]);
        assert_eq!(left, [WALL_MARGIN, 0.5]);
        // actions are clamped
        let far = p.step([2.5, 2.5], &[5.0, 0.0]);
        assert!((far[0] - 2.8).abs() < 1e-12);
    }

    #[test]
    fn unit_length_trajectories() {
        let env = Env::Grid(maze8());
        let cfg = GeneratorConfig {
            n_traj: 50,
            max_len: 2,
            ..GeneratorConfig::default()
        };
        let ds = generate_stitch_dataset(&env, &cfg, Execution::Parallel).unwrap();
        assert!(ds.trajectories.iter().all(|t| t.num_transitions() == 1));
        assert!(generate_stitch_dataset(
            &env,
            &GeneratorConfig { max_len: 1, ..cfg },
            Execution::Parallel
        )
        .is_err());
    }

    #[test]
    fn random_walk_covers_open_grid() {
        let env = Env::Grid(GridMaze::named("open8", ObsEncoding::Coordinates).unwrap());
        let cfg = GeneratorConfig {
            policy: BehaviorPolicy::RandomWalk,
            n_traj: 2000,
            max_len: 8,
            ..GeneratorConfig::default()
        };
        let ds = generate_stitch_dataset(&env, &cfg, Execution::Parallel).unwrap();
        let Env::Grid(g) = &ds.env else {
            unreachable!()
        };
        let mut seen = vec![false; 64];
        for t in &ds.trajectories {
            for o in &t.observations {
                seen[g.index(g.decode(o).unwrap())] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn generated_data_is_dynamics_consistent() {
        let grid = Env::Grid(maze8().with_encoding(ObsEncoding::OneHot));
        let point = Env::Point(PointMaze::new(maze8(), 0.3, 0.25).unwrap());
        for env in [grid, point] {
            for policy in [BehaviorPolicy::RandomWalk, BehaviorPolicy::NoisyLocalExpert] {
                let cfg = GeneratorConfig {
                    policy,
                    n_traj: 200,
                    max_len: 10,
                    ..GeneratorConfig::default()
                };
                let ds = generate_stitch_dataset(&env, &cfg, Execution::Sequential).unwrap();
                assert_eq!(
                    ds.first_inconsistency(),
                    None,
                    "{policy} on {}",
                    env.canonical_json()
                );
                if let Env::Point(p) = &env {
                    for t in &ds.trajectories {
                        for o in &t.observations {
                            assert!(p.is_free(p.decode(o).unwrap()));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn sequential_and_parallel_generation_agree() {
        let env = Env::Grid(maze8());
        let cfg = GeneratorConfig {
            n_traj: 100,
            ..GeneratorConfig::default()
        };
        let a = generate_stitch_dataset(&env, &cfg, Execution::Sequential).unwrap();
        let b = generate_stitch_dataset(&env, &cfg, Execution::Parallel).unwrap();
        assert_eq!(dataset_to_string(&a), dataset_to_string(&b));
    }

    #[test]
    fn digest_changes_with_layout() {
        let a = Env::Grid(maze8());
        let b = Env::Grid(GridMaze::named("open8", ObsEncoding::Coordinates).unwrap());
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), Env::Grid(maze8()).digest());
    }
}
