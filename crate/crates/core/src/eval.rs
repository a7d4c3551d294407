//! Ground-truth shortest-path oracles, policy rollouts, success-rate
//! evaluation, learned-distance validation and heatmap export.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Cell, Env, EnvError, GridAction, GridMaze, PointMaze};
use crate::losses::GaussianPolicy;
use crate::nn::Matrix;
use crate::par::{self, Execution};
use crate::quasimetric::QuasimetricCritic;
use crate::rng;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("goal ({0}) is not a free cell")]
    GoalInWall(Cell),
    #[error("need at least 3 reachable states for a rank correlation, found {0}")]
    TooFewStates(usize),
    #[error("no evaluation tasks")]
    NoTasks,
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Exact shortest step counts to one goal; `None` marks unreachable cells and
/// walls.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleDistanceMap {
    pub width: usize,
    pub height: usize,
    pub goal: Cell,
    pub steps: Vec<Option<u32>>,
}

impl OracleDistanceMap {
    pub fn get(&self, c: Cell) -> Option<u32> {
        if c.x < 0 || c.y < 0 || c.x as usize >= self.width || c.y as usize >= self.height {
            return None;
        }
        self.steps[c.y as usize * self.width + c.x as usize]
    }

    /// `dist(goal) = 0` and `dist(s) = 1 + min_a dist(step(s, a))` on every
    /// reachable non-goal cell; unreachable cells have no reachable successor.
    pub fn is_bellman_consistent(&self, maze: &GridMaze) -> bool {
        if self.get(self.goal) != Some(0) {
            return false;
        }
        maze.free_cells().into_iter().all(|c| {
            let best = GridAction::ALL
                .iter()
                .filter_map(|&a| self.get(maze.step(c, a).ok()?))
                .min();
            match self.get(c) {
                Some(0) => c == self.goal,
                Some(d) => best == Some(d - 1),
                None => best.is_none(),
            }
        })
    }

    pub fn max_steps(&self) -> u32 {
        self.steps.iter().flatten().copied().max().unwrap_or(0)
    }
}

/// Breadth-first search backwards from `goal` over the predecessor relation
/// induced by [`GridMaze::step`].
pub fn bfs_oracle(maze: &GridMaze, goal: Cell) -> Result<OracleDistanceMap, EvalError> {
    if !maze.is_free(goal) {
        return Err(EvalError::GoalInWall(goal));
    }
    let n = maze.width() * maze.height();
    let mut predecessors: Vec<Vec<Cell>> = vec![Vec::new(); n];
    for c in maze.free_cells() {
        for a in GridAction::ALL {
            let next = maze.step(c, a)?;
            if next != c {
                predecessors[maze.index(next)].push(c);
            }
        }
    }
    let mut steps = vec![None; n];
    steps[maze.index(goal)] = Some(0);
    let mut queue = VecDeque::from([goal]);
    while let Some(c) = queue.pop_front() {
        let d = steps[maze.index(c)].expect("queued cells are labelled");
        for &p in &predecessors[maze.index(c)] {
            if steps[maze.index(p)].is_none() {
                steps[maze.index(p)] = Some(d + 1);
                queue.push_back(p);
            }
        }
    }
    Ok(OracleDistanceMap {
        width: maze.width(),
        height: maze.height(),
        goal,
        steps,
    })
}

/// Bellman iteration `V(s) ← 1 + min_a V(step(s, a))` to its fixed point; an
/// independent route to the same map as [`bfs_oracle`].
pub fn value_iteration_oracle(maze: &GridMaze, goal: Cell) -> Result<OracleDistanceMap, EvalError> {
    if !maze.is_free(goal) {
        return Err(EvalError::GoalInWall(goal));
    }
    let free = maze.free_cells();
    let mut value = vec![f64::INFINITY; maze.width() * maze.height()];
    value[maze.index(goal)] = 0.0;
    loop {
        let mut changed = false;
        for &c in &free {
            if c == goal {
                continue;
            }
            let mut best = f64::INFINITY;
            for a in GridAction::ALL {
                best = best.min(value[maze.index(maze.step(c, a)?)]);
            }
            let v = 1.0 + best;
            if v < value[maze.index(c)] {
                value[maze.index(c)] = v;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(OracleDistanceMap {
        width: maze.width(),
        height: maze.height(),
        goal,
        steps: value
            .iter()
            .map(|&v| v.is_finite().then_some(v as u32))
            .collect(),
    })
}

/// Longest finite shortest-path length between two free cells.
pub fn maze_diameter(maze: &GridMaze) -> u32 {
    maze.free_cells()
        .into_iter()
        .filter_map(|c| bfs_oracle(maze, c).ok().map(|m| m.max_steps()))
        .max()
        .unwrap_or(0)
}

/// Batched distances a critic assigns to observations and actions.
pub trait DistanceCritic: Sync {
    /// `d((s_i, a_i), g)` for every row `i`.
    fn sa_distances(&self, s: &Matrix, a: &Matrix, goal: &[f64]) -> Vec<f64>;
    /// `d(s_i, g)` for every row `i`.
    fn s_distances(&self, s: &Matrix, goal: &[f64]) -> Vec<f64>;
}

impl DistanceCritic for QuasimetricCritic {
    fn sa_distances(&self, s: &Matrix, a: &Matrix, goal: &[f64]) -> Vec<f64> {
        let g = Matrix::from_rows(&vec![goal; s.rows]).expect("goal rows");
        self.d_stateaction_goal_batch(s, a, &g)
            .expect("shapes fixed by the environment")
    }

    fn s_distances(&self, s: &Matrix, goal: &[f64]) -> Vec<f64> {
        let g = Matrix::from_rows(&vec![goal; s.rows]).expect("goal rows");
        self.d_state_goal_batch(s, &g)
            .expect("shapes fixed by the environment")
    }
}

/// Greedy action table for one goal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyTable {
    pub goal: Cell,
    pub width: usize,
    /// `None` on walls
    pub actions: Vec<Option<GridAction>>,
}

impl PolicyTable {
    pub fn action(&self, c: Cell) -> Option<GridAction> {
        self.actions
            .get(c.y as usize * self.width + c.x as usize)
            .copied()
            .flatten()
    }
}

/// `argmin_a d((s, a), goal)` on every free cell, lowest action index on ties.
pub fn extract_discrete_policy<C: DistanceCritic + ?Sized>(
    critic: &C,
    maze: &GridMaze,
    goal: Cell,
) -> PolicyTable {
    let free = maze.free_cells();
    let mut s_rows = Vec::with_capacity(free.len() * 5);
    let mut a_rows = Vec::with_capacity(free.len() * 5);
    for &c in &free {
        for a in GridAction::ALL {
            s_rows.push(maze.observe(c));
            a_rows.push(a.encode());
        }
    }
    let d = critic.sa_distances(
        &Matrix::from_rows(&s_rows).expect("rows"),
        &Matrix::from_rows(&a_rows).expect("rows"),
        &maze.observe(goal),
    );
    let mut actions = vec![None; maze.width() * maze.height()];
    for (k, &c) in free.iter().enumerate() {
        actions[maze.index(c)] = Some(GridAction::ALL[argmin(&d[k * 5..k * 5 + 5])]);
    }
    PolicyTable {
        goal,
        width: maze.width(),
        actions,
    }
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of free non-goal reachable cells whose table action is one of the
/// BFS-optimal actions.
pub fn optimal_action_agreement(
    table: &PolicyTable,
    maze: &GridMaze,
    oracle: &OracleDistanceMap,
) -> f64 {
    let mut total = 0usize;
    let mut agree = 0usize;
    for c in maze.free_cells() {
        let Some(d) = oracle.get(c) else { continue };
        if d == 0 {
            continue;
        }
        total += 1;
        if let Some(a) = table.action(c) {
            if maze.step(c, a).ok().and_then(|n| oracle.get(n)) == Some(d - 1) {
                agree += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        agree as f64 / total as f64
    }
}

/// Environment state for rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum State {
    Cell(Cell),
    Point([f64; 2]),
}

impl State {
    pub fn observe(&self, env: &Env) -> Vec<f64> {
        match (self, env) {
            (State::Cell(c), Env::Grid(g)) => g.observe(*c),
            (State::Point(p), Env::Point(m)) => m.observe(*p),
            (State::Cell(c), Env::Point(m)) => m.observe(PointMaze::center(*c)),
            (State::Point(p), Env::Grid(g)) => {
                g.observe(Cell::new(p[0].floor() as i64, p[1].floor() as i64))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTask {
    pub start: State,
    pub goal: State,
    pub horizon: usize,
    /// BFS steps from start to goal (cell of the goal for the point maze)
    pub oracle_steps: Option<u32>,
}

impl EvalTask {
    /// Grid task with the oracle distance filled in.
    pub fn grid(
        maze: &GridMaze,
        start: Cell,
        goal: Cell,
        horizon: usize,
    ) -> Result<Self, EvalError> {
        let oracle = bfs_oracle(maze, goal)?;
        Ok(Self {
            start: State::Cell(start),
            goal: State::Cell(goal),
            horizon,
            oracle_steps: oracle.get(start),
        })
    }
}

/// Anything that picks an action vector for a state and a goal.
pub trait GoalPolicy: Sync {
    fn act(&self, env: &Env, state: &State, goal: &State) -> Vec<f64>;
}

impl<F> GoalPolicy for F
where
    F: Fn(&Env, &State, &State) -> Vec<f64> + Sync,
{
    fn act(&self, env: &Env, state: &State, goal: &State) -> Vec<f64> {
        self(env, state, goal)
    }
}

/// Greedy `argmin_a d((s, a), g)` over the five grid actions.
pub struct GreedyCriticPolicy<'a, C: DistanceCritic + ?Sized>(pub &'a C);

impl<C: DistanceCritic + ?Sized> GoalPolicy for GreedyCriticPolicy<'_, C> {
    fn act(&self, env: &Env, state: &State, goal: &State) -> Vec<f64> {
        let obs = state.observe(env);
        let s = Matrix::from_rows(&vec![obs; 5]).expect("rows");
        let a = Matrix::from_rows(&GridAction::ALL.map(|a| a.encode())).expect("rows");
        let d = self.0.sa_distances(&s, &a, &goal.observe(env));
        GridAction::ALL[argmin(&d)].encode()
    }
}

impl GoalPolicy for PolicyTable {
    fn act(&self, _env: &Env, state: &State, _goal: &State) -> Vec<f64> {
        let State::Cell(c) = state else {
            return GridAction::Stay.encode();
        };
        self.action(*c).unwrap_or(GridAction::Stay).encode()
    }
}

/// Follows the BFS oracle towards the goal (lowest action index among optimal moves).
pub struct OraclePolicy;

impl GoalPolicy for OraclePolicy {
    fn act(&self, env: &Env, state: &State, goal: &State) -> Vec<f64> {
        let (Env::Grid(maze), State::Cell(c), State::Cell(g)) = (env, state, goal) else {
            return GridAction::Stay.encode();
        };
        let Ok(map) = bfs_oracle(maze, *g) else {
            return GridAction::Stay.encode();
        };
        let here = map.get(*c).unwrap_or(u32::MAX);
        GridAction::ALL
            .iter()
            .find(|&&a| {
                maze.step(*c, a)
                    .ok()
                    .and_then(|n| map.get(n))
                    .is_some_and(|d| d < here)
            })
            .copied()
            .unwrap_or(GridAction::Stay)
            .encode()
    }
}

/// Deterministic mean action of a Gaussian policy.
impl GoalPolicy for GaussianPolicy {
    fn act(&self, env: &Env, state: &State, goal: &State) -> Vec<f64> {
        GaussianPolicy::act(self, &state.observe(env), &goal.observe(env))
            .expect("policy fits environment")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub success: bool,
    pub steps: usize,
    /// visited states including the start
    pub trace: Vec<State>,
}

fn reached(env: &Env, state: &State, goal: &State) -> bool {
    match (env, state, goal) {
        (Env::Point(p), State::Point(s), State::Point(g)) => {
            ((s[0] - g[0]).powi(2) + (s[1] - g[1]).powi(2)).sqrt() <= p.goal_radius
        }
        _ => state == goal,
    }
}

fn advance(env: &Env, state: &State, action: &[f64]) -> State {
    match (env, state) {
        (Env::Grid(g), State::Cell(c)) => {
            let a = GridAction::decode(action).unwrap_or(GridAction::Stay);
            State::Cell(g.step(*c, a).unwrap_or(*c))
        }
        (Env::Point(p), State::Point(pos)) => State::Point(p.step(*pos, action)),
        _ => *state,
    }
}

/// Runs `policy` from `task.start` for at most `task.horizon` steps; success
/// is reaching the goal cell (grid) or the goal radius (point maze).
pub fn rollout<P: GoalPolicy + ?Sized>(policy: &P, env: &Env, task: &EvalTask) -> Rollout {
    let mut state = task.start;
    let mut trace = vec![state];
    if reached(env, &state, &task.goal) {
        return Rollout {
            success: true,
            steps: 0,
            trace,
        };
    }
    for t in 1..=task.horizon {
        let a = policy.act(env, &state, &task.goal);
        state = advance(env, &state, &a);
        trace.push(state);
        if reached(env, &state, &task.goal) {
            return Rollout {
                success: true,
                steps: t,
                trace,
            };
        }
    }
    Rollout {
        success: false,
        steps: task.horizon,
        trace,
    }
}

/// Per-episode perturbation of the task start: grid starts are drawn uniformly
/// from free cells within this Manhattan radius; point starts get a uniform
/// offset in `[-r, r]²` (redrawn until free).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub episodes_per_task: usize,
    pub start_jitter: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes_per_task: 50,
            start_jitter: 1.0,
            seed: 0,
        }
    }
}

fn jittered_start<R: Rng>(env: &Env, start: &State, radius: f64, rng: &mut R) -> State {
    match (env, start) {
        (Env::Grid(g), State::Cell(c)) => {
            let r = radius.floor() as i64;
            let near: Vec<Cell> = g
                .free_cells()
                .into_iter()
                .filter(|n| (n.x - c.x).abs() + (n.y - c.y).abs() <= r)
                .collect();
            if near.is_empty() {
                *start
            } else {
                State::Cell(near[rng.random_range(0..near.len())])
            }
        }
        (Env::Point(p), State::Point(s)) if radius > 0.0 => {
            for _ in 0..100 {
                let cand = [
                    s[0] + rng.random_range(-radius..=radius),
                    s[1] + rng.random_range(-radius..=radius),
                ];
                if p.is_free(cand) {
                    return State::Point(cand);
                }
            }
            *start
        }
        _ => *start,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub successes: usize,
    pub episodes: usize,
    pub rate: f64,
    pub stderr: f64,
}

impl TaskResult {
    fn new(task_id: String, successes: usize, episodes: usize) -> Self {
        let rate = if episodes == 0 {
            0.0
        } else {
            successes as f64 / episodes as f64
        };
        let stderr = if episodes == 0 {
            0.0
        } else {
            (rate * (1.0 - rate) / episodes as f64).sqrt()
        };
        Self {
            task_id,
            successes,
            episodes,
            rate,
            stderr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: Vec<TaskResult>,
    pub aggregate: TaskResult,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task_id,successes,episodes,rate,stderr\n");
        for r in self.tasks.iter().chain(std::iter::once(&self.aggregate)) {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.task_id, r.successes, r.episodes, r.rate, r.stderr
            )
            .expect("write to string");
        }
        out
    }
}

/// `cfg.episodes_per_task` rollouts per task with jittered starts; per-task and
/// pooled success rates with binomial standard errors.
pub fn evaluate_suite<P: GoalPolicy + ?Sized>(
    policy: &P,
    env: &Env,
    tasks: &[EvalTask],
    cfg: &EvalConfig,
    exec: Execution,
) -> Result<EvalReport, EvalError> {
    if tasks.is_empty() {
        return Err(EvalError::NoTasks);
    }
    let n = cfg.episodes_per_task;
    let outcomes = par::map_range(exec, tasks.len() * n, |k| {
        let (ti, e) = (k / n, k % n);
        let mut r = rng::stream(cfg.seed, "episode", k as u64);
        let task = &tasks[ti];
        let episode = EvalTask {
            start: if e == 0 {
                task.start
            } else {
                jittered_start(env, &task.start, cfg.start_jitter, &mut r)
            },
            ..task.clone()
        };
        rollout(policy, env, &episode).success
    });
    let results: Vec<TaskResult> = (0..tasks.len())
        .map(|ti| {
            let s = outcomes[ti * n..(ti + 1) * n]
                .iter()
                .filter(|&&x| x)
                .count();
            TaskResult::new(format!("task{ti}"), s, n)
        })
        .collect();
    let total: usize = results.iter().map(|r| r.successes).sum();
    Ok(EvalReport {
        aggregate: TaskResult::new("all".into(), total, n * tasks.len()),
        tasks: results,
    })
}

/// Spearman rank correlation (average ranks on ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceRow {
    pub cell: Cell,
    pub learned: f64,
    pub oracle: u32,
}

/// Rank correlation between learned `d(s, goal)` and BFS steps over every
/// reachable free cell.
pub fn distance_correlation<C: DistanceCritic + ?Sized>(
    critic: &C,
    maze: &GridMaze,
    goal: Cell,
) -> Result<(f64, Vec<DistanceRow>), EvalError> {
    let oracle = bfs_oracle(maze, goal)?;
    let cells: Vec<Cell> = maze
        .free_cells()
        .into_iter()
        .filter(|&c| oracle.get(c).is_some())
        .collect();
    if cells.len() < 3 {
        return Err(EvalError::TooFewStates(cells.len()));
    }
    let obs: Vec<Vec<f64>> = cells.iter().map(|&c| maze.observe(c)).collect();
    let learned = critic.s_distances(&Matrix::from_rows(&obs).expect("rows"), &maze.observe(goal));
    let truth: Vec<f64> = cells
        .iter()
        .map(|&c| oracle.get(c).unwrap_or(0) as f64)
        .collect();
    let rho = spearman(&learned, &truth);
    let rows = cells
        .iter()
        .zip(&learned)
        .map(|(&cell, &l)| DistanceRow {
            cell,
            learned: l,
            oracle: oracle.get(cell).unwrap_or(0),
        })
        .collect();
    Ok((rho, rows))
}

/// `d(s, goal)` for every cell, `None` on walls; row 0 is the top of the maze.
pub type HeatmapGrid = Vec<Vec<Option<f64>>>;

pub fn distance_grid<C: DistanceCritic + ?Sized>(
    critic: &C,
    maze: &GridMaze,
    goal: Cell,
) -> HeatmapGrid {
    let free = maze.free_cells();
    let obs: Vec<Vec<f64>> = free.iter().map(|&c| maze.observe(c)).collect();
    let d = critic.s_distances(&Matrix::from_rows(&obs).expect("rows"), &maze.observe(goal));
    let mut grid = vec![vec![None; maze.width()]; maze.height()];
    for (c, v) in free.iter().zip(d) {
        grid[c.y as usize][c.x as usize] = Some(v);
    }
    grid
}

pub fn heatmap_to_csv(grid: &HeatmapGrid) -> String {
    let mut out = String::new();
    for row in grid {
        let cells: Vec<String> = row
            .iter()
            .map(|v| v.map_or_else(|| "#".to_string(), |x| format!("{x:e}")))
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Writes the `d(·, goal)` grid as CSV with `#` for walls and returns it.
pub fn export_heatmap<C: DistanceCritic + ?Sized>(
    critic: &C,
    maze: &GridMaze,
    goal: Cell,
    path: &Path,
) -> Result<HeatmapGrid, EvalError> {
    if !maze.is_free(goal) {
        return Err(EvalError::GoalInWall(goal));
    }
    let grid = distance_grid(critic, maze, goal);
    fs::write(path, heatmap_to_csv(&grid)).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(grid)
}

/// Edges `(closer, farther)` of the shortest-path DAG leaving `goal` along
/// which the grid value decreases.
pub fn heatmap_monotonicity_violations(
    grid: &HeatmapGrid,
    maze: &GridMaze,
    oracle: &OracleDistanceMap,
) -> Vec<(Cell, Cell)> {
    let value = |c: Cell| grid[c.y as usize][c.x as usize];
    let mut bad = Vec::new();
    for c in maze.free_cells() {
        let Some(k) = oracle.get(c) else { continue };
        for a in &GridAction::ALL[..4] {
            let Ok(n) = maze.step(c, *a) else { continue };
            if oracle.get(n) == Some(k + 1) {
                if let (Some(vc), Some(vn)) = (value(c), value(n)) {
                    if vn < vc {
                        bad.push((c, n));
                    }
                }
            }
        }
    }
    bad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::ObsEncoding;

    fn open3() -> GridMaze {
        GridMaze::from_ascii(&["...", "...", "..."], ObsEncoding::OneHot).unwrap()
    }

    #[test]
    fn bfs_basic_cases() {
        let m = open3();
        let map = bfs_oracle(&m, Cell::new(2, 2)).unwrap();
        assert_eq!(map.get(Cell::new(2, 2)), Some(0));
        assert_eq!(map.get(Cell::new(0, 0)), Some(4));
        assert!(map.is_bellman_consistent(&m));
        assert!(matches!(
            bfs_oracle(
                &GridMaze::named("maze8", ObsEncoding::OneHot).unwrap(),
                Cell::new(1, 1)
            ),
            Err(EvalError::GoalInWall(_))
        ));
    }

    #[test]
    fn walled_off_cells_are_unreachable() {
        // GridMaze rejects disconnected layouts, so probe the wall cells themselves
        let m = GridMaze::from_ascii(&["..#", "..#", "..."], ObsEncoding::OneHot).unwrap();
        let map = bfs_oracle(&m, Cell::new(0, 0)).unwrap();
        assert_eq!(map.get(Cell::new(2, 0)), None);
        assert_eq!(map.get(Cell::new(2, 2)), Some(4));
    }

    #[test]
    fn bfs_and_value_iteration_agree() {
        for name in ["open8", "maze8", "maze12"] {
            let m = GridMaze::named(name, ObsEncoding::Coordinates).unwrap();
            for g in m.free_cells().into_iter().step_by(7) {
                let a = bfs_oracle(&m, g).unwrap();
                assert_eq!(a, value_iteration_oracle(&m, g).unwrap());
                assert!(a.is_bellman_consistent(&m));
            }
        }
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn rollout_edge_cases() {
        let m = open3();
        let env = Env::Grid(m.clone());
        let same = EvalTask::grid(&m, Cell::new(1, 1), Cell::new(1, 1), 10).unwrap();
        let r = rollout(&OraclePolicy, &env, &same);
        assert!(r.success && r.steps == 0 && r.trace.len() == 1);
        let none = EvalTask::grid(&m, Cell::new(0, 0), Cell::new(2, 2), 0).unwrap();
        assert!(!rollout(&OraclePolicy, &env, &none).success);
        let task = EvalTask::grid(&m, Cell::new(0, 0), Cell::new(2, 2), 10).unwrap();
        let r = rollout(&OraclePolicy, &env, &task);
        assert_eq!((r.success, r.steps), (true, 4));
        assert_eq!(r, rollout(&OraclePolicy, &env, &task));
    }

    #[test]
    fn suite_success_rates() {
        let m = GridMaze::named("maze12", ObsEncoding::Coordinates).unwrap();
        let env = Env::Grid(m.clone());
        let tasks = vec![
            EvalTask::grid(&m, Cell::new(0, 0), Cell::new(2, 10), 100).unwrap(),
            EvalTask::grid(&m, Cell::new(11, 2), Cell::new(5, 2), 100).unwrap(),
        ];
        let cfg = EvalConfig {
            episodes_per_task: 10,
            ..EvalConfig::default()
        };
        let stay = |_: &Env, _: &State, _: &State| GridAction::Stay.encode();
        let fail = evaluate_suite(&stay, &env, &tasks, &cfg, Execution::Parallel).unwrap();
        assert_eq!(fail.aggregate.rate, 0.0);
        assert!(fail.tasks.iter().all(|t| t.successes == 0));
        let ok = evaluate_suite(&OraclePolicy, &env, &tasks, &cfg, Execution::Parallel).unwrap();
        assert_eq!(ok.aggregate.rate, 1.0);
        assert_eq!(ok.aggregate.stderr, 0.0);
        assert!(ok
            .to_csv()
            .starts_with("task_id,successes,episodes,rate,stderr\ntask0,10,10,1,0\n"));
        assert!(evaluate_suite(&OraclePolicy, &env, &[], &cfg, Execution::Parallel).is_err());
    }
}
