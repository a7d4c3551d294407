//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 5 to 7 train real models and take a while (see README). The
//! process exits 0 after reporting unless `MQE_ACCEPTANCE_STRICT=1`, in which
//! case any failure makes it exit 1. `MQE_ACCEPTANCE_ONLY=1,4,8` runs a subset.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use mqe::config::RunConfig;
use mqe::env::generate_stitch_dataset;
use mqe::eval::{
    bfs_oracle, distance_correlation, evaluate_suite, export_heatmap,
    heatmap_monotonicity_violations, EvalReport, EvalTask, GreedyCriticPolicy, State,
};
use mqe::losses::{combined_critic_loss, CriticLossConfig};
use mqe::par::Execution;
use mqe::quasimetric::mrn_distance;
use mqe::sampling::{assemble_batch, SamplerConfig};
use mqe::selftest::{axiom_suite, gradient_suite, sampler_suite};
use mqe::{Cell, Env, Matrix, NetShape, QuasimetricCritic, TrainBatch};

/// Training steps per stitching run (criteria 6 and 7).
const STITCH_STEPS: usize = 50_000;
/// Seeds shared by the stitching comparisons.
const STITCH_SEEDS: [u64; 4] = [0, 1, 2, 3];

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

/// Settings plus the artifacts of one gen-data, train, eval pass.
struct Trial {
    env: Env,
    critic: QuasimetricCritic,
    tasks: Vec<EvalTask>,
    report: EvalReport,
    train_time: Duration,
}

fn config(overrides: &[String]) -> RunConfig {
    let mut cfg = RunConfig::parse_text("").unwrap();
    cfg.apply_overrides(overrides).unwrap();
    cfg.train.validate().unwrap();
    cfg
}

fn run_trial(overrides: &[String]) -> (Trial, mqe::Dataset) {
    let cfg = config(overrides);
    let env = cfg.env.build().unwrap();
    let data = generate_stitch_dataset(&env, &cfg.generator(), Execution::Parallel).unwrap();
    let start = Instant::now();
    let out = mqe::train(&cfg.train, &data).unwrap();
    let train_time = start.elapsed();
    let tasks = cfg.tasks(&env).unwrap();
    let report = evaluate_suite(
        &GreedyCriticPolicy(&out.critic),
        &env,
        &tasks,
        &cfg.eval_config(),
        Execution::Parallel,
    )
    .unwrap();
    let trial = Trial {
        env,
        critic: out.critic,
        tasks,
        report,
        train_time,
    };
    (trial, data)
}

fn owned(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn goal_cell(task: &EvalTask) -> Cell {
    match task.goal {
        State::Cell(c) => c,
        State::Point(_) => unreachable!("grid tasks"),
    }
}

// ---------------------------------------------------------------- 1 to 3

fn axioms() -> Verdict {
    let start = Instant::now();
    let r = axiom_suite(10_000, 7);
    let t = start.elapsed();
    verdict(
        r.passed && t < Duration::from_secs(10),
        format!("{} in {}", r.detail, secs(t)),
    )
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let r = gradient_suite(64, 7);
    let t = start.elapsed();
    verdict(
        r.passed && t < Duration::from_secs(60),
        format!(
            "max relative error per loss (64 probes, step 1e-4): {} in {}",
            r.detail,
            secs(t)
        ),
    )
}

fn samplers() -> Verdict {
    let start = Instant::now();
    let r = sampler_suite(1_000_000, 7);
    let t = start.elapsed();
    verdict(
        r.passed && t < Duration::from_secs(30),
        format!("{} in {}", r.detail, secs(t)),
    )
}

// ---------------------------------------------------------------- 4

fn linex(delta: f64) -> f64 {
    let d = delta.clamp(-5.0, 5.0);
    d.exp() - d
}

/// One-step objective written independently of the batched code: every
/// `(s_i, a_i)` regresses onto `d(s'_i, g_j) - log γ` for every goal `g_j`,
/// plus `ζ` times the cross-paired invariance penalty.
fn one_step_reference(c: &QuasimetricCritic, b: &TrainBatch, cfg: &CriticLossConfig) -> f64 {
    let n = b.len();
    let row = |m: &Matrix, i: usize| m.row(i).to_vec();
    let mut backup = 0.0;
    for i in 0..n {
        for j in 0..n {
            let q = c
                .d_stateaction_goal(&row(&b.s, i), &row(&b.a, i), &row(&b.g, j))
                .unwrap();
            let v_next = c.d_state_goal(&row(&b.s_next, i), &row(&b.g, j)).unwrap();
            backup += linex(q - (v_next - cfg.gamma.ln()));
        }
    }
    let mut invariance = 0.0;
    for i in 0..n {
        let s = Matrix::from_rows(&[row(&b.s, i)]).unwrap();
        let psi = c.embed_states(&s).unwrap();
        for j in 0..n {
            let a = Matrix::from_rows(&[row(&b.a, j)]).unwrap();
            let phi = c.embed_state_actions(&s, &a).unwrap();
            let d = mrn_distance(psi.row(0), phi.row(0), &c.mrn).unwrap();
            invariance += ((-d).exp() - 1.0).powi(2);
        }
    }
    let pairs = (n * n) as f64;
    backup / pairs + cfg.zeta * invariance / pairs
}

fn one_step_reduction() -> Verdict {
    let cfg = config(&owned(&["env.layout=maze8", "data.n_traj=100"]));
    let env = cfg.env.build().unwrap();
    let data = generate_stitch_dataset(&env, &cfg.generator(), Execution::Sequential).unwrap();
    let sampler = SamplerConfig {
        p: 1.0,
        ..SamplerConfig::default()
    };
    let loss_cfg = CriticLossConfig::default();
    let mut worst: f64 = 0.0;
    let mut all_one_step = true;
    for seed in 0..5 {
        let critic = QuasimetricCritic::new(
            env.obs_dim(),
            env.act_dim(),
            &NetShape::default(),
            Default::default(),
            seed,
        )
        .unwrap();
        let batch = assemble_batch(
            &data.trajectories,
            8,
            &sampler,
            &mut mqe::rng::stream(seed, "acceptance", 4),
        )
        .unwrap();
        all_one_step &= batch.k_prime.iter().all(|&k| k == 1) && batch.s_w == batch.s_next;
        let batched = combined_critic_loss(&critic, &batch, &loss_cfg)
            .unwrap()
            .total;
        worst = worst.max((batched - one_step_reference(&critic, &batch, &loss_cfg)).abs());
    }
    verdict(
        all_one_step && worst <= 1e-12,
        format!("B = 8, 5 critics, max |combined - one-step reference| = {worst:.2e}"),
    )
}

// ---------------------------------------------------------------- 5 and 9

fn maze8_overrides() -> Vec<String> {
    owned(&[
        "env.layout=maze8",
        "env.encoding=onehot",
        "data.policy=noisy_local_expert",
        "data.max_len=8",
        "total_steps=50000",
        "eval_every=50000",
        "seed=0",
    ])
}

fn distance_recovery(trial: &Trial, data: &mqe::Dataset) -> Verdict {
    let maze = trial.env.layout();
    let covered: BTreeSet<Cell> = data
        .trajectories
        .iter()
        .flat_map(|t| t.observations.iter().filter_map(|o| maze.decode(o)))
        .collect();
    let full = covered.len() == maze.free_cells().len();
    let rhos: Vec<f64> = trial
        .tasks
        .iter()
        .map(|t| {
            distance_correlation(&trial.critic, maze, goal_cell(t))
                .unwrap()
                .0
        })
        .collect();
    let rates: Vec<f64> = trial.report.tasks.iter().map(|t| t.rate).collect();
    let passed = full
        && rhos.iter().all(|&r| r >= 0.9)
        && rates.iter().all(|&r| r >= 0.9)
        && trial.train_time < Duration::from_secs(15 * 60);
    verdict(
        passed,
        format!(
            "coverage {}/{}, spearman {}, greedy success {} (50 episodes each), training {}",
            covered.len(),
            maze.free_cells().len(),
            fmt_list(&rhos, 3),
            fmt_list(&rates, 2),
            secs(trial.train_time)
        ),
    )
}

fn heatmap_structure(trial: &Trial) -> Verdict {
    let maze = trial.env.layout();
    let dir = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();
    let mut passed = true;
    for t in &trial.tasks {
        let goal = goal_cell(t);
        let grid =
            export_heatmap(&trial.critic, maze, goal, &dir.path().join("heatmap.csv")).unwrap();
        let at_goal = grid[goal.y as usize][goal.x as usize].unwrap();
        let min = grid
            .iter()
            .flatten()
            .flatten()
            .fold(f64::INFINITY, |a, &b| a.min(b));
        let oracle = bfs_oracle(maze, goal).unwrap();
        let bad = heatmap_monotonicity_violations(&grid, maze, &oracle);
        passed &= at_goal <= 1e-9 && at_goal <= min && bad.is_empty();
        notes.push(format!(
            "goal {goal}: d(g,g) {at_goal:.1e}, minimum at goal {}, {} decreasing corridor edges",
            at_goal <= min,
            bad.len()
        ));
    }
    verdict(
        passed,
        format!("maze8 critic from criterion 5; {}", notes.join("; ")),
    )
}

fn fmt_list(v: &[f64], digits: usize) -> String {
    let items: Vec<String> = v.iter().map(|x| format!("{x:.digits$}")).collect();
    format!("[{}]", items.join(", "))
}

// ---------------------------------------------------------------- 6 and 7

fn stitch_overrides(seed: u64, extra: &[&str]) -> Vec<String> {
    let mut o = owned(&["env.layout=maze12", "env.encoding=onehot", "data.max_len=6"]);
    o.push(format!("total_steps={STITCH_STEPS}"));
    o.push(format!("eval_every={STITCH_STEPS}"));
    o.push(format!("seed={seed}"));
    o.extend(owned(extra));
    o
}

/// Aggregate success per seed for one configuration.
struct Arm {
    name: &'static str,
    rates: Vec<f64>,
    slowest: Duration,
}

impl Arm {
    fn mean(&self) -> f64 {
        self.rates.iter().sum::<f64>() / self.rates.len() as f64
    }

    fn describe(&self) -> String {
        format!(
            "{} {:.3} {}",
            self.name,
            self.mean(),
            fmt_list(&self.rates, 2)
        )
    }
}

fn run_arm(name: &'static str, extra: &[&str], tasks_ok: &mut bool) -> Arm {
    let mut rates = Vec::new();
    let mut slowest = Duration::ZERO;
    for seed in STITCH_SEEDS {
        let (trial, _) = run_trial(&stitch_overrides(seed, extra));
        *tasks_ok &= trial
            .tasks
            .iter()
            .all(|t| t.oracle_steps.unwrap_or(0) >= 24);
        rates.push(trial.report.aggregate.rate);
        slowest = slowest.max(trial.train_time);
        eprintln!(
            "  [{name} seed {seed}] aggregate {:.3} in {}",
            trial.report.aggregate.rate,
            secs(trial.train_time)
        );
    }
    Arm {
        name,
        rates,
        slowest,
    }
}

struct StitchArms {
    mqe: Arm,
    /// p = 1 and ζ = 0
    ablations: Option<(Arm, Arm)>,
    /// uniform and fixed waypoints
    waypoints: Option<(Arm, Arm)>,
    tasks_ok: bool,
}

fn stitch_arms(ablations: bool, waypoints: bool) -> StitchArms {
    let mut tasks_ok = true;
    let mqe = run_arm("mqe", &[], &mut tasks_ok);
    let ablations = ablations.then(|| {
        (
            run_arm("p=1", &["sampler.p=1"], &mut tasks_ok),
            run_arm("zeta=0", &["critic_loss.zeta=0"], &mut tasks_ok),
        )
    });
    let waypoints = waypoints.then(|| {
        (
            run_arm("uniform", &["sampler.waypoint=uniform"], &mut tasks_ok),
            run_arm("fixed:3", &["sampler.waypoint=fixed:3"], &mut tasks_ok),
        )
    });
    StitchArms {
        mqe,
        ablations,
        waypoints,
        tasks_ok,
    }
}

fn stitching(mqe: &Arm, (one_step, no_invariance): &(Arm, Arm), tasks_ok: bool) -> Verdict {
    let m = mqe.mean();
    let slowest = [mqe, one_step, no_invariance]
        .iter()
        .map(|a| a.slowest)
        .max()
        .unwrap();
    let passed = tasks_ok
        && m >= 0.5
        && m > one_step.mean()
        && m > no_invariance.mean()
        && slowest < Duration::from_secs(30 * 60);
    verdict(
        passed,
        format!(
            "maze12, L = 6, 5 tasks (BFS >= 24: {tasks_ok}) x 50 episodes, {} seeds, T = {STITCH_STEPS}; mean aggregate success {}; {}; {}; slowest run {}",
            STITCH_SEEDS.len(),
            mqe.describe(),
            one_step.describe(),
            no_invariance.describe(),
            secs(slowest)
        ),
    )
}

fn waypoint_ablation(geometric: &Arm, (uniform, fixed): &(Arm, Arm)) -> Verdict {
    let (g, u, f) = (geometric.mean(), uniform.mean(), fixed.mean());
    verdict(
        // ties are allowed only between geometric and uniform
        g >= u && u > f,
        format!(
            "mean aggregate success over {} seeds: geometric {g:.3} >= uniform {u:.3} > fixed:3 {f:.3}; per seed {}; {}; {}",
            STITCH_SEEDS.len(),
            geometric.describe(),
            uniform.describe(),
            fixed.describe()
        ),
    )
}

// ---------------------------------------------------------------- 8

fn cli_pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let out = dir.to_str().unwrap();
    let settings = [
        "--seed",
        "11",
        "--set",
        "total_steps=200",
        "--set",
        "eval_every=50",
        "--set",
        "data.n_traj=300",
    ];
    for cmd in ["gen-data", "train", "eval"] {
        let status = Command::new(env!("CARGO_BIN_EXE_mqe"))
            .args([cmd, "--out", out])
            .args(settings)
            .output()
            .unwrap();
        assert!(
            status.status.success(),
            "{cmd}: {}",
            String::from_utf8_lossy(&status.stderr)
        );
    }
    [
        "dataset.jsonl",
        "metrics.csv",
        "checkpoint.json",
        "eval.csv",
        "distance_correlation.csv",
    ]
    .iter()
    .map(|f| (f.to_string(), fs::read(dir.join(f)).unwrap()))
    .collect()
}

fn determinism() -> Verdict {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = cli_pipeline(a.path());
    let second = cli_pipeline(b.path());
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.as_str())
        .collect();
    verdict(
        differing.is_empty(),
        format!(
            "two gen-data/train/eval runs with seed 11: {} files compared, differing: {:?}",
            first.len(),
            differing
        ),
    )
}

// ---------------------------------------------------------------- driver

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; only filters matter here
    let args: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let only: Option<BTreeSet<u32>> = std::env::var("MQE_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |k: u32| only.as_ref().is_none_or(|s| s.contains(&k));
    let names = [
        "quasimetric axioms",
        "gradient oracle",
        "sampler distributions",
        "one-step reduction",
        "oracle distance recovery",
        "stitching",
        "waypoint-distribution ablation",
        "determinism",
        "heatmap structure",
    ];

    let mut results: Vec<(u32, Verdict)> = Vec::new();
    let mut record = |k: u32, v: Verdict| {
        let tag = if v.passed { "PASS" } else { "FAIL" };
        println!(
            "{tag} criterion {k} ({}): {}",
            names[k as usize - 1],
            v.detail
        );
        results.push((k, v));
    };
    if wanted(1) {
        record(1, axioms());
    }
    if wanted(2) {
        record(2, gradients());
    }
    if wanted(3) {
        record(3, samplers());
    }
    if wanted(4) {
        record(4, one_step_reduction());
    }
    let maze8 = (wanted(5) || wanted(9)).then(|| run_trial(&maze8_overrides()));
    if let (true, Some((trial, data))) = (wanted(5), &maze8) {
        record(5, distance_recovery(trial, data));
    }
    if wanted(6) || wanted(7) {
        let arms = stitch_arms(wanted(6), wanted(7));
        if let (true, Some(a)) = (wanted(6), &arms.ablations) {
            record(6, stitching(&arms.mqe, a, arms.tasks_ok));
        }
        if let (true, Some(a)) = (wanted(7), &arms.waypoints) {
            record(7, waypoint_ablation(&arms.mqe, a));
        }
    }
    if wanted(8) {
        record(8, determinism());
    }
    if let (true, Some((trial, _))) = (wanted(9), &maze8) {
        record(9, heatmap_structure(trial));
    }

    let passed = results.iter().filter(|r| r.1.passed).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    let strict = std::env::var("MQE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && passed < results.len() {
        std::process::exit(1);
    }
}
