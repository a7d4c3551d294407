use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use mqe::config::{ConfigError, RunConfig};
use mqe::env::{dataset_load, dataset_save, generate_stitch_dataset, DatasetError, EnvError};
use mqe::eval::{
    bfs_oracle, distance_correlation, evaluate_suite, export_heatmap, value_iteration_oracle,
    EvalError, GoalPolicy, GreedyCriticPolicy, State,
};
use mqe::par::Execution;
use mqe::selftest;
use mqe::trainer::{metrics_csv, Checkpoint, TrainError, Trainer};
use mqe::{Cell, Env};

#[derive(Parser)]
#[command(
    name = "mqe",
    version,
    about = "Multistep quasimetric estimation on toy mazes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Clone)]
struct Common {
    /// flat key = value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// override one configuration key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// shorthand for --set seed=N
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a stitch-style offline dataset
    GenData,
    /// Train critic (and policy for continuous actions) on a dataset
    Train {
        /// dataset file [default: OUT/dataset.jsonl]
        #[arg(long)]
        data: Option<PathBuf>,
        /// continue from this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the configured tasks
    Eval {
        /// [default: OUT/checkpoint.json]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export the learned d(., goal) grid
    Heatmap {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// goal cell as x,y [default: heatmap.goal, else the first task goal]
        #[arg(long)]
        goal: Option<String>,
    },
    /// Cross-check the shortest-path oracles and, if present, dataset dynamics
    OracleCheck {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Quasimetric axioms, loss gradient checks and sampler distribution tests
    Selftest,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Heatmap { .. } => "heatmap",
            Command::OracleCheck { .. } => "oracle-check",
            Command::Selftest => "selftest",
        }
    }
}

/// Failure with a stable kind and exit code.
struct Failure {
    kind: &'static str,
    code: u8,
    message: String,
}

impl Failure {
    fn new(kind: &'static str, code: u8, message: impl ToString) -> Self {
        Self {
            kind,
            code,
            message: message.to_string(),
        }
    }
    fn io(path: &Path, e: impl ToString) -> Self {
        Self::new("io", 4, format!("{}: {}", path.display(), e.to_string()))
    }
    fn check(message: impl ToString) -> Self {
        Self::new("check_failed", 6, message)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::UnknownKey(_) => Self::new("unknown_key", 3, e),
            ConfigError::Io { .. } => Self::new("io", 4, e),
            _ => Self::new("invalid_config", 3, e),
        }
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } => Self::new("io", 4, e),
            _ => Self::new("invalid_dataset", 5, e),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Io { .. } => Self::new("io", 4, e),
            TrainError::Config(_) => Self::new("invalid_config", 3, e),
            _ => Self::new("invariant_violation", 5, e),
        }
    }
}

impl From<EnvError> for Failure {
    fn from(e: EnvError) -> Self {
        Self::new("invalid_config", 3, e)
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io { .. } => Self::new("io", 4, e),
            _ => Self::new("invariant_violation", 5, e),
        }
    }
}

fn sha256_file(path: &Path) -> Result<String, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::io(path, e))
}

struct Run {
    config: RunConfig,
    overrides: Vec<String>,
    out: PathBuf,
    artifacts: Vec<PathBuf>,
    dataset_digest: Option<String>,
}

impl Run {
    fn artifact(&mut self, name: &str, text: &str) -> Result<PathBuf, Failure> {
        let path = self.out.join(name);
        write(&path, text)?;
        self.artifacts.push(path.clone());
        Ok(path)
    }

    fn manifest(&self, command: &str) -> Result<(), Failure> {
        let config: Map<String, Value> = self
            .config
            .entries()
            .into_iter()
            .map(|(k, v)| (k, Value::String(v)))
            .collect();
        let mut artifacts = Vec::new();
        for p in &self.artifacts {
            let name = p.strip_prefix(&self.out).unwrap_or(p).display().to_string();
            artifacts.push(json!({ "path": name, "sha256": sha256_file(p)? }));
        }
        let manifest = json!({
            "command": command,
            "seed": self.config.train.seed,
            "config": config,
            "overrides": self.overrides,
            "dataset_digest": self.dataset_digest,
            "artifacts": artifacts,
        });
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        write(&self.out.join(format!("manifest_{command}.json")), &text)
    }

    fn env(&self) -> Result<Env, Failure> {
        Ok(self.config.env.build()?)
    }

    fn load_checkpoint(&self, path: &Option<PathBuf>, env: &Env) -> Result<Checkpoint, Failure> {
        let path = path
            .clone()
            .unwrap_or_else(|| self.out.join("checkpoint.json"));
        if !path.exists() {
            return Err(Failure::io(&path, "no such file"));
        }
        let ckpt = Checkpoint::load(&path)?;
        if ckpt.env_digest != env.digest() {
            return Err(Failure::new(
                "invariant_violation",
                5,
                format!(
                    "checkpoint {} was trained on a different environment",
                    path.display()
                ),
            ));
        }
        Ok(ckpt)
    }
}

fn gen_data(run: &mut Run) -> Result<(), Failure> {
    let env = run.env()?;
    let dataset = generate_stitch_dataset(&env, &run.config.generator(), Execution::Parallel)?;
    let path = run.out.join("dataset.jsonl");
    dataset_save(&dataset, &path)?;
    run.artifacts.push(path.clone());
    run.dataset_digest = Some(sha256_file(&path)?);
    println!(
        "wrote {} ({} trajectories, {} transitions)",
        path.display(),
        dataset.trajectories.len(),
        dataset.num_transitions()
    );
    Ok(())
}

fn train(run: &mut Run, data: Option<PathBuf>, resume: Option<PathBuf>) -> Result<(), Failure> {
    let data = data.unwrap_or_else(|| run.out.join("dataset.jsonl"));
    if !data.exists() {
        return Err(Failure::io(&data, "no such file"));
    }
    let dataset = dataset_load(&data)?;
    run.dataset_digest = Some(sha256_file(&data)?);
    let config = run.config.train.clone();
    let mut trainer = match &resume {
        Some(p) => Trainer::resume(&Checkpoint::load(p)?, config, &dataset)?,
        None => Trainer::new(config, &dataset)?,
    };
    let out = run.out.clone();
    let mut saved = Vec::new();
    let result = trainer.run(|ckpt| {
        let path = out.join(format!("checkpoint_{}.json", ckpt.step));
        ckpt.save(&path)?;
        saved.push(path);
        Ok(())
    })?;
    run.artifacts.extend(saved);
    run.artifact("metrics.csv", &metrics_csv(&result.metrics))?;
    let ckpt = run.out.join("checkpoint.json");
    result.checkpoint.save(&ckpt)?;
    run.artifacts.push(ckpt);
    if let Some(last) = result.metrics.last() {
        println!(
            "step {} critic_loss {:.6} invariance_loss {:.6}",
            last.step, last.critic_loss, last.invariance_loss
        );
    }
    Ok(())
}

fn eval(run: &mut Run, checkpoint: Option<PathBuf>) -> Result<(), Failure> {
    let env = run.env()?;
    let ckpt = run.load_checkpoint(&checkpoint, &env)?;
    let critic = ckpt.critic()?;
    let tasks = run.config.tasks(&env)?;
    let cfg = run.config.eval_config();
    let policy = ckpt.policy()?;
    let greedy = GreedyCriticPolicy(&critic);
    let chosen: &dyn GoalPolicy = match (&env, &policy) {
        (Env::Point(_), Some(p)) => p,
        (Env::Point(_), None) => {
            return Err(Failure::new(
                "invariant_violation",
                5,
                "checkpoint has no policy",
            ));
        }
        (Env::Grid(_), _) => &greedy,
    };
    let report = evaluate_suite(chosen, &env, &tasks, &cfg, Execution::Parallel)?;
    run.artifact("eval.csv", &report.to_csv())?;
    if let Env::Grid(maze) = &env {
        let mut table = String::from("goal,spearman_rho\n");
        for t in &tasks {
            if let State::Cell(g) = t.goal {
                let (rho, _) = distance_correlation(&critic, maze, g)?;
                table.push_str(&format!("\"{g}\",{rho}\n"));
            }
        }
        run.artifact("distance_correlation.csv", &table)?;
    }
    print!("{}", report.to_csv());
    Ok(())
}

fn heatmap(
    run: &mut Run,
    checkpoint: Option<PathBuf>,
    goal: Option<String>,
) -> Result<(), Failure> {
    let env = run.env()?;
    let Env::Grid(maze) = &env else {
        return Err(Failure::new(
            "invalid_config",
            3,
            "heatmap needs env.kind = grid",
        ));
    };
    let ckpt = run.load_checkpoint(&checkpoint, &env)?;
    let goal: Cell = match goal {
        Some(g) => g
            .parse()
            .map_err(|e: String| Failure::new("invalid_config", 3, e))?,
        None => match run.config.heatmap_goal {
            Some(g) => g,
            None => match run.config.tasks(&env)?.first().map(|t| t.goal) {
                Some(State::Cell(g)) => g,
                _ => return Err(Failure::new("invalid_config", 3, "no heatmap goal")),
            },
        },
    };
    let path = run.out.join("heatmap.csv");
    export_heatmap(&ckpt.critic()?, maze, goal, &path)?;
    run.artifacts.push(path.clone());
    println!("wrote {} (goal {goal})", path.display());
    Ok(())
}

fn oracle_check(run: &mut Run, data: Option<PathBuf>) -> Result<(), Failure> {
    let env = run.env()?;
    let maze = env.layout();
    let mut table =
        String::from("goal,reachable,max_steps,bellman_consistent,value_iteration_agrees\n");
    let mut failures = 0;
    for g in maze.free_cells() {
        let bfs = bfs_oracle(maze, g)?;
        let vi = value_iteration_oracle(maze, g)?;
        let bellman = bfs.is_bellman_consistent(maze);
        let agree = bfs == vi;
        if !(bellman && agree) {
            failures += 1;
        }
        let reachable = bfs.steps.iter().filter(|s| s.is_some()).count();
        table.push_str(&format!(
            "\"{g}\",{reachable},{},{bellman},{agree}\n",
            bfs.max_steps()
        ));
    }
    run.artifact("oracle_check.csv", &table)?;
    println!(
        "{} goals checked, {failures} failures",
        maze.free_cells().len()
    );
    let data = data.or_else(|| Some(run.out.join("dataset.jsonl")).filter(|p| p.exists()));
    if let Some(path) = data {
        let dataset = dataset_load(&path)?;
        run.dataset_digest = Some(sha256_file(&path)?);
        if let Some((t, i)) = dataset.first_inconsistency() {
            return Err(Failure::check(format!(
                "trajectory {t} transition {i} does not follow the environment dynamics"
            )));
        }
        println!("dataset {} is dynamics-consistent", path.display());
    }
    if failures > 0 {
        return Err(Failure::check(format!("{failures} oracle maps failed")));
    }
    Ok(())
}

fn selftest_cmd(run: &mut Run) -> Result<(), Failure> {
    let results = selftest::run_all(run.config.train.seed);
    let text: String = results.iter().map(|r| format!("{r}\n")).collect();
    print!("{text}");
    run.artifact("selftest.txt", &text)?;
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure::check(format!("{failed} selftest suites failed")));
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let common = cli.common;
    let mut config = match &common.config {
        Some(p) if !p.exists() => return Err(Failure::io(p, "no such file")),
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    config.apply_overrides(&overrides)?;
    config.train.validate()?;
    fs::create_dir_all(&common.out).map_err(|e| Failure::io(&common.out, e))?;
    let mut run = Run {
        config,
        overrides,
        out: common.out,
        artifacts: Vec::new(),
        dataset_digest: None,
    };
    let name = cli.command.name();
    let result = match cli.command {
        Command::GenData => gen_data(&mut run),
        Command::Train { data, resume } => train(&mut run, data, resume),
        Command::Eval { checkpoint } => eval(&mut run, checkpoint),
        Command::Heatmap { checkpoint, goal } => heatmap(&mut run, checkpoint, goal),
        Command::OracleCheck { data } => oracle_check(&mut run, data),
        Command::Selftest => selftest_cmd(&mut run),
    };
    run.manifest(name)?;
    result
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("").to_string();
            let f = Failure::new("usage", 2, first.trim_start_matches("error: "));
            report(&f);
            return ExitCode::from(f.code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            report(&f);
            ExitCode::from(f.code)
        }
    }
}

fn report(f: &Failure) {
    eprintln!(
        "error kind={} code={} message={}",
        f.kind,
        f.code,
        serde_json::to_string(&f.message).expect("string serializes")
    );
}
