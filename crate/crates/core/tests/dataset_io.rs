use std::fs;

use mqe::env::{
    dataset_load, dataset_save, dataset_to_string, generate_stitch_dataset, BehaviorPolicy,
    DatasetError, GeneratorConfig,
};
use mqe::par::Execution;
use mqe::{Env, GridMaze, ObsEncoding, PointMaze};

fn grid() -> Env {
    Env::Grid(GridMaze::named("maze8", ObsEncoding::Coordinates).unwrap())
}

fn small(env: &Env, seed: u64) -> mqe::Dataset {
    let cfg = GeneratorConfig {
        n_traj: 40,
        seed,
        ..GeneratorConfig::default()
    };
    generate_stitch_dataset(env, &cfg, Execution::Parallel).unwrap()
}

#[test]
fn save_load_round_trip_grid_and_point() {
    let dir = tempfile::tempdir().unwrap();
    let point = Env::Point(
        PointMaze::new(
            GridMaze::named("maze8", ObsEncoding::Coordinates).unwrap(),
            0.5,
            0.25,
        )
        .unwrap(),
    );
    for env in [grid(), point] {
        let data = small(&env, 3);
        let path = dir.path().join("d.jsonl");
        dataset_save(&data, &path).unwrap();
        let back = dataset_load(&path).unwrap();
        assert_eq!(back, data);
        assert!(back.first_inconsistency().is_none());
    }
}

#[test]
fn fixed_seed_gives_identical_bytes() {
    let a = dataset_to_string(&small(&grid(), 7));
    let b = dataset_to_string(&small(&grid(), 7));
    assert_eq!(a, b);
    assert_ne!(a, dataset_to_string(&small(&grid(), 8)));
}

#[test]
fn truncated_file_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let text = dataset_to_string(&small(&grid(), 1));
    let lines: Vec<&str> = text.lines().collect();
    // cut the fourth line in half
    let mut cut = lines[..3].join("\n");
    cut.push('\n');
    cut.push_str(&lines[3][..lines[3].len() / 2]);
    fs::write(&path, cut).unwrap();
    match dataset_load(&path) {
        Err(DatasetError::Parse { line, .. }) => assert_eq!(line, 4),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn edited_digest_is_a_checksum_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let data = small(&grid(), 2);
    let text = dataset_to_string(&data);
    let digest = data.env_digest();
    let edited = text.replacen(&digest, &"0".repeat(digest.len()), 1);
    assert_ne!(edited, text);
    fs::write(&path, edited).unwrap();
    assert!(matches!(
        dataset_load(&path),
        Err(DatasetError::Checksum { .. })
    ));
}

#[test]
fn missing_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        dataset_load(&dir.path().join("absent.jsonl")),
        Err(DatasetError::Io { .. })
    ));
}

#[test]
fn short_segments_cannot_connect_far_tasks() {
    let env = Env::Grid(GridMaze::named("maze12", ObsEncoding::Coordinates).unwrap());
    let cfg = GeneratorConfig {
        max_len: 6,
        policy: BehaviorPolicy::NoisyLocalExpert,
        ..GeneratorConfig::default()
    };
    let data = generate_stitch_dataset(&env, &cfg, Execution::Parallel).unwrap();
    let maze = env.layout();
    // no trajectory spans more than 5 moves, far below the 24-step tasks
    for t in &data.trajectories {
        let first = maze.decode(&t.observations[0]).unwrap();
        let last = maze.decode(t.observations.last().unwrap()).unwrap();
        assert!((first.x - last.x).abs() + (first.y - last.y).abs() <= 5);
    }
    let covered: std::collections::BTreeSet<_> = data
        .trajectories
        .iter()
        .flat_map(|t| t.observations.iter().map(|o| maze.decode(o).unwrap()))
        .collect();
    assert_eq!(covered.len(), maze.free_cells().len());
}
