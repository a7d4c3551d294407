//! Built-in checks run by `mqe selftest`: quasimetric axioms on random
//! embeddings, finite-difference checks of every loss, and goodness-of-fit of
//! the goal and waypoint samplers.

use std::fmt;

use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::env::{ActionSpace, GridAction};
use crate::losses::{
    action_invariance_loss, combined_critic_loss, critic_multistep_loss,
    critic_multistep_loss_with_targets, multistep_targets, policy_loss, CriticLossConfig,
    GaussianPolicy, InvariancePairing, PolicyLossConfig,
};
use crate::nn::{finite_diff_check, Matrix, NetShape};
use crate::quasimetric::{mrn_distance, MrnConfig, QuasimetricCritic};
use crate::rng;
use crate::sampling::{
    sample_future_goal, sample_waypoint_offset, SamplerConfig, TrainBatch, Trajectory,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

fn gaussian_vec<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect()
}

/// Largest violations of nonnegativity, identity and the triangle inequality
/// over `samples` random triples.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AxiomReport {
    pub min_distance: f64,
    pub max_self_distance: f64,
    pub max_triangle_excess: f64,
}

pub fn axiom_report(samples: usize, cfg: &MrnConfig, seed: u64) -> AxiomReport {
    let mut r = rng::stream(seed, "axioms", 0);
    let dim = cfg.embedding_dim();
    let mut out = AxiomReport {
        min_distance: f64::INFINITY,
        max_self_distance: 0.0,
        max_triangle_excess: f64::NEG_INFINITY,
    };
    // independent triples plus chains of short steps, where the triangle
    // inequality is nearly tight
    let scales = [1.0, 1e-2, 1e-6];
    for k in 0..samples {
        let x = gaussian_vec(dim, &mut r);
        let (y, z) = if k % 2 == 0 {
            (gaussian_vec(dim, &mut r), gaussian_vec(dim, &mut r))
        } else {
            let s = scales[(k / 2) % scales.len()];
            let y: Vec<f64> = x
                .iter()
                .zip(gaussian_vec(dim, &mut r))
                .map(|(a, n)| a + s * n)
                .collect();
            // every fourth chain is collinear, which makes the inequality an equality
            let step = if k % 4 == 1 {
                y.iter().zip(&x).map(|(a, b)| a - b).collect()
            } else {
                gaussian_vec(dim, &mut r)
                    .iter()
                    .map(|n| s * n)
                    .collect::<Vec<_>>()
            };
            let z: Vec<f64> = y.iter().zip(step).map(|(a, d)| a + d).collect();
            (y, z)
        };
        let d = |a: &[f64], b: &[f64]| mrn_distance(a, b, cfg).expect("matching dimensions");
        let (xy, yz, xz) = (d(&x, &y), d(&y, &z), d(&x, &z));
        out.min_distance = out.min_distance.min(xy).min(d(&y, &x));
        out.max_self_distance = out.max_self_distance.max(d(&x, &x));
        out.max_triangle_excess = out.max_triangle_excess.max(xz - xy - yz);
    }
    out
}

pub fn axiom_suite(samples: usize, seed: u64) -> SuiteResult {
    let rep = axiom_report(samples, &MrnConfig::default(), seed);
    SuiteResult {
        name: "quasimetric axioms",
        passed: rep.min_distance >= 0.0
            && rep.max_self_distance <= 1e-12
            && rep.max_triangle_excess <= 1e-9,
        detail: format!(
            "{samples} triples, min d {:.3e}, max d(x,x) {:.3e}, max triangle excess {:.3e}",
            rep.min_distance, rep.max_self_distance, rep.max_triangle_excess
        ),
    }
}

/// A random grid-style batch: 2-d states, one-hot actions, `k' ≤ K`.
pub fn random_discrete_batch(size: usize, seed: u64) -> TrainBatch {
    let mut r = rng::stream(seed, "selftest-batch", 0);
    let mut rows = |n: usize| -> Matrix {
        let data = (0..size * n).map(|_| r.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(size, n, data).expect("shape")
    };
    let s = rows(2);
    let s_next = rows(2);
    let s_w = rows(2);
    let g = rows(2);
    let mut r = rng::stream(seed, "selftest-batch", 1);
    let actions: Vec<Vec<f64>> = (0..size)
        .map(|_| GridAction::ALL[r.random_range(0..5)].encode())
        .collect();
    let k_goal: Vec<usize> = (0..size).map(|_| r.random_range(1..10)).collect();
    let k_prime = k_goal.iter().map(|&k| r.random_range(1..=k)).collect();
    TrainBatch {
        s,
        a: Matrix::from_rows(&actions).expect("shape"),
        s_next,
        s_w,
        g,
        k_prime,
        k_goal,
        traj_index: vec![0; size],
        time_index: (0..size).collect(),
    }
}

/// Worst relative finite-difference error of each loss on a small random
/// critic and policy.
pub fn gradient_errors(probes: usize, step: f64, seed: u64) -> Vec<(&'static str, f64)> {
    let shape = NetShape {
        hidden_dims: vec![16, 16],
        ..NetShape::default()
    };
    let mrn = MrnConfig {
        components: 4,
        dim: 4,
    };
    let critic = QuasimetricCritic::new(2, 5, &shape, mrn, seed).expect("valid critic");
    let batch = random_discrete_batch(8, seed);
    let cfg = CriticLossConfig::default();
    let params = critic.flat_params();
    let with = |p: &[f64]| {
        let mut c = critic.clone();
        c.set_flat_params(p);
        c
    };

    let mut out = Vec::new();
    // targets are held fixed, as in the update
    let targets = multistep_targets(&critic, &batch, &cfg).expect("targets");
    let fixed = |c: &QuasimetricCritic| {
        critic_multistep_loss_with_targets(c, &batch, &cfg, &targets)
            .expect("loss")
            .value
    };
    let ms = critic_multistep_loss(&critic, &batch, &cfg).expect("loss");
    out.push((
        "multistep",
        finite_diff_check(
            |p| fixed(&with(p)),
            &params,
            &ms.grad.flat(),
            probes,
            step,
            seed,
        ),
    ));
    for pairing in [InvariancePairing::Cross, InvariancePairing::Matched] {
        let inv = action_invariance_loss(&critic, &batch, pairing).expect("loss");
        out.push((
            if pairing == InvariancePairing::Cross {
                "invariance"
            } else {
                "invariance (matched)"
            },
            finite_diff_check(
                |p| {
                    action_invariance_loss(&with(p), &batch, pairing)
                        .expect("loss")
                        .value
                },
                &params,
                &inv.grad.flat(),
                probes,
                step,
                seed,
            ),
        ));
    }
    let comb = combined_critic_loss(&critic, &batch, &cfg).expect("loss");
    out.push((
        "combined critic",
        finite_diff_check(
            |p| {
                let c = with(p);
                fixed(&c)
                    + cfg.zeta
                        * action_invariance_loss(&c, &batch, cfg.invariance_pairing)
                            .expect("loss")
                            .value
            },
            &params,
            &comb.grad.flat(),
            probes,
            step,
            seed,
        ),
    ));

    // continuous actions for the policy objective
    let ccritic = QuasimetricCritic::new(2, 2, &shape, mrn, seed + 10).expect("valid critic");
    let space = ActionSpace::Continuous { dim: 2, bound: 0.5 };
    let policy = GaussianPolicy::new(2, space, &shape, 0.2, seed + 20).expect("valid policy");
    let mut cbatch = random_discrete_batch(8, seed);
    let mut r = rng::stream(seed, "selftest-actions", 0);
    cbatch.a = Matrix::from_vec(8, 2, (0..16).map(|_| r.random_range(-0.5..0.5)).collect())
        .expect("shape");
    let pparams = policy.net.flat().to_vec();
    let with_policy = |p: &[f64]| {
        let mut q = policy.clone();
        q.net.flat_mut().copy_from_slice(p);
        q
    };
    let raw_cfg = PolicyLossConfig {
        normalize_ddpg_term: false,
        ..PolicyLossConfig::default()
    };
    let pl = policy_loss(&policy, &ccritic, &cbatch, &raw_cfg).expect("loss");
    out.push((
        "policy",
        finite_diff_check(
            |p| {
                policy_loss(&with_policy(p), &ccritic, &cbatch, &raw_cfg)
                    .expect("loss")
                    .value
            },
            &pparams,
            &pl.grad,
            probes,
            step,
            seed,
        ),
    ));
    // the normaliser is a constant during differentiation
    let norm_cfg = PolicyLossConfig::default();
    let pn = policy_loss(&policy, &ccritic, &cbatch, &norm_cfg).expect("loss");
    let scale = pl.ddpg_term;
    out.push((
        "policy (normalized)",
        finite_diff_check(
            |p| {
                let l = policy_loss(&with_policy(p), &ccritic, &cbatch, &raw_cfg).expect("loss");
                l.ddpg_term / scale + l.bc_term
            },
            &pparams,
            &pn.grad,
            probes,
            step,
            seed,
        ),
    ));
    out
}

pub fn gradient_suite(probes: usize, seed: u64) -> SuiteResult {
    let errs = gradient_errors(probes, 1e-4, seed);
    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    SuiteResult {
        name: "loss gradients",
        passed: worst < 1e-4,
        detail: errs
            .iter()
            .map(|(n, e)| format!("{n} {e:.2e}"))
            .collect::<Vec<_>>()
            .join(", "),
    }
}

/// Pearson chi-square p-value of `observed` counts against probabilities
/// `expected`; adjacent bins are pooled until each expects at least 5 draws.
pub fn chi_square_pvalue(observed: &[u64], expected: &[f64]) -> f64 {
    assert_eq!(observed.len(), expected.len());
    let n: u64 = observed.iter().sum();
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let mut acc = (0.0, 0.0);
    for (&o, &p) in observed.iter().zip(expected) {
        acc.0 += o as f64;
        acc.1 += p * n as f64;
        if acc.1 >= 5.0 {
            bins.push(acc);
            acc = (0.0, 0.0);
        }
    }
    if acc.1 > 0.0 || acc.0 > 0.0 {
        match bins.last_mut() {
            Some(last) => {
                last.0 += acc.0;
                last.1 += acc.1;
            }
            None => bins.push(acc),
        }
    }
    if bins.len() < 2 {
        return 1.0;
    }
    let stat: f64 = bins.iter().map(|(o, e)| (o - e) * (o - e) / e).sum();
    let dist = ChiSquared::new((bins.len() - 1) as f64).expect("positive degrees of freedom");
    1.0 - dist.cdf(stat)
}

/// `P(K = k)` for `k = 1..=max_offset`: geometric with the tail folded into
/// the last offset.
pub fn goal_offset_pmf(gamma: f64, max_offset: usize) -> Vec<f64> {
    (1..=max_offset)
        .map(|k| {
            if k < max_offset {
                (1.0 - gamma) * gamma.powi(k as i32 - 1)
            } else {
                gamma.powi(k as i32 - 1)
            }
        })
        .collect()
}

/// `P(k' = k)` for `k = 1..=k_goal` under the Bernoulli/geometric mixture.
pub fn waypoint_offset_pmf(lambda: f64, p: f64, k_goal: usize) -> Vec<f64> {
    let mut pmf = goal_offset_pmf(lambda, k_goal);
    for v in &mut pmf {
        *v *= 1.0 - p;
    }
    pmf[0] += p;
    pmf
}

/// Draw counts of `K` from position 0 of a trajectory with `len` states.
pub fn goal_offset_counts(gamma: f64, len: usize, draws: usize, seed: u64) -> Vec<u64> {
    let traj = Trajectory::new(vec![vec![0.0]; len], vec![vec![0.0]; len - 1], "selftest")
        .expect("valid trajectory");
    let mut r = rng::stream(seed, "selftest-goal", 0);
    let mut counts = vec![0u64; len - 1];
    for _ in 0..draws {
        let (_, k) = sample_future_goal(&traj, 0, gamma, &mut r).expect("long enough");
        counts[k - 1] += 1;
    }
    counts
}

pub fn waypoint_offset_counts(
    cfg: &SamplerConfig,
    k_goal: usize,
    draws: usize,
    seed: u64,
) -> Vec<u64> {
    let mut r = rng::stream(seed, "selftest-waypoint", 0);
    let mut counts = vec![0u64; k_goal];
    for _ in 0..draws {
        counts[sample_waypoint_offset(k_goal, cfg, &mut r) - 1] += 1;
    }
    counts
}

pub fn sampler_suite(draws: usize, seed: u64) -> SuiteResult {
    let gamma = 0.995;
    let len = 2001;
    let goal_p = chi_square_pvalue(
        &goal_offset_counts(gamma, len, draws, seed),
        &goal_offset_pmf(gamma, len - 1),
    );
    let cfg = SamplerConfig::default();
    let way_p = chi_square_pvalue(
        &waypoint_offset_counts(&cfg, 20, draws, seed),
        &waypoint_offset_pmf(cfg.lambda, cfg.p, 20),
    );
    let one_step = SamplerConfig { p: 1.0, ..cfg };
    let ones = waypoint_offset_counts(&one_step, 20, draws, seed)[0];
    SuiteResult {
        name: "sampler distributions",
        passed: goal_p > 0.01 && way_p > 0.01 && ones == draws as u64,
        detail: format!(
            "{draws} draws, goal offset p-value {goal_p:.3}, waypoint p-value {way_p:.3}, p=1 one-step share {:.4}",
            ones as f64 / draws as f64
        ),
    }
}

pub fn run_all(seed: u64) -> Vec<SuiteResult> {
    vec![
        axiom_suite(10_000, seed),
        gradient_suite(64, seed),
        sampler_suite(1_000_000, seed),
    ]
}
