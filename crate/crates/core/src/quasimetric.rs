//! Metric residual network (MRN) quasimetric head and the distance-based
//! critic `d((s,a), g) = mrn(φ(s,a), ψ(g))`, `d(s, g) = mrn(ψ(s), ψ(g))`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Matrix, NetShape, NnError, ParamStore};
use crate::par::{self, Execution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuasimetricError {
    #[error("embedding length mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid MRN config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// `components` blocks of `dim` coordinates each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MrnConfig {
    pub components: usize,
    pub dim: usize,
}

impl Default for MrnConfig {
    fn default() -> Self {
        Self {
            components: 8,
            dim: 8,
        }
    }
}

impl MrnConfig {
    pub fn embedding_dim(&self) -> usize {
        self.components * self.dim
    }

    pub fn validate(&self) -> Result<(), QuasimetricError> {
        if self.components == 0 || self.dim == 0 {
            return Err(QuasimetricError::Config(
                "components and dim must both be >= 1".into(),
            ));
        }
        Ok(())
    }

    fn check(&self, v: &[f64]) -> Result<(), QuasimetricError> {
        if v.len() != self.embedding_dim() {
            return Err(QuasimetricError::Dimension {
                expected: self.embedding_dim(),
                got: v.len(),
            });
        }
        Ok(())
    }
}

/// `(1/N) Σ_k [ max_m relu(x_km - y_km) + ‖x_k - y_k‖₂ ]`.
pub fn mrn_distance(x: &[f64], y: &[f64], cfg: &MrnConfig) -> Result<f64, QuasimetricError> {
    cfg.check(x)?;
    cfg.check(y)?;
    Ok(mrn(x, y, cfg))
}

#[inline]
pub(crate) fn mrn(x: &[f64], y: &[f64], cfg: &MrnConfig) -> f64 {
    let mut total = 0.0;
    for (xb, yb) in x.chunks_exact(cfg.dim).zip(y.chunks_exact(cfg.dim)) {
        let mut asym: f64 = 0.0;
        let mut sq = 0.0;
        for (a, b) in xb.iter().zip(yb) {
            let d = a - b;
            asym = asym.max(d);
            sq += d * d;
        }
        total += asym + sq.sqrt();
    }
    total / cfg.components as f64
}

/// Accumulates `upstream · ∂mrn/∂x` into `gx` and `upstream · ∂mrn/∂y` into
/// `gy`. At the relu kink and at a zero-length block the subgradient is 0;
/// ties in the max go to the lowest index.
#[inline]
pub(crate) fn mrn_grad(
    x: &[f64],
    y: &[f64],
    cfg: &MrnConfig,
    upstream: f64,
    mut gx: Option<&mut [f64]>,
    mut gy: Option<&mut [f64]>,
) {
    let scale = upstream / cfg.components as f64;
    let m = cfg.dim;
    for k in 0..cfg.components {
        let xb = &x[k * m..(k + 1) * m];
        let yb = &y[k * m..(k + 1) * m];
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        let mut sq = 0.0;
        for (j, (a, b)) in xb.iter().zip(yb).enumerate() {
            let d = a - b;
            if d > best_val {
                best_val = d;
                best = j;
            }
            sq += d * d;
        }
        let norm = sq.sqrt();
        if let Some(gx) = gx.as_deref_mut() {
            let gb = &mut gx[k * m..(k + 1) * m];
            if best_val > 0.0 {
                gb[best] += scale;
            }
            if norm > 0.0 {
                for ((g, a), b) in gb.iter_mut().zip(xb).zip(yb) {
                    *g += scale * (a - b) / norm;
                }
            }
        }
        if let Some(gy) = gy.as_deref_mut() {
            let gb = &mut gy[k * m..(k + 1) * m];
            if best_val > 0.0 {
                gb[best] -= scale;
            }
            if norm > 0.0 {
                for ((g, a), b) in gb.iter_mut().zip(xb).zip(yb) {
                    *g -= scale * (a - b) / norm;
                }
            }
        }
    }
}

/// Gradient of `mrn_distance` with respect to both arguments.
pub fn mrn_distance_grad(
    x: &[f64],
    y: &[f64],
    cfg: &MrnConfig,
) -> Result<(Vec<f64>, Vec<f64>), QuasimetricError> {
    cfg.check(x)?;
    cfg.check(y)?;
    let mut gx = vec![0.0; x.len()];
    let mut gy = vec![0.0; y.len()];
    mrn_grad(x, y, cfg, 1.0, Some(&mut gx), Some(&mut gy));
    Ok((gx, gy))
}

/// All-pairs distances: entry `(i, j)` is `mrn(x_i, y_j)`.
pub fn pairwise_distances(x: &Matrix, y: &Matrix, cfg: &MrnConfig, exec: Execution) -> Matrix {
    let rows = par::map_range(exec, x.rows, |i| {
        let xi = x.row(i);
        (0..y.rows)
            .map(|j| mrn(xi, y.row(j), cfg))
            .collect::<Vec<_>>()
    });
    Matrix {
        rows: x.rows,
        cols: y.rows,
        data: rows.concat(),
    }
}

/// Backward pass of [`pairwise_distances`] for an upstream gradient `upstream`
/// of the same shape as its output. Either side may be skipped.
pub fn pairwise_backward(
    x: &Matrix,
    y: &Matrix,
    cfg: &MrnConfig,
    upstream: &Matrix,
    want_x: bool,
    want_y: bool,
    exec: Execution,
) -> (Option<Matrix>, Option<Matrix>) {
    let gx = want_x.then(|| {
        let rows = par::map_range(exec, x.rows, |i| {
            let mut g = vec![0.0; x.cols];
            for j in 0..y.rows {
                let u = upstream.get(i, j);
                if u != 0.0 {
                    mrn_grad(x.row(i), y.row(j), cfg, u, Some(&mut g), None);
                }
            }
            g
        });
        Matrix {
            rows: x.rows,
            cols: x.cols,
            data: rows.concat(),
        }
    });
    let gy = want_y.then(|| {
        let rows = par::map_range(exec, y.rows, |j| {
            let mut g = vec![0.0; y.cols];
            for i in 0..x.rows {
                let u = upstream.get(i, j);
                if u != 0.0 {
                    mrn_grad(x.row(i), y.row(j), cfg, u, None, Some(&mut g));
                }
            }
            g
        });
        Matrix {
            rows: y.rows,
            cols: y.cols,
            data: rows.concat(),
        }
    });
    (gx, gy)
}

/// `Q = V_g(g) · exp(-d)`.
pub fn q_from_distance(d: f64, v_gg: f64) -> f64 {
    v_gg * (-d).exp()
}

/// Parameter gradient of a [`QuasimetricCritic`], one flat vector per encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticGradient {
    pub psi: Vec<f64>,
    pub phi: Vec<f64>,
}

impl CriticGradient {
    pub fn zeros_like(critic: &QuasimetricCritic) -> Self {
        Self {
            psi: vec![0.0; critic.psi.len()],
            phi: vec![0.0; critic.phi.len()],
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.psi.clone();
        v.extend_from_slice(&self.phi);
        v
    }

    pub fn add_scaled(&mut self, other: &CriticGradient, scale: f64) {
        for (a, b) in self.psi.iter_mut().zip(&other.psi) {
            *a += scale * b;
        }
        for (a, b) in self.phi.iter_mut().zip(&other.phi) {
            *a += scale * b;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.psi.iter().chain(&self.phi).all(|&v| v == 0.0)
    }
}

/// State encoder ψ, state-action encoder φ (fed `[s | a]`) and the MRN head.
#[derive(Debug, Clone, PartialEq)]
pub struct QuasimetricCritic {
    pub mrn: MrnConfig,
    pub psi: ParamStore,
    pub phi: ParamStore,
    obs_dim: usize,
    act_dim: usize,
}

impl QuasimetricCritic {
    pub fn new(
        obs_dim: usize,
        act_dim: usize,
        shape: &NetShape,
        mrn: MrnConfig,
        seed: u64,
    ) -> Result<Self, QuasimetricError> {
        mrn.validate()?;
        let e = mrn.embedding_dim();
        let psi = ParamStore::init(&shape.spec(obs_dim, e), seed)?;
        let phi = ParamStore::init(&shape.spec(obs_dim + act_dim, e), seed.wrapping_add(1))?;
        Ok(Self {
            mrn,
            psi,
            phi,
            obs_dim,
            act_dim,
        })
    }

    /// Both encoders identically zero, so every distance is 0.
    pub fn zeros(
        obs_dim: usize,
        act_dim: usize,
        shape: &NetShape,
        mrn: MrnConfig,
    ) -> Result<Self, QuasimetricError> {
        mrn.validate()?;
        let e = mrn.embedding_dim();
        Ok(Self {
            mrn,
            psi: ParamStore::zeros(&shape.spec(obs_dim, e))?,
            phi: ParamStore::zeros(&shape.spec(obs_dim + act_dim, e))?,
            obs_dim,
            act_dim,
        })
    }

    pub fn from_parts(
        mrn: MrnConfig,
        psi: ParamStore,
        phi: ParamStore,
    ) -> Result<Self, QuasimetricError> {
        mrn.validate()?;
        let e = mrn.embedding_dim();
        if psi.spec().output_dim != e || phi.spec().output_dim != e {
            return Err(QuasimetricError::Dimension {
                expected: e,
                got: psi.spec().output_dim.min(phi.spec().output_dim),
            });
        }
        let obs_dim = psi.spec().input_dim;
        let act_dim =
            phi.spec()
                .input_dim
                .checked_sub(obs_dim)
                .ok_or(QuasimetricError::Dimension {
                    expected: obs_dim,
                    got: phi.spec().input_dim,
                })?;
        Ok(Self {
            mrn,
            psi,
            phi,
            obs_dim,
            act_dim,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn num_params(&self) -> usize {
        self.psi.len() + self.phi.len()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.psi.flat().to_vec();
        v.extend_from_slice(self.phi.flat());
        v
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let n = self.psi.len();
        self.psi.flat_mut().copy_from_slice(&flat[..n]);
        self.phi.flat_mut().copy_from_slice(&flat[n..]);
    }

    pub fn embed_states(&self, s: &Matrix) -> Result<Matrix, QuasimetricError> {
        Ok(self.psi.predict(s)?)
    }

    pub fn embed_state_actions(&self, s: &Matrix, a: &Matrix) -> Result<Matrix, QuasimetricError> {
        Ok(self.phi.predict(&Matrix::hcat(s, a)?)?)
    }

    pub fn d_state_goal(&self, s: &[f64], g: &[f64]) -> Result<f64, QuasimetricError> {
        let s = Matrix::from_rows(&[s, g])?;
        let e = self.embed_states(&s)?;
        Ok(mrn(e.row(0), e.row(1), &self.mrn))
    }

    pub fn d_stateaction_goal(
        &self,
        s: &[f64],
        a: &[f64],
        g: &[f64],
    ) -> Result<f64, QuasimetricError> {
        let left =
            self.embed_state_actions(&Matrix::from_rows(&[s])?, &Matrix::from_rows(&[a])?)?;
        let right = self.embed_states(&Matrix::from_rows(&[g])?)?;
        Ok(mrn(left.row(0), right.row(0), &self.mrn))
    }

    /// Row-wise `d(s_i, g_i)`.
    pub fn d_state_goal_batch(&self, s: &Matrix, g: &Matrix) -> Result<Vec<f64>, QuasimetricError> {
        let es = self.embed_states(s)?;
        let eg = self.embed_states(g)?;
        check_rows(es.rows, eg.rows)?;
        Ok((0..es.rows)
            .map(|i| mrn(es.row(i), eg.row(i), &self.mrn))
            .collect())
    }

    /// Row-wise `d((s_i, a_i), g_i)`.
    pub fn d_stateaction_goal_batch(
        &self,
        s: &Matrix,
        a: &Matrix,
        g: &Matrix,
    ) -> Result<Vec<f64>, QuasimetricError> {
        let el = self.embed_state_actions(s, a)?;
        let eg = self.embed_states(g)?;
        check_rows(el.rows, eg.rows)?;
        Ok((0..el.rows)
            .map(|i| mrn(el.row(i), eg.row(i), &self.mrn))
            .collect())
    }
}

fn check_rows(a: usize, b: usize) -> Result<(), QuasimetricError> {
    if a != b {
        return Err(QuasimetricError::Dimension {
            expected: a,
            got: b,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn worked_example_and_asymmetry() {
        let cfg = MrnConfig {
            components: 2,
            dim: 2,
        };
        let x = [1.0, 0.0, 2.0, 2.0];
        let y = [0.0, 1.0, 2.0, 0.0];
        let xy = mrn_distance(&x, &y, &cfg).unwrap();
        let yx = mrn_distance(&y, &x, &cfg).unwrap();
        assert!((xy - (1.0 + 2f64.sqrt() + 4.0) / 2.0).abs() < 1e-12);
        assert!((yx - (1.0 + 2f64.sqrt() + 2.0) / 2.0).abs() < 1e-12);
        assert!((xy - 3.2071).abs() < 1e-4 && (yx - 2.2071).abs() < 1e-4);
    }

    #[test]
    fn identity_is_exact_zero() {
        let cfg = MrnConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_vec(&mut rng, 64);
        assert_eq!(mrn_distance(&x, &x, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn dimension_mismatch() {
        let cfg = MrnConfig {
            components: 2,
            dim: 2,
        };
        assert!(matches!(
            mrn_distance(&[0.0; 4], &[0.0; 3], &cfg),
            Err(QuasimetricError::Dimension {
                expected: 4,
                got: 3
            })
        ));
    }

    #[test]
    fn q_from_distance_values() {
        assert_eq!(q_from_distance(0.0, 1.0), 1.0);
        assert!((q_from_distance(2f64.ln(), 1.0) - 0.5).abs() < 1e-15);
        let gamma: f64 = 0.995;
        let q = q_from_distance(10.0 * (1.0 / gamma).ln(), 1.0);
        assert!((q - gamma.powi(10)).abs() < 1e-12);
        assert!((q - 0.95111).abs() < 1e-5);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = MrnConfig {
            components: 4,
            dim: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let x = random_vec(&mut rng, 12);
            let y = random_vec(&mut rng, 12);
            let (gx, gy) = mrn_distance_grad(&x, &y, &cfg).unwrap();
            let mut both = x.clone();
            both.extend_from_slice(&y);
            let mut grad = gx.clone();
            grad.extend_from_slice(&gy);
            let err =
                finite_diff_check(|p| mrn(&p[..12], &p[12..], &cfg), &both, &grad, 64, 1e-6, 3);
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn pairwise_matches_loop_and_backward() {
        let cfg = MrnConfig {
            components: 2,
            dim: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Matrix::from_vec(3, 6, random_vec(&mut rng, 18)).unwrap();
        let y = Matrix::from_vec(4, 6, random_vec(&mut rng, 24)).unwrap();
        let d = pairwise_distances(&x, &y, &cfg, Execution::Parallel);
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(d.get(i, j), mrn(x.row(i), y.row(j), &cfg));
            }
        }
        let up = Matrix::from_vec(3, 4, random_vec(&mut rng, 12)).unwrap();
        let (gx, gy) = pairwise_backward(&x, &y, &cfg, &up, true, true, Execution::Sequential);
        let (gx, gy) = (gx.unwrap(), gy.unwrap());
        let mut ex = vec![0.0; 18];
        let mut ey = vec![0.0; 24];
        for i in 0..3 {
            for j in 0..4 {
                mrn_grad(
                    x.row(i),
                    y.row(j),
                    &cfg,
                    up.get(i, j),
                    Some(&mut ex[i * 6..(i + 1) * 6]),
                    Some(&mut ey[j * 6..(j + 1) * 6]),
                );
            }
        }
        for (a, b) in gx.data.iter().zip(&ex).chain(gy.data.iter().zip(&ey)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn small_critic(seed: u64) -> QuasimetricCritic {
        let shape = NetShape {
            hidden_dims: vec![16, 16],
            ..NetShape::default()
        };
        QuasimetricCritic::new(
            3,
            2,
            &shape,
            MrnConfig {
                components: 4,
                dim: 4,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn critic_self_distance_is_zero_and_batches_agree() {
        let critic = small_critic(2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s: Vec<Vec<f64>> = (0..6).map(|_| random_vec(&mut rng, 3)).collect();
        let a: Vec<Vec<f64>> = (0..6).map(|_| random_vec(&mut rng, 2)).collect();
        let g: Vec<Vec<f64>> = (0..6).map(|_| random_vec(&mut rng, 3)).collect();
        assert_eq!(critic.d_state_goal(&s[0], &s[0]).unwrap(), 0.0);
        let (sm, am, gm) = (
            Matrix::from_rows(&s).unwrap(),
            Matrix::from_rows(&a).unwrap(),
            Matrix::from_rows(&g).unwrap(),
        );
        let dsg = critic.d_state_goal_batch(&sm, &gm).unwrap();
        let dsag = critic.d_stateaction_goal_batch(&sm, &am, &gm).unwrap();
        for i in 0..6 {
            assert!((dsg[i] - critic.d_state_goal(&s[i], &g[i]).unwrap()).abs() < 1e-12);
            assert!(
                (dsag[i] - critic.d_stateaction_goal(&s[i], &a[i], &g[i]).unwrap()).abs() < 1e-12
            );
        }
    }

    #[test]
    fn zero_critic_distances_vanish() {
        let critic =
            QuasimetricCritic::zeros(3, 2, &NetShape::default(), MrnConfig::default()).unwrap();
        let d = critic
            .d_stateaction_goal(&[0.3, -1.0, 2.0], &[1.0, 0.0], &[5.0, 5.0, 5.0])
            .unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn critic_triangle_inequalities() {
        let critic = small_critic(8);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let s = random_vec(&mut rng, 3);
            let a = random_vec(&mut rng, 2);
            let g = random_vec(&mut rng, 3);
            let h = random_vec(&mut rng, 3);
            let dsg = critic.d_state_goal(&s, &g).unwrap();
            assert!(
                dsg <= critic.d_state_goal(&s, &h).unwrap()
                    + critic.d_state_goal(&h, &g).unwrap()
                    + 1e-9
            );
            let phi = critic
                .embed_state_actions(
                    &Matrix::from_rows(&[&s]).unwrap(),
                    &Matrix::from_rows(&[&a]).unwrap(),
                )
                .unwrap();
            let psi = critic
                .embed_states(&Matrix::from_rows(&[&h, &g]).unwrap())
                .unwrap();
            let lhs = critic.d_stateaction_goal(&s, &a, &g).unwrap();
            let rhs =
                mrn(phi.row(0), psi.row(0), &critic.mrn) + mrn(psi.row(0), psi.row(1), &critic.mrn);
            assert!(lhs <= rhs + 1e-9);
        }
    }

    proptest::proptest! {
        #[test]
        fn quasimetric_axioms(
            x in proptest::collection::vec(-3.0f64..3.0, 16),
            y in proptest::collection::vec(-3.0f64..3.0, 16),
            z in proptest::collection::vec(-3.0f64..3.0, 16),
        ) {
            let cfg = MrnConfig { components: 4, dim: 4 };
            let dxy = mrn(&x, &y, &cfg);
            proptest::prop_assert!(dxy >= 0.0);
            proptest::prop_assert!(mrn(&x, &x, &cfg) <= 1e-12);
            proptest::prop_assert!(mrn(&x, &z, &cfg) <= dxy + mrn(&y, &z, &cfg) + 1e-9);
        }
    }
}
