//! Dense network engine: row-major matrices, multilayer perceptrons with an
//! explicit activation tape, exact backpropagation and Adam.
//!
//! Parameters of a network live in one flat `Vec<f64>`; named tensors are views
//! into it through a fixed layout, so optimizer state and gradients share the
//! same indexing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("non-finite gradient entry at index {index}")]
    NonFiniteGradient { index: usize },
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NnError> {
        if data.len() != rows * cols {
            return Err(NnError::ShapeMismatch {
                context: "Matrix::from_vec",
                expected: format!("{} entries", rows * cols),
                got: format!("{} entries", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Stacks equally long rows. An empty slice gives a 0×0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, NnError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(NnError::ShapeMismatch {
                    context: "Matrix::from_rows",
                    expected: format!("{cols} columns"),
                    got: format!("{} columns", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn hcat(a: &Matrix, b: &Matrix) -> Result<Matrix, NnError> {
        if a.rows != b.rows {
            return Err(NnError::ShapeMismatch {
                context: "Matrix::hcat",
                expected: format!("{} rows", a.rows),
                got: format!("{} rows", b.rows),
            });
        }
        let cols = a.cols + b.cols;
        let mut data = Vec::with_capacity(a.rows * cols);
        for i in 0..a.rows {
            data.extend_from_slice(a.row(i));
            data.extend_from_slice(b.row(i));
        }
        Ok(Matrix {
            rows: a.rows,
            cols,
            data,
        })
    }

    /// Rows `indices` of `self`, in order.
    pub fn gather_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Column range `[start, end)` as a new matrix.
    pub fn columns(&self, start: usize, end: usize) -> Matrix {
        let cols = end - start;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..end]);
        }
        Matrix {
            rows: self.rows,
            cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
        }
    }

    /// Value and derivative sharing one `tanh`.
    #[inline]
    fn apply_with_derivative(self, x: f64) -> (f64, f64) {
        match self {
            Activation::Relu => (x.max(0.0), if x > 0.0 { 1.0 } else { 0.0 }),
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                (
                    0.5 * x * (1.0 + t),
                    0.5 * (1.0 + t)
                        + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x),
                )
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            other => Err(format!("unknown activation `{other}` (expected gelu|relu)")),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
        })
    }
}

// sqrt(2/pi), tanh approximation of GELU
const GELU_C: f64 = 0.797_884_560_802_865_4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub layer_norm: bool,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims,
            output_dim,
            layer_norm: true,
            activation: Activation::Gelu,
        }
    }

    pub fn with_layer_norm(mut self, on: bool) -> Self {
        self.layer_norm = on;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.hidden_dims.is_empty() {
            return Err(NnError::InvalidSpec("hidden_dims must be non-empty".into()));
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(NnError::InvalidSpec("all layer widths must be >= 1".into()));
        }
        Ok(())
    }

    fn layout(&self) -> Vec<LayerLayout> {
        let mut dims = vec![self.input_dim];
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim);
        let n_layers = dims.len() - 1;
        let mut offset = 0;
        let mut layout = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let hidden = l + 1 < n_layers;
            let weight = offset;
            offset += fan_in * fan_out;
            let bias = offset;
            offset += fan_out;
            let norm = if hidden && self.layer_norm {
                let gain = offset;
                offset += 2 * fan_out;
                Some((gain, gain + fan_out))
            } else {
                None
            };
            layout.push(LayerLayout {
                fan_in,
                fan_out,
                weight,
                bias,
                norm,
                hidden,
            });
        }
        layout
    }

    pub fn num_params(&self) -> usize {
        self.layout().last().map_or(0, |l| l.bias + l.fan_out)
    }
}

/// Hidden-layer shape of a network whose input and output widths are fixed by
/// its role (encoder, policy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetShape {
    pub hidden_dims: Vec<usize>,
    pub layer_norm: bool,
    pub activation: Activation,
}

impl NetShape {
    pub fn spec(&self, input_dim: usize, output_dim: usize) -> MlpSpec {
        MlpSpec {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            output_dim,
            layer_norm: self.layer_norm,
            activation: self.activation,
        }
    }
}

impl Default for NetShape {
    fn default() -> Self {
        Self {
            hidden_dims: vec![64, 64, 64],
            layer_norm: true,
            activation: Activation::Gelu,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerLayout {
    fan_in: usize,
    fan_out: usize,
    weight: usize,
    bias: usize,
    /// (gain offset, shift offset)
    norm: Option<(usize, usize)>,
    hidden: bool,
}

/// Named tensor in a [`ParamStore`], as a range of the flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorView {
    pub name: String,
    pub shape: (usize, usize),
    pub offset: usize,
}

/// The parameters of one MLP in a flat vector plus the layout that names them.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    spec: MlpSpec,
    layout: Vec<LayerLayout>,
    data: Vec<f64>,
}

/// Intermediate values of a forward pass, sufficient for the exact backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    rows: usize,
    layers: Vec<LayerTape>,
}

#[derive(Debug, Clone)]
struct LayerTape {
    input: Matrix,
    /// normalized pre-activation (empty without layer norm)
    xhat: Vec<f64>,
    rstd: Vec<f64>,
    /// activation derivative at the pre-activation (empty for the output layer)
    act_grad: Vec<f64>,
}

impl ParamStore {
    /// Fan-in scaled uniform init, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero
    /// biases, unit layer-norm gains.
    pub fn init(spec: &MlpSpec, seed: u64) -> Result<Self, NnError> {
        spec.validate()?;
        let mut store = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in store.layout.clone() {
            let bound = 1.0 / (l.fan_in as f64).sqrt();
            for w in &mut store.data[l.weight..l.weight + l.fan_in * l.fan_out] {
                *w = rng.random_range(-bound..bound);
            }
            if let Some((gain, _)) = l.norm {
                store.data[gain..gain + l.fan_out].fill(1.0);
            }
        }
        Ok(store)
    }

    /// All-zero parameters (layer-norm gains included).
    pub fn zeros(spec: &MlpSpec) -> Result<Self, NnError> {
        spec.validate()?;
        let layout = spec.layout();
        let n = spec.num_params();
        Ok(Self {
            spec: spec.clone(),
            layout,
            data: vec![0.0; n],
        })
    }

    pub fn from_flat(spec: &MlpSpec, data: Vec<f64>) -> Result<Self, NnError> {
        let mut store = Self::zeros(spec)?;
        if data.len() != store.data.len() {
            return Err(NnError::ShapeMismatch {
                context: "ParamStore::from_flat",
                expected: format!("{} parameters", store.data.len()),
                got: format!("{} parameters", data.len()),
            });
        }
        store.data = data;
        Ok(store)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensors(&self) -> Vec<TensorView> {
        let mut out = Vec::new();
        for (i, l) in self.layout.iter().enumerate() {
            out.push(TensorView {
                name: format!("layer{i}.weight"),
                shape: (l.fan_in, l.fan_out),
                offset: l.weight,
            });
            out.push(TensorView {
                name: format!("layer{i}.bias"),
                shape: (1, l.fan_out),
                offset: l.bias,
            });
            if let Some((gain, shift)) = l.norm {
                out.push(TensorView {
                    name: format!("layer{i}.norm_gain"),
                    shape: (1, l.fan_out),
                    offset: gain,
                });
                out.push(TensorView {
                    name: format!("layer{i}.norm_shift"),
                    shape: (1, l.fan_out),
                    offset: shift,
                });
            }
        }
        out
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.tensors()
            .into_iter()
            .find(|t| t.name == name)
            .map(|t| &self.data[t.offset..t.offset + t.shape.0 * t.shape.1])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let t = self.tensors().into_iter().find(|t| t.name == name)?;
        Some(&mut self.data[t.offset..t.offset + t.shape.0 * t.shape.1])
    }

    fn check_input(&self, input: &Matrix) -> Result<(), NnError> {
        if input.cols != self.spec.input_dim {
            return Err(NnError::ShapeMismatch {
                context: "mlp forward",
                expected: format!("{} input columns", self.spec.input_dim),
                got: format!("{} columns", input.cols),
            });
        }
        Ok(())
    }

    /// Forward pass without recording a tape.
    pub fn predict(&self, input: &Matrix) -> Result<Matrix, NnError> {
        self.check_input(input)?;
        let mut x = input.clone();
        for l in &self.layout {
            let mut z = self.affine(l, &x);
            if l.hidden {
                if let Some((gain, shift)) = l.norm {
                    for i in 0..z.rows {
                        let row = z.row_mut(i);
                        let (mean, rstd) = moments(row);
                        for (k, v) in row.iter_mut().enumerate() {
                            *v = (*v - mean) * rstd * self.data[gain + k] + self.data[shift + k];
                        }
                    }
                }
                let act = self.spec.activation;
                z.data.iter_mut().for_each(|v| *v = act.apply(*v));
            }
            x = z;
        }
        Ok(x)
    }

    /// Forward pass recording everything the backward pass needs.
    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, Tape), NnError> {
        self.check_input(input)?;
        let mut tapes = Vec::with_capacity(self.layout.len());
        let mut x = input.clone();
        for l in &self.layout {
            let mut z = self.affine(l, &x);
            let mut tape = LayerTape {
                input: x,
                xhat: Vec::new(),
                rstd: Vec::new(),
                act_grad: Vec::new(),
            };
            if l.hidden {
                if let Some((gain, shift)) = l.norm {
                    tape.xhat = Vec::with_capacity(z.data.len());
                    tape.rstd = Vec::with_capacity(z.rows);
                    for i in 0..z.rows {
                        let row = z.row_mut(i);
                        let (mean, rstd) = moments(row);
                        tape.rstd.push(rstd);
                        for (k, v) in row.iter_mut().enumerate() {
                            let xh = (*v - mean) * rstd;
                            tape.xhat.push(xh);
                            *v = xh * self.data[gain + k] + self.data[shift + k];
                        }
                    }
                }
                let act = self.spec.activation;
                tape.act_grad = Vec::with_capacity(z.data.len());
                for v in z.data.iter_mut() {
                    let (y, dy) = act.apply_with_derivative(*v);
                    *v = y;
                    tape.act_grad.push(dy);
                }
            }
            tapes.push(tape);
            x = z;
        }
        let rows = input.rows;
        Ok((
            x,
            Tape {
                rows,
                layers: tapes,
            },
        ))
    }

    /// Exact gradients of `sum(output ⊙ output_grad)` with respect to the
    /// parameters (flat, same layout) and to the input.
    pub fn backward(
        &self,
        tape: &Tape,
        output_grad: &Matrix,
    ) -> Result<(Vec<f64>, Matrix), NnError> {
        let mut grads = vec![0.0; self.data.len()];
        let input_grad = self.backward_impl(tape, output_grad, &mut grads, true)?;
        Ok((grads, input_grad.expect("input gradient requested")))
    }

    /// Accumulates parameter gradients into `grads`, skipping the input gradient.
    pub fn backward_into(
        &self,
        tape: &Tape,
        output_grad: &Matrix,
        grads: &mut [f64],
    ) -> Result<(), NnError> {
        self.backward_impl(tape, output_grad, grads, false)
            .map(|_| ())
    }

    fn backward_impl(
        &self,
        tape: &Tape,
        output_grad: &Matrix,
        grads: &mut [f64],
        want_input: bool,
    ) -> Result<Option<Matrix>, NnError> {
        if output_grad.rows != tape.rows || output_grad.cols != self.spec.output_dim {
            return Err(NnError::ShapeMismatch {
                context: "mlp backward",
                expected: format!("{}x{}", tape.rows, self.spec.output_dim),
                got: format!("{}x{}", output_grad.rows, output_grad.cols),
            });
        }
        if grads.len() != self.data.len() || tape.layers.len() != self.layout.len() {
            return Err(NnError::ShapeMismatch {
                context: "mlp backward",
                expected: format!("{} parameters", self.data.len()),
                got: format!("{} parameters", grads.len()),
            });
        }
        let mut delta = output_grad.clone();
        for (depth, (l, lt)) in self.layout.iter().zip(&tape.layers).enumerate().rev() {
            if l.hidden {
                for (d, &g) in delta.data.iter_mut().zip(&lt.act_grad) {
                    *d *= g;
                }
                if let Some((gain, shift)) = l.norm {
                    let n = l.fan_out as f64;
                    for i in 0..delta.rows {
                        let xhat = &lt.xhat[i * l.fan_out..(i + 1) * l.fan_out];
                        let row = delta.row_mut(i);
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for k in 0..l.fan_out {
                            grads[gain + k] += row[k] * xhat[k];
                            grads[shift + k] += row[k];
                            let dxh = row[k] * self.data[gain + k];
                            row[k] = dxh;
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xhat[k];
                        }
                        let (m1, m2) = (sum_dxh / n, sum_dxh_xh / n);
                        let rstd = lt.rstd[i];
                        for k in 0..l.fan_out {
                            row[k] = rstd * (row[k] - m1 - xhat[k] * m2);
                        }
                    }
                }
            }
            // bias and weight gradients
            let w = &self.data[l.weight..l.weight + l.fan_in * l.fan_out];
            for i in 0..delta.rows {
                let d = delta.row(i);
                for (g, v) in grads[l.bias..l.bias + l.fan_out].iter_mut().zip(d) {
                    *g += v;
                }
                let x = lt.input.row(i);
                for (p, &xv) in x.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let gw = &mut grads[l.weight + p * l.fan_out..l.weight + (p + 1) * l.fan_out];
                    for (g, v) in gw.iter_mut().zip(d) {
                        *g += xv * v;
                    }
                }
            }
            if depth == 0 && !want_input {
                return Ok(None);
            }
            let mut next = Matrix::zeros(delta.rows, l.fan_in);
            for i in 0..delta.rows {
                let d = delta.row(i);
                let out = next.row_mut(i);
                for (p, o) in out.iter_mut().enumerate() {
                    *o = dot(d, &w[p * l.fan_out..(p + 1) * l.fan_out]);
                }
            }
            delta = next;
        }
        Ok(Some(delta))
    }

    fn affine(&self, l: &LayerLayout, x: &Matrix) -> Matrix {
        let w = &self.data[l.weight..l.weight + l.fan_in * l.fan_out];
        let b = &self.data[l.bias..l.bias + l.fan_out];
        let mut z = Matrix::zeros(x.rows, l.fan_out);
        for i in 0..x.rows {
            let out = z.row_mut(i);
            out.copy_from_slice(b);
            for (p, &xv) in x.row(i).iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wr = &w[p * l.fan_out..(p + 1) * l.fan_out];
                for (o, &wv) in out.iter_mut().zip(wr) {
                    *o += xv * wv;
                }
            }
        }
        z
    }
}

#[inline]
fn moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four independent lanes so the loop vectorizes
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

/// Bias-corrected Adam moments for one flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(n: usize, learning_rate: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam update. The gradient is checked for finiteness before anything is
/// modified.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<(), NnError> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(NnError::ShapeMismatch {
            context: "adam_step",
            expected: format!("{} entries", params.len()),
            got: format!("grads {} / state {}", grads.len(), state.m.len()),
        });
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(NnError::NonFiniteGradient { index });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2) = (state.beta1, state.beta2);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

/// Largest relative error between `analytic` and central finite differences
/// of `loss` over `probe_count` random coordinates of `params`.
///
/// Relative error is `|analytic - numeric| / (|numeric| + 1e-6)`, so a
/// gradient scaled by two reports ≈ 1.
pub fn finite_diff_check<F>(
    mut loss: F,
    params: &[f64],
    analytic: &[f64],
    probe_count: usize,
    step: f64,
    seed: u64,
) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch");
    if params.is_empty() {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.to_vec();
    let mut worst: f64 = 0.0;
    for _ in 0..probe_count {
        let k = rng.random_range(0..params.len());
        probe[k] = params[k] + step;
        let up = loss(&probe);
        probe[k] = params[k] - step;
        let down = loss(&probe);
        probe[k] = params[k];
        let numeric = (up - down) / (2.0 * step);
        let err = (analytic[k] - numeric).abs() / (numeric.abs() + 1e-6);
        worst = worst.max(err);
    }
    worst
}
