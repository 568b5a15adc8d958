//! Minimal dense-network numerical core.
//!
//! Everything is double precision and hand-differentiated: a `Net` is a stack
//! of affine layers with ReLU on hidden layers, parameters live in a flat
//! `ParamStore` with a deterministic layout, and the forward pass returns a
//! `Tape` that the backward pass consumes exactly once (enforced by move).

pub mod expectile;
pub mod gradcheck;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OmacError, Result};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Row-major dense matrix of f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// Horizontal concatenation [self | other].
    pub fn hcat(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows);
        let mut out = Matrix::zeros(self.rows, self.cols + other.cols);
        for r in 0..self.rows {
            out.row_mut(r)[..self.cols].copy_from_slice(self.row(r));
            out.row_mut(r)[self.cols..].copy_from_slice(other.row(r));
        }
        out
    }

    pub fn columns(&self, from: usize, to: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows, to - from);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[from..to]);
        }
        out
    }
}

/// Network shape: layer widths (input, hidden..., output), ReLU on hidden
/// layers, identity on the output unless `output_relu` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    #[serde(default)]
    pub output_relu: bool,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Self {
        MlpSpec {
            widths,
            output_relu: false,
        }
    }

    pub fn with_output_relu(widths: Vec<usize>) -> Self {
        MlpSpec {
            widths,
            output_relu: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(OmacError::Config(format!(
                "MlpSpec needs at least 2 widths, got {}",
                self.widths.len()
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(OmacError::Config("MlpSpec widths must be positive".into()));
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn n_params(&self) -> usize {
        (0..self.n_layers())
            .map(|l| self.widths[l] * self.widths[l + 1] + self.widths[l + 1])
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerSpan {
    w_off: usize,
    b_off: usize,
    fan_in: usize,
    fan_out: usize,
}

/// Flat parameter vector plus Adam moment state.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    pub values: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    pub t: u64,
    layout: Vec<LayerSpan>,
}

impl ParamStore {
    fn new(spec: &MlpSpec) -> Self {
        let mut layout = Vec::new();
        let mut off = 0;
        for l in 0..spec.n_layers() {
            let fan_in = spec.widths[l];
            let fan_out = spec.widths[l + 1];
            layout.push(LayerSpan {
                w_off: off,
                b_off: off + fan_in * fan_out,
                fan_in,
                fan_out,
            });
            off += fan_in * fan_out + fan_out;
        }
        ParamStore {
            values: vec![0.0; off],
            m: vec![0.0; off],
            v: vec![0.0; off],
            t: 0,
            layout,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn layer_w(&self, l: usize) -> &[f64] {
        let s = &self.layout[l];
        &self.values[s.w_off..s.w_off + s.fan_in * s.fan_out]
    }

    fn layer_b(&self, l: usize) -> &[f64] {
        let s = &self.layout[l];
        &self.values[s.b_off..s.b_off + s.fan_out]
    }

    /// Standard Adam with bias correction.
    pub fn adam_step(&mut self, grads: &[f64], lr: f64) -> Result<()> {
        if grads.len() != self.values.len() {
            return Err(OmacError::DimMismatch {
                expected: self.values.len(),
                got: grads.len(),
                context: "adam_step gradient length".into(),
            });
        }
        if let Some((i, &g)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(OmacError::NonFiniteGradient { index: i, value: g });
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for i in 0..self.values.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            self.values[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        Ok(())
    }
}

/// Cached activations from one forward pass; consumed by exactly one
/// backward pass (the tape is moved into `backward`).
pub struct Tape {
    batch_rows: usize,
    inputs: Vec<Matrix>,
    relu_outs: Vec<Option<Matrix>>,
}

/// A dense MLP: spec plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Net {
    pub spec: MlpSpec,
    pub store: ParamStore,
}

impl Net {
    /// Initialize with uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)] weights.
    pub fn new<R: Rng>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new(&spec);
        for l in 0..spec.n_layers() {
            let span = store.layout[l].clone();
            let bound = 1.0 / (span.fan_in as f64).sqrt();
            for i in 0..span.fan_in * span.fan_out {
                store.values[span.w_off + i] = rng.gen_range(-bound..bound);
            }
            for i in 0..span.fan_out {
                store.values[span.b_off + i] = rng.gen_range(-bound..bound);
            }
        }
        Ok(Net { spec, store })
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let store = ParamStore::new(&spec);
        Ok(Net { spec, store })
    }

    pub fn n_params(&self) -> usize {
        self.store.len()
    }

    pub fn in_dim(&self) -> usize {
        self.spec.widths[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.spec.widths.last().unwrap()
    }

    fn activated(&self, layer: usize) -> bool {
        layer + 1 < self.spec.n_layers() || self.spec.output_relu
    }

    /// Batched forward pass; rows are independent.
    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, Tape)> {
        if input.cols != self.in_dim() {
            return Err(OmacError::DimMismatch {
                expected: self.in_dim(),
                got: input.cols,
                context: "mlp forward input width".into(),
            });
        }
        let n_layers = self.spec.n_layers();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut relu_outs = Vec::with_capacity(n_layers);
        let mut x = input.clone();
        for l in 0..n_layers {
            let span = &self.store.layout[l];
            let w = self.store.layer_w(l);
            let b = self.store.layer_b(l);
            let mut z = Matrix::zeros(x.rows, span.fan_out);
            for r in 0..x.rows {
                let xr = x.row(r);
                let zr = z.row_mut(r);
                for j in 0..span.fan_out {
                    let wrow = &w[j * span.fan_in..(j + 1) * span.fan_in];
                    let mut acc = b[j];
                    for k in 0..span.fan_in {
                        acc += wrow[k] * xr[k];
                    }
                    zr[j] = acc;
                }
            }
            inputs.push(x);
            if self.activated(l) {
                for v in z.data.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                relu_outs.push(Some(z.clone()));
            } else {
                relu_outs.push(None);
            }
            x = z;
        }
        let tape = Tape {
            batch_rows: input.rows,
            inputs,
            relu_outs,
        };
        Ok((x, tape))
    }

    /// Single-row inference forward (no tape).
    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = Matrix::from_rows(&[x.to_vec()]);
        let (out, _) = self.forward(&m)?;
        Ok(out.row(0).to_vec())
    }

    /// Reverse-mode gradients of the forward map. Returns the flat parameter
    /// gradient (same layout as the store) and the gradient w.r.t. the input.
    pub fn backward(&self, tape: Tape, gout: &Matrix) -> Result<(Vec<f64>, Matrix)> {
        if gout.rows != tape.batch_rows || gout.cols != self.out_dim() {
            return Err(OmacError::DimMismatch {
                expected: self.out_dim(),
                got: gout.cols,
                context: "mlp backward output-gradient shape".into(),
            });
        }
        let mut grads = vec![0.0; self.store.len()];
        let mut g = gout.clone();
        for l in (0..self.spec.n_layers()).rev() {
            if let Some(act) = &tape.relu_outs[l] {
                for i in 0..g.data.len() {
                    if act.data[i] <= 0.0 {
                        g.data[i] = 0.0;
                    }
                }
            }
            let span = &self.store.layout[l];
            let x = &tape.inputs[l];
            let w = self.store.layer_w(l);
            // dW[j,k] += sum_r g[r,j] * x[r,k]; db[j] += sum_r g[r,j]
            for r in 0..g.rows {
                let gr = g.row(r);
                let xr = x.row(r);
                for j in 0..span.fan_out {
                    let gj = gr[j];
                    if gj == 0.0 {
                        continue;
                    }
                    let wslice = &mut grads[span.w_off + j * span.fan_in
                        ..span.w_off + (j + 1) * span.fan_in];
                    for k in 0..span.fan_in {
                        wslice[k] += gj * xr[k];
                    }
                    grads[span.b_off + j] += gj;
                }
            }
            // dx = g . W
            let mut gx = Matrix::zeros(g.rows, span.fan_in);
            for r in 0..g.rows {
                let gr = g.row(r);
                let gxr = gx.row_mut(r);
                for j in 0..span.fan_out {
                    let gj = gr[j];
                    if gj == 0.0 {
                        continue;
                    }
                    let wrow = &w[j * span.fan_in..(j + 1) * span.fan_in];
                    for k in 0..span.fan_in {
                        gxr[k] += gj * wrow[k];
                    }
                }
            }
            g = gx;
        }
        Ok((grads, g))
    }

    pub fn adam_step(&mut self, grads: &[f64], lr: f64) -> Result<()> {
        self.store.adam_step(grads, lr)
    }

    pub fn params(&self) -> &[f64] {
        &self.store.values
    }

    pub fn set_params(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.store.values.len());
        self.store.values.copy_from_slice(values);
    }

    /// Parameter-wise exponential moving average toward `other`:
    /// self <- (1-rho)*self + rho*other.
    pub fn ema_from(&mut self, other: &Net, rho: f64) {
        assert_eq!(self.store.len(), other.store.len());
        for (t, o) in self.store.values.iter_mut().zip(other.store.values.iter()) {
            *t = (1.0 - rho) * *t + rho * *o;
        }
    }
}
