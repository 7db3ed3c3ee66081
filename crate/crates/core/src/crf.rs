//! Fully connected pairwise CRF with Gaussian kernels and Potts compatibility.
//!
//! Fields are `[L, N]` tensors (label-major, pixels row-major). Mean-field
//! inference is unrolled on the tape so its parameters train end to end.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Largest field for which dense kernels are materialised.
pub const MAX_DENSE_PIXELS: usize = 4096;
/// Largest field [`exact_marginals`] will enumerate.
pub const MAX_EXACT_PIXELS: usize = 16;
pub const NUM_LABELS: usize = 2;
/// Potts compatibility: penalise differing labels.
pub const POTTS: [f64; 4] = [0.0, 1.0, 1.0, 0.0];
const PROB_FLOOR: f64 = 1e-12;

/// How the local update combines unaries with pairwise messages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateForm {
    /// `exp(-psi) - Q_hat`, then normalise.
    Paper,
    /// `-psi - Q_hat`, then normalise.
    Conventional,
}

impl std::str::FromStr for UpdateForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(UpdateForm::Paper),
            "conventional" => Ok(UpdateForm::Conventional),
            other => Err(Error::Config(format!("unknown update form `{other}` (expected paper|conventional)"))),
        }
    }
}

impl std::fmt::Display for UpdateForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            UpdateForm::Paper => "paper",
            UpdateForm::Conventional => "conventional",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrfParams {
    /// One weight per kernel: bilateral, then spatial.
    pub weights: Vec<f64>,
    /// Bilateral kernel spatial bandwidth (pixels).
    pub theta_alpha: f64,
    /// Bilateral kernel intensity bandwidth.
    pub theta_beta: f64,
    /// Spatial-only kernel bandwidth (pixels).
    pub theta_gamma: f64,
    pub steps_train: usize,
    pub steps_test: usize,
    pub update_form: UpdateForm,
}

impl Default for CrfParams {
    fn default() -> Self {
        CrfParams {
            weights: vec![1.0, 1.0],
            theta_alpha: 3.0,
            theta_beta: 0.1,
            theta_gamma: 3.0,
            steps_train: 5,
            steps_test: 10,
            update_form: UpdateForm::Paper,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != 2 {
            return Err(Error::LengthMismatch(format!("{} kernel weights for 2 kernels", self.weights.len())));
        }
        for (name, v) in
            [("theta_alpha", self.theta_alpha), ("theta_beta", self.theta_beta), ("theta_gamma", self.theta_gamma)]
        {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::BadParam(format!("{name} must be positive, got {v}")));
            }
        }
        if self.steps_train == 0 || self.steps_test == 0 {
            return Err(Error::BadParam("mean-field step counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// `N x N` Gaussian kernel with a zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMatrix {
    pub n: usize,
    repr: KernelRepr,
}

#[derive(Clone, Debug, PartialEq)]
enum KernelRepr {
    Dense(Arc<Tensor>),
    /// Off-diagonal part of `gy (x) gx` over an `H x W` grid.
    Separable {
        gy: Arc<Tensor>,
        gx: Arc<Tensor>,
    },
}

impl KernelMatrix {
    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self> {
        Ok(KernelMatrix { n, repr: KernelRepr::Dense(Arc::new(Tensor::new(&[n, n], values)?)) })
    }

    /// `K[(a,b),(c,d)] = gy[a][c] * gx[b][d]` off the diagonal, 0 on it.
    pub fn separable(gy: Tensor, gx: Tensor) -> Result<Self> {
        let (h, w) = match (gy.shape(), gx.shape()) {
            ([h, h2], [w, w2]) if h == h2 && w == w2 => (*h, *w),
            (a, b) => return Err(Error::shape(format!("separable factors must be square, got {a:?} and {b:?}"))),
        };
        Ok(KernelMatrix { n: h * w, repr: KernelRepr::Separable { gy: Arc::new(gy), gx: Arc::new(gx) } })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match &self.repr {
            KernelRepr::Dense(v) => v.data()[i * self.n + j],
            KernelRepr::Separable { .. } if i == j => 0.0,
            KernelRepr::Separable { gy, gx } => {
                let (h, w) = (gy.shape()[0], gx.shape()[0]);
                gy.data()[(i / w) * h + j / w] * gx.data()[(i % w) * w + j % w]
            }
        }
    }

    pub fn to_dense(&self) -> Tensor {
        Tensor::from_fn(&[self.n, self.n], |k| self.get(k / self.n, k % self.n))
    }

    /// Records `out[l] = K q[l]` for an `[L, N]` field.
    pub fn record_message(&self, tape: &mut Tape, q: Var) -> Result<Var> {
        match &self.repr {
            KernelRepr::Dense(v) => tape.row_matmul_const(q, Arc::clone(v)),
            KernelRepr::Separable { gy, gx } => tape.separable_offdiag_matmul(q, Arc::clone(gy), Arc::clone(gx)),
        }
    }
}

fn gaussian_kernel(h: usize, w: usize, pair: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let n = h * w;
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = pair(i, j);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    k
}

#[cfg(test)]
fn sq_dist(w: usize, i: usize, j: usize) -> f64 {
    let dy = (i / w) as f64 - (j / w) as f64;
    let dx = (i % w) as f64 - (j % w) as f64;
    dy * dy + dx * dx
}

/// Bilateral and spatial kernels for a `[.., H, W]` intensity image.
pub fn build_kernels(image: &Tensor, params: &CrfParams) -> Result<Vec<KernelMatrix>> {
    params.validate()?;
    let shape = image.shape();
    if shape.len() < 2 {
        return Err(Error::shape(format!("CRF image needs at least 2 dims, got {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let n = h * w;
    if image.len() != n {
        return Err(Error::shape(format!("CRF image {shape:?} is not a single channel")));
    }
    if n > MAX_DENSE_PIXELS {
        return Err(Error::FieldTooLarge { n, max: MAX_DENSE_PIXELS });
    }
    let intensity = image.data();
    let b2 = 2.0 * params.theta_beta.powi(2);
    // exp(-(dy^2 + dx^2) / a) factors into per-axis tables.
    let ay = axis_table(h, params.theta_alpha);
    let ax = axis_table(w, params.theta_alpha);
    let bilateral = gaussian_kernel(h, w, |i, j| {
        let di = intensity[i] - intensity[j];
        ay[(i / w).abs_diff(j / w)] * ax[(i % w).abs_diff(j % w)] * (-di * di / b2).exp()
    });
    Ok(vec![KernelMatrix::from_values(n, bilateral)?, spatial_kernel(h, w, params.theta_gamma)?])
}

fn axis_table(len: usize, theta: f64) -> Vec<f64> {
    let t2 = 2.0 * theta * theta;
    (0..len).map(|d| (-((d * d) as f64) / t2).exp()).collect()
}

/// The spatial Gaussian factors over rows and columns.
fn spatial_kernel(h: usize, w: usize, theta_gamma: f64) -> Result<KernelMatrix> {
    let factor = |len: usize| {
        let t = axis_table(len, theta_gamma);
        Tensor::from_fn(&[len, len], |k| t[(k / len).abs_diff(k % len)])
    };
    KernelMatrix::separable(factor(h), factor(w))
}

/// Softmax over the label axis of an `[L, N]` field.
fn record_label_softmax(tape: &mut Tape, field: Var) -> Result<Var> {
    let shape = tape.value(field).shape().to_vec();
    let [l, n] = shape[..] else {
        return Err(Error::shape(format!("expected an [L, N] field, got {shape:?}")));
    };
    let batched = tape.reshape(field, &[1, l, n])?;
    let q = tape.softmax_channels(batched)?;
    tape.reshape(q, &[l, n])
}

/// `Q^0 = softmax(-psi)`.
pub fn record_unary_init(tape: &mut Tape, unary: Var) -> Result<Var> {
    let neg = tape.scale(unary, -1.0)?;
    record_label_softmax(tape, neg)
}

/// One mean-field update: message passing, kernel re-weighting, Potts
/// compatibility, local update, normalisation.
pub fn record_meanfield_step(
    tape: &mut Tape,
    q: Var,
    unary: Var,
    kernels: &[KernelMatrix],
    weights: Var,
    form: UpdateForm,
) -> Result<Var> {
    if tape.value(q).shape() != tape.value(unary).shape() {
        return Err(Error::shape(format!("Q {:?} vs unary {:?}", tape.value(q).shape(), tape.value(unary).shape())));
    }
    let messages = kernels.iter().map(|k| k.record_message(tape, q)).collect::<Result<Vec<_>>>()?;
    let weighted = tape.weighted_sum(&messages, weights)?;
    let compat = tape.label_mix(weighted, &POTTS)?;
    let local = match form {
        UpdateForm::Paper => tape.exp_neg(unary)?,
        UpdateForm::Conventional => tape.scale(unary, -1.0)?,
    };
    let updated = tape.sub(local, compat)?;
    record_label_softmax(tape, updated)
}

/// `steps` shared-weight mean-field updates from `softmax(-psi)`.
pub fn record_crf_infer(
    tape: &mut Tape,
    unary: Var,
    kernels: &[KernelMatrix],
    weights: Var,
    steps: usize,
    form: UpdateForm,
) -> Result<Var> {
    if steps == 0 {
        return Err(Error::BadParam("mean-field needs at least one step".into()));
    }
    let mut q = record_unary_init(tape, unary)?;
    for _ in 0..steps {
        q = record_meanfield_step(tape, q, unary, kernels, weights, form)?;
    }
    Ok(q)
}

/// Mean `-ln Q(true label)` over the pixels of an `[L, N]` field.
pub fn crf_nll_loss(tape: &mut Tape, q: Var, labels: Arc<[u8]>) -> Result<Var> {
    let shape = tape.value(q).shape().to_vec();
    let batched = tape.reshape(q, &[1, shape[0], shape[1..].iter().product()])?;
    tape.nll(batched, labels, PROB_FLOOR)
}

/// Gradient-free [`record_meanfield_step`].
pub fn meanfield_step(
    q: &Tensor,
    unary: &Tensor,
    kernels: &[KernelMatrix],
    weights: &[f64],
    form: UpdateForm,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (qv, uv) = (tape.constant(q.clone()), tape.constant(unary.clone()));
    let wv = tape.constant(Tensor::new(&[weights.len()], weights.to_vec())?);
    let out = record_meanfield_step(&mut tape, qv, uv, kernels, wv, form)?;
    Ok(tape.value(out).clone())
}

/// Gradient-free [`record_crf_infer`] for an `[L, N]` unary field.
pub fn crf_infer(unary: &Tensor, kernels: &[KernelMatrix], params: &CrfParams, steps: usize) -> Result<Tensor> {
    Ok(crf_trajectory(unary, kernels, params, steps)?.pop().expect("at least one iterate"))
}

/// `Q^0, Q^1, ..., Q^steps`.
pub fn crf_trajectory(
    unary: &Tensor,
    kernels: &[KernelMatrix],
    params: &CrfParams,
    steps: usize,
) -> Result<Vec<Tensor>> {
    if steps == 0 {
        return Err(Error::BadParam("mean-field needs at least one step".into()));
    }
    let mut tape = Tape::new();
    let uv = tape.constant(unary.clone());
    let wv = tape.constant(Tensor::new(&[params.weights.len()], params.weights.clone())?);
    let mut q = record_unary_init(&mut tape, uv)?;
    let mut out = vec![tape.value(q).clone()];
    for _ in 0..steps {
        q = record_meanfield_step(&mut tape, q, uv, kernels, wv, params.update_form)?;
        out.push(tape.value(q).clone());
    }
    Ok(out)
}

/// Exact per-pixel marginals of the Gibbs distribution by enumerating all
/// `2^N` labelings, with pairwise energy `mu(y_i, y_j) sum_m w_m K_m[i][j]`
/// over unordered pairs.
pub fn exact_marginals(unary: &Tensor, kernels: &[KernelMatrix], weights: &[f64]) -> Result<Tensor> {
    let [l, n] = unary.shape()[..] else {
        return Err(Error::shape(format!("expected a [2, N] unary, got {:?}", unary.shape())));
    };
    if l != NUM_LABELS {
        return Err(Error::shape(format!("exact enumeration supports 2 labels, got {l}")));
    }
    if n > MAX_EXACT_PIXELS {
        return Err(Error::FieldTooLarge { n, max: MAX_EXACT_PIXELS });
    }
    if kernels.len() != weights.len() {
        return Err(Error::LengthMismatch(format!("{} kernels but {} weights", kernels.len(), weights.len())));
    }
    let mut coupling = vec![0.0; n * n];
    for (k, &wm) in kernels.iter().zip(weights) {
        if k.n != n {
            return Err(Error::shape(format!("kernel over {} pixels for a {n}-pixel field", k.n)));
        }
        for (idx, c) in coupling.iter_mut().enumerate() {
            *c += wm * k.get(idx / n, idx % n);
        }
    }
    let psi = unary.data();
    let energies: Vec<f64> = (0..1usize << n)
        .map(|y| {
            let label = |i: usize| (y >> i) & 1;
            let mut e: f64 = (0..n).map(|i| psi[label(i) * n + i]).sum();
            for i in 0..n {
                for j in (i + 1)..n {
                    e += POTTS[label(i) * 2 + label(j)] * coupling[i * n + j];
                }
            }
            e
        })
        .collect();
    let e_min = energies.iter().copied().fold(f64::INFINITY, f64::min);
    let mut z = 0.0;
    let mut ones = vec![0.0; n];
    for (y, e) in energies.iter().enumerate() {
        let weight = (e_min - e).exp();
        z += weight;
        for (i, o) in ones.iter_mut().enumerate() {
            if (y >> i) & 1 == 1 {
                *o += weight;
            }
        }
    }
    let mut out = Vec::with_capacity(2 * n);
    out.extend(ones.iter().map(|o| 1.0 - o / z));
    out.extend(ones.iter().map(|o| o / z));
    Tensor::new(&[2, n], out)
}

/// Per-pixel argmax label of an `[L, N]` field; ties go to the lower label.
pub fn argmax_labels(field: &Tensor) -> Vec<u8> {
    let (l, n) = (field.shape()[0], field.len() / field.shape()[0]);
    (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..l {
                if field.data()[c * n + i] > field.data()[best * n + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}
