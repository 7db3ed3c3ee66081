//! Central finite-difference checks of every differentiable tape operator,
//! the mean-field recurrence, and the full training objective.
//!
//! Each check draws a random instance from a seed, contracts the output with
//! a random probe so every output element contributes, and compares the
//! reverse-mode gradient with `(f(x + h) - f(x - h)) / 2h` per coordinate.
//! The error is `max |a - n| / max(||a||_inf, ||n||_inf)`.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::adversarial::{likelihood_gradient, make_perturbation, record_log_likelihood};
use crate::crf::{self, CrfParams, UpdateForm};
use crate::error::{Error, Result};
use crate::fcn::{FcnConfig, FcnModel, LayerSpec};
use crate::model::{PreparedSample, SegModel, Variant};
use crate::tensor::{Padding, Tape, Tensor, Var};
use crate::trainer::{batch_gradients, TrainConfig};

pub const FD_STEP: f64 = 1e-5;
pub const PRIMITIVE_TOL: f64 = 1e-5;
pub const COMPOSITE_TOL: f64 = 1e-4;
pub const DEFAULT_SEEDS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckKind {
    /// A single tape operator.
    Primitive,
    /// A chain of operators, checked at the looser tolerance.
    Composite,
}

impl CheckKind {
    pub fn tolerance(self) -> f64 {
        match self {
            CheckKind::Primitive => PRIMITIVE_TOL,
            CheckKind::Composite => COMPOSITE_TOL,
        }
    }

    fn label(self) -> &'static str {
        match self {
            CheckKind::Primitive => "primitive",
            CheckKind::Composite => "composite",
        }
    }
}

type CheckFn = fn(&mut ChaCha8Rng) -> Result<f64>;

struct Check {
    name: &'static str,
    kind: CheckKind,
    run: CheckFn,
}

const CHECKS: &[Check] = &[
    Check { name: "conv2d_same", kind: CheckKind::Primitive, run: conv2d_same },
    Check { name: "conv2d_valid", kind: CheckKind::Primitive, run: conv2d_valid },
    Check { name: "transposed_conv2d", kind: CheckKind::Primitive, run: tconv_stride1 },
    Check { name: "transposed_conv2d_stride2", kind: CheckKind::Primitive, run: tconv_stride2 },
    Check { name: "maxpool2x2", kind: CheckKind::Primitive, run: maxpool },
    Check { name: "tanh", kind: CheckKind::Primitive, run: tanh },
    Check { name: "softmax_channels", kind: CheckKind::Primitive, run: softmax },
    Check { name: "center_crop", kind: CheckKind::Primitive, run: center_crop },
    Check { name: "add_bias_map", kind: CheckKind::Primitive, run: add_bias_map },
    Check { name: "reshape", kind: CheckKind::Primitive, run: reshape },
    Check { name: "neg_log_floor", kind: CheckKind::Primitive, run: neg_log_floor },
    Check { name: "exp_neg", kind: CheckKind::Primitive, run: exp_neg },
    Check { name: "add", kind: CheckKind::Primitive, run: add },
    Check { name: "sub", kind: CheckKind::Primitive, run: sub },
    Check { name: "mul", kind: CheckKind::Primitive, run: mul },
    Check { name: "scale", kind: CheckKind::Primitive, run: scale },
    Check { name: "add_const", kind: CheckKind::Primitive, run: add_const },
    Check { name: "sum", kind: CheckKind::Primitive, run: sum },
    Check { name: "sum_squares", kind: CheckKind::Primitive, run: sum_squares },
    Check { name: "dot_const", kind: CheckKind::Primitive, run: dot_const },
    Check { name: "weighted_sum", kind: CheckKind::Primitive, run: weighted_sum },
    Check { name: "row_matmul_const", kind: CheckKind::Primitive, run: row_matmul },
    Check { name: "separable_offdiag_matmul", kind: CheckKind::Primitive, run: separable },
    Check { name: "label_mix", kind: CheckKind::Primitive, run: label_mix },
    Check { name: "nll", kind: CheckKind::Primitive, run: nll },
    Check { name: "fcn_forward", kind: CheckKind::Composite, run: fcn_forward },
    Check { name: "meanfield_step", kind: CheckKind::Composite, run: meanfield_paper },
    Check { name: "meanfield_step_conventional", kind: CheckKind::Composite, run: meanfield_conventional },
    Check { name: "crf_infer_5", kind: CheckKind::Composite, run: crf_infer_5 },
    Check { name: "likelihood_input_grad", kind: CheckKind::Composite, run: likelihood_input },
    Check { name: "objective_fcn_crf_adv", kind: CheckKind::Composite, run: objective_single },
    Check { name: "objective_multi_fcn_crf_adv", kind: CheckKind::Composite, run: objective_multi },
];

/// Names of all checks, in report order.
pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.name).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub name: &'static str,
    pub kind: CheckKind,
    pub tolerance: f64,
    /// Seeds run.
    pub seeds: Vec<u64>,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub ops: Vec<OpReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self.ops.is_empty() && self.ops.iter().all(|o| o.passed)
    }

    pub fn to_text(&self) -> String {
        let mut out =
            format!("{:<30} {:<10} {:>5} {:>12} {:>8}  status\n", "op", "kind", "seeds", "max_rel_err", "tol");
        for o in &self.ops {
            let status = if o.passed { "PASS".to_string() } else { format!("FAIL (seed {})", o.worst_seed) };
            out.push_str(&format!(
                "{:<30} {:<10} {:>5} {:>12.3e} {:>8.0e}  {}\n",
                o.name,
                o.kind.label(),
                o.seeds.len(),
                o.max_rel_error,
                o.tolerance,
                status
            ));
        }
        let failed = self.ops.iter().filter(|o| !o.passed).count();
        out.push_str(&format!(
            "overall: {} ({} checks, {} failed)\n",
            if self.passed() { "PASS" } else { "FAIL" },
            self.ops.len(),
            failed
        ));
        out
    }
}

/// Runs every check whose name equals `filter` or starts with `filter_`
/// (all checks when `None`) on seeds `base_seed..base_seed + seeds`.
pub fn run(filter: Option<&str>, base_seed: u64, seeds: usize) -> Result<GradcheckReport> {
    if seeds == 0 {
        return Err(Error::BadParam("gradcheck needs at least one seed".into()));
    }
    let selected: Vec<&Check> = CHECKS
        .iter()
        .filter(|c| filter.map_or(true, |f| c.name == f || c.name.starts_with(&format!("{f}_"))))
        .collect();
    if selected.is_empty() {
        return Err(Error::BadParam(format!(
            "no gradient check named `{}` (available: {})",
            filter.unwrap_or_default(),
            check_names().join(", ")
        )));
    }
    let mut report = GradcheckReport::default();
    for c in selected {
        let seed_list: Vec<u64> = (0..seeds as u64).map(|k| base_seed.wrapping_add(k)).collect();
        let (mut worst, mut worst_seed) = (0.0f64, base_seed);
        for &s in &seed_list {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            // A failing instance (e.g. non-finite values) counts as an
            // infinite error rather than aborting the report.
            let err = (c.run)(&mut rng).unwrap_or(f64::INFINITY);
            if !(err <= worst) {
                worst = err;
                worst_seed = s;
            }
        }
        let tolerance = c.kind.tolerance();
        report.ops.push(OpReport {
            name: c.name,
            kind: c.kind,
            tolerance,
            seeds: seed_list,
            max_rel_error: worst,
            worst_seed,
            passed: worst <= tolerance,
        });
    }
    Ok(report)
}

/// `max |a - n| / max(||a||_inf, ||n||_inf)`, 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scale = inf(analytic).max(inf(numeric));
    if scale == 0.0 {
        return 0.0;
    }
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / scale
}

/// Compares the tape gradient of `probe . f(inputs)` with central
/// differences over every coordinate of every input.
pub fn check_function(
    rng: &mut impl Rng,
    inputs: &[Tensor],
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).shape().to_vec()
    };
    let probe = Arc::new(normal(rng, &out_shape));
    let objective = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let loss = tape.dot_const(out, Arc::clone(&probe))?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let loss = tape.dot_const(out, Arc::clone(&probe))?;
    tape.backward(loss)?;
    let analytic: Vec<f64> = vars
        .iter()
        .zip(inputs)
        .flat_map(|(&v, x)| tape.take_grad(v).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; x.len()]))
        .collect();

    let mut xs = inputs.to_vec();
    let mut numeric = Vec::with_capacity(analytic.len());
    for k in 0..xs.len() {
        for i in 0..xs[k].len() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + FD_STEP;
            let up = objective(&xs)?;
            xs[k].data_mut()[i] = orig - FD_STEP;
            let down = objective(&xs)?;
            xs[k].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

fn normal(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values on a 0.05 grid in random order plus jitter below the spacing, so
/// no pooling window holds near-ties.
fn distinct(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Tensor::from_fn(shape, |i| (order[i] as f64 - n as f64 / 2.0) * 0.05 + rng.gen_range(-0.01..0.01))
}

fn conv2d_same(rng: &mut ChaCha8Rng) -> Result<f64> {
    let xs = [normal(rng, &[2, 2, 5, 5]), normal(rng, &[3, 2, 3, 3]), normal(rng, &[3])];
    check_function(rng, &xs, |t, v| t.conv2d(v[0], v[1], Some(v[2]), Padding::Same))
}

fn conv2d_valid(rng: &mut ChaCha8Rng) -> Result<f64> {
    let xs = [normal(rng, &[1, 2, 6, 5]), normal(rng, &[2, 2, 4, 2]), normal(rng, &[2])];
    check_function(rng, &xs, |t, v| t.conv2d(v[0], v[1], Some(v[2]), Padding::Valid))
}

fn tconv_stride1(rng: &mut ChaCha8Rng) -> Result<f64> {
    let xs = [normal(rng, &[2, 3, 3, 2]), normal(rng, &[3, 2, 4, 4]), normal(rng, &[2])];
    check_function(rng, &xs, |t, v| t.transposed_conv2d(v[0], v[1], Some(v[2]), 1))
}

fn tconv_stride2(rng: &mut ChaCha8Rng) -> Result<f64> {
    let xs = [normal(rng, &[1, 2, 3, 3]), normal(rng, &[2, 2, 3, 3])];
    check_function(rng, &xs, |t, v| t.transposed_conv2d(v[0], v[1], None, 2))
}

fn maxpool(rng: &mut ChaCha8Rng) -> Result<f64> {
    let xs = [distinct(rng, &[2, 2, 6, 4])];
    check_function(rng, &xs, |t, v| t.maxpool2x2(v[0]))
}

fn tanh(rng: &mut ChaCha8Rng) -> Result<f64> {
    let xs = [normal(rng, &[2, 3, 4])];
    check_function(rng, &xs, |t, v| t.tanh(v[0]))
}

fn softmax(rng: &mut ChaCha8Rng) -> Result<f64> {
    let xs = [normal(rng, &[2, 3, 2, 2])];
    check_function(rng, &xs, |t, v| t.softmax_channels(v[0]))
}

fn center_crop(rng: &mut ChaCha8Rng) -> Result<f64> {
    let xs = [normal(rng, &[1, 2, 7, 6])];
    check_function(rng, &xs, |t, v| t.center_crop(v[0], 4, 3))
}

fn add_bias_map(rng: &mut ChaCha8Rng) -> Result<f64> {
    let xs = [normal(rng, &[2, 2, 3, 3]), normal(rng, &[2, 3, 3])];
    check_function(rng, &xs, |t, v| t.add_bias_map(v[0], v[1]))
}

fn reshape(rng: &mut ChaCha8Rng) -> Result<f64> {
    let xs = [normal(rng, &[2, 6])];
    check_function(rng, &xs, |t, v| t.reshape(v[0], &[3, 4]))
}

fn neg_log_floor(rng: &mut ChaCha8Rng) -> Result<f64> {
    let xs = [uniform(rng, &[2, 5], 0.05, 1.0)];
    check_function(rng, &xs, |t, v| t.neg_log_floor(v[0], crate::fcn::PROB_FLOOR))
}

fn exp_neg(rng: &mut ChaCha8Rng) -> Result<f64> {
    let xs = [normal(rng, &[2, 5])];
    check_function(rng, &xs, |t, v| t.exp_neg(v[0]))
}

fn add(rng: &mut ChaCha8Rng) -> Result<f64> {
    let xs = [normal(rng, &[3, 4]), normal(rng, &[3, 4])];
    check_function(rng, &xs, |t, v| t.add(v[0], v[1]))
}

fn sub(rng: &mut ChaCha8Rng) -> Result<f64> {
    let xs = [normal(rng, &[3, 4]), normal(rng, &[3, 4])];
    check_function(rng, &xs, |t, v| t.sub(v[0], v[1]))
}

fn mul(rng: &mut ChaCha8Rng) -> Result<f64> {
    let xs = [normal(rng, &[3, 4]), normal(rng, &[3, 4])];
    check_function(rng, &xs, |t, v| t.mul(v[0], v[1]))
}

fn scale(rng: &mut ChaCha8Rng) -> Result<f64> {
    let factor = rng.sample::<f64, _>(StandardNormal);
    let xs = [normal(rng, &[3, 4])];
    check_function(rng, &xs, |t, v| t.scale(v[0], factor))
}

fn add_const(rng: &mut ChaCha8Rng) -> Result<f64> {
    let offset = normal(rng, &[3, 4]);
    let xs = [normal(rng, &[3, 4])];
    check_function(rng, &xs, |t, v| t.add_const(v[0], &offset))
}

fn sum(rng: &mut ChaCha8Rng) -> Result<f64> {
    let xs = [normal(rng, &[3, 4])];
    check_function(rng, &xs, |t, v| t.sum(v[0]))
}

fn sum_squares(rng: &mut ChaCha8Rng) -> Result<f64> {
    let xs = [normal(rng, &[3, 4])];
    check_function(rng, &xs, |t, v| t.sum_squares(v[0]))
}

fn dot_const(rng: &mut ChaCha8Rng) -> Result<f64> {
    let w = Arc::new(normal(rng, &[3, 4]));
    let xs = [normal(rng, &[3, 4])];
    check_function(rng, &xs, |t, v| t.dot_const(v[0], Arc::clone(&w)))
}

fn weighted_sum(rng: &mut ChaCha8Rng) -> Result<f64> {
    let xs = [normal(rng, &[2, 5]), normal(rng, &[2, 5]), normal(rng, &[2, 5]), normal(rng, &[3])];
    check_function(rng, &xs, |t, v| t.weighted_sum(&v[..3], v[3]))
}

fn row_matmul(rng: &mut ChaCha8Rng) -> Result<f64> {
    let m = Arc::new(normal(rng, &[5, 6]));
    let xs = [normal(rng, &[2, 6])];
    check_function(rng, &xs, |t, v| t.row_matmul_const(v[0], Arc::clone(&m)))
}

fn separable(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (gy, gx) = (Arc::new(normal(rng, &[3, 3])), Arc::new(normal(rng, &[4, 4])));
    let xs = [normal(rng, &[2, 12])];
    check_function(rng, &xs, |t, v| t.separable_offdiag_matmul(v[0], Arc::clone(&gy), Arc::clone(&gx)))
}

fn label_mix(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mix: Vec<f64> = (0..9).map(|_| rng.sample(StandardNormal)).collect();
    let xs = [normal(rng, &[3, 5])];
    check_function(rng, &xs, |t, v| t.label_mix(v[0], &mix))
}

fn nll(rng: &mut ChaCha8Rng) -> Result<f64> {
    let labels: Arc<[u8]> = (0..8).map(|_| rng.gen_range(0..3u8)).collect();
    let xs = [uniform(rng, &[2, 3, 4], 0.05, 1.0)];
    check_function(rng, &xs, |t, v| t.nll(v[0], Arc::clone(&labels), crate::fcn::PROB_FLOOR))
}

/// A small network for an `8 x 8` grid.
fn small_net(name: &str, layers: [(usize, usize); 3]) -> FcnConfig {
    FcnConfig {
        name: name.into(),
        layers: layers.map(|(filters, k)| LayerSpec { filters, kh: k, kw: k }),
        image_size: 8,
    }
}

/// Four small networks standing in for the table rows in the checks.
pub fn small_networks() -> Vec<FcnConfig> {
    vec![
        small_net("fcn1", [(2, 3), (2, 3), (3, 2)]),
        small_net("fcn2", [(2, 2), (3, 2), (2, 2)]),
        small_net("fcn3", [(3, 3), (2, 3), (2, 1)]),
        small_net("fcn4", [(2, 2), (2, 2), (2, 2)]),
    ]
}

fn random_prior(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0.05..0.95)).collect()
}

fn fcn_forward(rng: &mut ChaCha8Rng) -> Result<f64> {
    let prior = random_prior(rng, 64);
    let net = FcnModel::new(small_networks().swap_remove(0), &prior, rng.gen())?;
    let mut xs = vec![normal(rng, &[1, 1, 8, 8])];
    xs.extend(net.params.iter().map(|p| (*p.value).clone()));
    check_function(rng, &xs, |t, v| net.record(t, &v[1..], v[0]))
}

/// Random `[2, N]` unary field, kernels for a random `h x w` image, and
/// coupling weights.
fn crf_instance(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Result<(Tensor, Vec<crf::KernelMatrix>, Tensor)> {
    let image = uniform(rng, &[1, 1, h, w], 0.0, 1.0);
    let params = CrfParams { theta_alpha: 1.5, theta_beta: 0.3, theta_gamma: 1.5, ..CrfParams::default() };
    let kernels = crf::build_kernels(&image, &params)?;
    let unary = uniform(rng, &[2, h * w], 0.05, 3.0);
    let weights = uniform(rng, &[2], 0.1, 1.0);
    Ok((unary, kernels, weights))
}

fn meanfield(rng: &mut ChaCha8Rng, form: UpdateForm) -> Result<f64> {
    let (unary, kernels, weights) = crf_instance(rng, 3, 4)?;
    let q0 = {
        let z = normal(rng, &[2, 12]);
        crf::crf_trajectory(&z, &kernels, &CrfParams::default(), 1)?.swap_remove(0)
    };
    let xs = [q0, unary, weights];
    check_function(rng, &xs, |t, v| crf::record_meanfield_step(t, v[0], v[1], &kernels, v[2], form))
}

fn meanfield_paper(rng: &mut ChaCha8Rng) -> Result<f64> {
    meanfield(rng, UpdateForm::Paper)
}

fn meanfield_conventional(rng: &mut ChaCha8Rng) -> Result<f64> {
    meanfield(rng, UpdateForm::Conventional)
}

fn crf_infer_5(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (unary, kernels, weights) = crf_instance(rng, 4, 4)?;
    let xs = [unary, weights];
    check_function(rng, &xs, |t, v| crf::record_crf_infer(t, v[0], &kernels, v[1], 5, UpdateForm::Paper))
}

/// An `8 x 8` sample with a disc-shaped mask.
fn small_sample(rng: &mut impl Rng) -> PreparedSample {
    let (cy, cx, r) = (rng.gen_range(2.5..5.5), rng.gen_range(2.5..5.5), rng.gen_range(1.5..3.0));
    let labels: Vec<u8> = (0..64)
        .map(|i| {
            let (y, x) = ((i / 8) as f64, (i % 8) as f64);
            u8::from((y - cy).powi(2) + (x - cx).powi(2) <= r * r)
        })
        .collect();
    let crf_image = Tensor::from_fn(&[1, 1, 8, 8], |i| {
        (0.3 + 0.4 * f64::from(labels[i]) + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0)
    });
    let input =
        Tensor::new(&[1, 1, 8, 8], crf_image.data().iter().map(|v| (v - 0.5) / 0.25).collect()).expect("same length");
    PreparedSample { id: "check".into(), input, crf_image, labels: labels.into() }
}

fn small_model(rng: &mut ChaCha8Rng, variant: Variant) -> Result<SegModel> {
    let nets = if variant.is_multi() { small_networks() } else { small_networks().into_iter().take(1).collect() };
    let prior = random_prior(rng, 64);
    let crf = CrfParams { weights: vec![rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0)], ..CrfParams::default() };
    SegModel::with_networks(variant, nets, crf, &prior, rng.gen())
}

fn likelihood_input(rng: &mut ChaCha8Rng) -> Result<f64> {
    let model = small_model(rng, Variant::FcnCrfAdv)?;
    let sample = small_sample(rng);
    let kernels = model.kernels_for(&sample.crf_image)?;
    let xs = [sample.input.clone()];
    check_function(rng, &xs, |t, v| record_log_likelihood(&model, t, v[0], &sample, kernels.as_deref()))
}

/// `L_emp + L_adv + lambda / 2 ||theta_crf||^2` for one sample through the
/// trainer's gradient path, with the perturbation held at its value for the
/// unperturbed parameters.
fn objective(rng: &mut ChaCha8Rng, variant: Variant) -> Result<f64> {
    let mut model = small_model(rng, variant)?;
    let sample = small_sample(rng);
    let cfg = TrainConfig { variant, epsilon: 0.1, lambda: 0.5, ..TrainConfig::default() };
    let (_, analytic, _) = batch_gradients(&model, &[&sample], &cfg)?;

    let adv_input = if variant.is_adversarial() {
        let r = make_perturbation(&likelihood_gradient(&model, &sample)?, cfg.epsilon)?.r;
        let data = sample.input.data().iter().zip(r.data()).map(|(a, b)| a + b).collect();
        Some(Tensor::new(sample.input.shape(), data)?)
    } else {
        None
    };
    let value = |m: &SegModel| -> Result<f64> {
        let mut f = m.sample_nll(&sample, &sample.input)? + 0.5 * cfg.lambda * m.penalty_norm_sq();
        if let Some(x) = &adv_input {
            f += m.sample_nll(&sample, x)?;
        }
        Ok(f)
    };

    let (mut a, mut n) = (Vec::new(), Vec::new());
    let trainable: Vec<bool> = model.named_params().iter().map(|(_, p)| p.trainable).collect();
    for (k, grad) in analytic.iter().enumerate() {
        if !trainable[k] {
            continue;
        }
        for i in 0..grad.len() {
            let orig = model.params_mut()[k].value.data()[i];
            let set = |m: &mut SegModel, v: f64| Arc::make_mut(&mut m.params_mut()[k].value).data_mut()[i] = v;
            set(&mut model, orig + FD_STEP);
            let up = value(&model)?;
            set(&mut model, orig - FD_STEP);
            let down = value(&model)?;
            set(&mut model, orig);
            a.push(grad[i]);
            n.push((up - down) / (2.0 * FD_STEP));
        }
    }
    Ok(relative_error(&a, &n))
}

fn objective_single(rng: &mut ChaCha8Rng) -> Result<f64> {
    objective(rng, Variant::FcnCrfAdv)
}

fn objective_multi(rng: &mut ChaCha8Rng) -> Result<f64> {
    objective(rng, Variant::MultiFcnCrfAdv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_cases() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0, 2.0], &[1.0, 2.2]) - 0.2 / 2.2).abs() < 1e-15);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // d/dx of x^2 recorded as mul is right; a hand-broken scale is not.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs = [normal(&mut rng, &[4])];
        let good = check_function(&mut rng, &xs, |t, v| t.mul(v[0], v[0])).unwrap();
        assert!(good < PRIMITIVE_TOL);
        let bad = check_function(&mut rng, &xs, |t, v| {
            let c = t.constant(t.value(v[0]).clone());
            t.mul(v[0], c)
        })
        .unwrap();
        assert!(bad > 0.1);
    }

    #[test]
    fn filter_selects_families() {
        let r = run(Some("conv2d"), 1, 1).unwrap();
        let names: Vec<_> = r.ops.iter().map(|o| o.name).collect();
        assert_eq!(names, ["conv2d_same", "conv2d_valid"]);
        assert!(r.passed());
        assert!(matches!(run(Some("bogus"), 1, 1), Err(Error::BadParam(_))));
    }

    #[test]
    fn every_check_passes_one_seed() {
        let r = run(None, 7, 1).unwrap();
        for o in &r.ops {
            assert!(o.passed, "{} rel err {}", o.name, o.max_rel_error);
        }
    }
}
