//! Adam optimisation of the segmentation variants, checkpoints, evaluation.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversarial::make_perturbation;
use crate::checkpoint::Checkpoint;
use crate::crf::{self, argmax_labels};
use crate::dataio::{estimate_prior, Dataset, NormStats, Split};
use crate::error::{Error, Result};
use crate::metrics::{dice, trimap_tally, TrimapTally};
use crate::model::{prepare, ModelSpec, PreparedSample, SegModel, Variant};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub epsilon: f64,
    pub lambda: f64,
    pub seed: u64,
    pub model: ModelSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Fcn,
            lr: 0.003,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 30,
            batch_size: 16,
            epsilon: 0.1,
            lambda: 0.5,
            seed: 1,
            model: ModelSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("lr must be > 0 and Adam betas in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.variant.is_adversarial() && !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        self.model.crf.validate()
    }
}

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamConfig { lr: c.lr, beta1: c.adam_beta1, beta2: c.adam_beta2, eps: c.adam_eps }
    }
}

/// One bias-corrected Adam update at step `t` (1-based).
pub fn adam_step(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if theta.len() != grad.len() || m.len() != grad.len() || v.len() != grad.len() {
        return Err(Error::shape("adam_step: parameter, gradient and moment lengths differ"));
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..theta.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        theta[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        if !theta[i].is_finite() {
            return Err(Error::NonFinite { op: "adam_step" });
        }
    }
    Ok(())
}

/// Moments for every parameter of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, model: &SegModel) -> Self {
        let sizes: Vec<usize> = model.named_params().iter().map(|(_, p)| p.len()).collect();
        Adam {
            cfg,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Updates every trainable parameter; frozen ones are left untouched.
    pub fn step(&mut self, model: &mut SegModel, grads: &[Vec<f64>]) -> Result<()> {
        self.t += 1;
        for (i, p) in model.params_mut().into_iter().enumerate() {
            if !p.trainable {
                continue;
            }
            let theta = Arc::make_mut(&mut p.value).data_mut();
            adam_step(theta, &grads[i], &mut self.m[i], &mut self.v[i], self.t, &self.cfg)?;
        }
        Ok(())
    }
}

/// Loss, gradients and training-time prediction for one sample.
pub struct SampleResult {
    /// Empirical plus (for adversarial variants) adversarial NLL.
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    /// Adversarial variants only: whether the gradient was degenerate.
    pub degenerate: bool,
}

fn grads_of(tape: &mut Tape, vars: &[crate::tensor::Var], model: &SegModel) -> Vec<Vec<f64>> {
    vars.iter()
        .zip(model.named_params())
        .map(|(&v, (_, p))| tape.take_grad(v).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect()
}

/// Per-sample objective `L_emp (+ L_adv)` and its parameter gradients.
pub fn sample_gradients(model: &SegModel, sample: &PreparedSample, cfg: &TrainConfig) -> Result<SampleResult> {
    let adversarial = cfg.variant.is_adversarial();
    let steps = model.crf.steps_train;
    let kernels = model.kernels_for(&sample.crf_image)?;

    let mut tape = Tape::new();
    let x = tape.leaf(sample.input.clone(), adversarial);
    let fwd = model.record(&mut tape, x, kernels.as_deref(), steps, true)?;
    let labels = argmax_labels(tape.value(fwd.probs));
    let nll = crf::crf_nll_loss(&mut tape, fwd.probs, Arc::clone(&sample.labels))?;
    let emp = tape.value(nll).item();
    tape.backward(nll)?;
    let mut grads = grads_of(&mut tape, &fwd.params, model);
    if !adversarial {
        return Ok(SampleResult { loss: emp, grads, labels, degenerate: false });
    }

    // g = grad_I log p = -N grad_I nll; R is held constant below.
    let n = sample.labels.len() as f64;
    let g_nll = tape.take_grad(x).unwrap_or_else(|| Tensor::zeros(sample.input.shape()));
    let g = Tensor::new(g_nll.shape(), g_nll.data().iter().map(|v| -n * v).collect())?;
    drop(tape);
    let perturbation = match make_perturbation(&g, cfg.epsilon) {
        Ok(p) => p,
        Err(Error::DegenerateGradient { .. }) => {
            for g in &mut grads {
                g.iter_mut().for_each(|v| *v *= 2.0);
            }
            return Ok(SampleResult { loss: 2.0 * emp, grads, labels, degenerate: true });
        }
        Err(e) => return Err(e),
    };
    let adv_input: Vec<f64> = sample.input.data().iter().zip(perturbation.r.data()).map(|(a, b)| a + b).collect();

    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(sample.input.shape(), adv_input)?);
    let fwd = model.record(&mut tape, x, kernels.as_deref(), steps, true)?;
    let nll = crf::crf_nll_loss(&mut tape, fwd.probs, Arc::clone(&sample.labels))?;
    let adv = tape.value(nll).item();
    tape.backward(nll)?;
    for (acc, g) in grads.iter_mut().zip(grads_of(&mut tape, &fwd.params, model)) {
        acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    Ok(SampleResult { loss: emp + adv, grads, labels, degenerate: false })
}

/// Batch objective and gradient: sample terms averaged over the batch, plus
/// `lambda / 2 ||theta_crf||^2` for CRF variants. Samples are reduced in
/// batch order whatever the thread count.
pub fn batch_gradients(
    model: &SegModel,
    batch: &[&PreparedSample],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Vec<f64>>, Vec<f64>)> {
    let mut grads: Vec<Vec<f64>> = model.named_params().iter().map(|(_, p)| vec![0.0; p.len()]).collect();
    let mut loss = 0.0;
    let mut dices = Vec::with_capacity(batch.len());
    let chunk = rayon::current_num_threads().max(1);
    for group in batch.chunks(chunk) {
        let results: Vec<Result<SampleResult>> = group.par_iter().map(|s| sample_gradients(model, s, cfg)).collect();
        for (s, r) in group.iter().zip(results) {
            let r = r?;
            loss += r.loss;
            dices.push(dice(&r.labels, &s.labels)?);
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    loss *= inv;
    grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= inv));
    if cfg.lambda > 0.0 {
        let params = model.named_params();
        for i in model.penalized_params() {
            let theta = params[i].1.value.data();
            loss += 0.5 * cfg.lambda * theta.iter().map(|v| v * v).sum::<f64>();
            grads[i].iter_mut().zip(theta).for_each(|(g, t)| *g += cfg.lambda * t);
        }
    }
    Ok((loss, grads, dices))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub dice_train: f64,
}

/// Everything needed to continue or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: SegModel,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub norm: Option<NormStats>,
    pub log: Vec<EpochLog>,
}

impl TrainState {
    /// Fresh model for `cfg`, prior from the training masks.
    pub fn new(cfg: TrainConfig, train: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let prior = estimate_prior(train)?;
        let model = SegModel::new(cfg.variant, &cfg.model, &prior.values, cfg.seed)?;
        let adam = Adam::new(AdamConfig::from(&cfg), &model);
        Ok(TrainState { config: cfg, model, adam, epoch: 0, norm: train.norm.clone(), log: Vec::new() })
    }

    /// Deterministic sample order for an epoch.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// One optimiser step on a batch; returns the batch loss.
    pub fn step(&mut self, batch: &[&PreparedSample]) -> Result<(f64, Vec<f64>)> {
        let step = self.adam.t + 1;
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::TrainingDiverged { step },
            other => other,
        };
        let (loss, grads, dices) = batch_gradients(&self.model, batch, &self.config).map_err(diverged)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step });
        }
        self.adam.step(&mut self.model, &grads).map_err(diverged)?;
        Ok((loss, dices))
    }

    /// Runs one epoch over prepared samples.
    pub fn run_epoch(&mut self, samples: &[PreparedSample]) -> Result<EpochLog> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let order = self.epoch_order(self.epoch, samples.len());
        let (mut loss_sum, mut dice_sum, mut batches) = (0.0, 0.0, 0usize);
        for idx in order.chunks(self.config.batch_size) {
            let batch: Vec<&PreparedSample> = idx.iter().map(|&i| &samples[i]).collect();
            let (loss, dices) = self.step(&batch)?;
            loss_sum += loss;
            dice_sum += dices.iter().sum::<f64>();
            batches += 1;
        }
        self.epoch += 1;
        let entry = EpochLog {
            epoch: self.epoch,
            loss: loss_sum / batches as f64,
            dice_train: dice_sum / samples.len() as f64,
        };
        self.log.push(entry);
        log::info!(
            "{} epoch {}: loss {:.5} train dice {:.4}",
            self.config.variant,
            entry.epoch,
            entry.loss,
            entry.dice_train
        );
        Ok(entry)
    }

    /// Trains until `config.epochs` epochs are complete.
    pub fn train_to_end(&mut self, train: &Dataset) -> Result<()> {
        if train.split != Split::Train {
            return Err(Error::NotTrainSplit);
        }
        let samples = prepare(train);
        while self.epoch < self.config.epochs {
            self.run_epoch(&samples)?;
        }
        Ok(())
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("epoch,loss,dice_train\n");
        for e in &self.log {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.loss, e.dice_train));
        }
        out
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        let json = serde_json::to_string(&self.config).expect("config serializes");
        ck.push_bytes("config", json.as_bytes());
        ck.push_u64("state", &[self.epoch as u64, self.adam.t]);
        ck.push_u64("rng", &[self.config.seed, self.epoch as u64]);
        for (i, (name, p)) in self.model.named_params().into_iter().enumerate() {
            ck.push_f64(format!("param.{name}"), p.value.shape(), p.value.data());
            ck.push_f64(format!("adam.m.{name}"), p.value.shape(), &self.adam.m[i]);
            ck.push_f64(format!("adam.v.{name}"), p.value.shape(), &self.adam.v[i]);
        }
        if let Some(norm) = &self.norm {
            ck.push_f64("norm.mean", &[norm.mean.len()], &norm.mean);
            ck.push_f64("norm.std", &[norm.std.len()], &norm.std);
        }
        let log: Vec<f64> = self.log.iter().flat_map(|e| [e.epoch as f64, e.loss, e.dice_train]).collect();
        ck.push_f64("log", &[self.log.len(), 3], &log);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: TrainConfig = serde_json::from_slice(ck.bytes("config")?)
            .map_err(|e| Error::Checkpoint(format!("bad config record: {e}")))?;
        let state = ck.u64s("state")?;
        if state.len() != 2 {
            return Err(Error::Checkpoint("bad state record".into()));
        }
        let mut model =
            SegModel::new(config.variant, &config.model, &vec![0.5; crate::dataio::NUM_PIXELS], config.seed)?;
        let mut adam = Adam::new(AdamConfig::from(&config), &model);
        adam.t = state[1];
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        for (i, (name, p)) in names.iter().zip(model.params_mut()).enumerate() {
            let (shape, data) = ck.f64s(&format!("param.{name}"))?;
            if shape != p.value.shape() {
                return Err(Error::Checkpoint(format!("`{name}` has shape {shape:?}, expected {:?}", p.value.shape())));
            }
            p.value = Arc::new(Tensor::new(shape, data.to_vec())?);
            adam.m[i] = ck.f64s(&format!("adam.m.{name}"))?.1.to_vec();
            adam.v[i] = ck.f64s(&format!("adam.v.{name}"))?.1.to_vec();
        }
        let norm = match (ck.f64s("norm.mean"), ck.f64s("norm.std")) {
            (Ok((_, mean)), Ok((_, std))) => Some(NormStats { mean: mean.to_vec(), std: std.to_vec() }),
            _ => None,
        };
        let log = ck
            .f64s("log")?
            .1
            .chunks(3)
            .map(|c| EpochLog { epoch: c[0] as usize, loss: c[1], dice_train: c[2] })
            .collect();
        Ok(TrainState { config, model, adam, epoch: state[0] as usize, norm, log })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Trains a fresh model on a preprocessed, augmented training split.
pub fn train(train: &Dataset, cfg: TrainConfig) -> Result<TrainState> {
    if train.split != Split::Train {
        return Err(Error::NotTrainSplit);
    }
    let mut state = TrainState::new(cfg, train)?;
    state.train_to_end(train)?;
    Ok(state)
}

/// Test-set metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub variant: Variant,
    pub per_sample: Vec<(String, f64)>,
    pub mean_dice: f64,
    /// `(width, pooled accuracy)` for widths 1-5.
    pub trimap: Vec<(usize, f64)>,
    /// Samples whose trimap band was empty.
    pub empty_bands: usize,
    pub predictions: Vec<Vec<u8>>,
}

impl EvalReport {
    pub fn per_sample_csv(&self) -> String {
        let mut out = String::from("sample_id,dice\n");
        for (id, d) in &self.per_sample {
            out.push_str(&format!("{id},{d}\n"));
        }
        out
    }

    pub fn trimap_csv(&self) -> String {
        let mut out = String::from("width,accuracy\n");
        for (w, a) in &self.trimap {
            out.push_str(&format!("{w},{a}\n"));
        }
        out
    }
}

pub const TRIMAP_WIDTHS: [usize; 5] = [1, 2, 3, 4, 5];

/// Argmax predictions at test-time step count, with Dice and pooled trimap
/// accuracy.
pub fn evaluate(model: &SegModel, samples: &[PreparedSample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let predictions: Vec<Vec<u8>> = samples.par_iter().map(|s| model.predict_labels(s)).collect::<Result<_>>()?;
    let size = model.image_size();
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut tallies = [TrimapTally::default(); 5];
    let mut empty_bands = 0;
    for (s, pred) in samples.iter().zip(&predictions) {
        per_sample.push((s.id.clone(), dice(pred, &s.labels)?));
        for (t, &w) in tallies.iter_mut().zip(&TRIMAP_WIDTHS) {
            let one = trimap_tally(pred, &s.labels, size, size, w)?;
            if w == 1 && one.is_empty() {
                empty_bands += 1;
            }
            t.add(one);
        }
    }
    if empty_bands > 0 {
        log::warn!("{empty_bands} sample(s) have an empty trimap band (all-background or all-foreground mask)");
    }
    let mean_dice = per_sample.iter().map(|(_, d)| d).sum::<f64>() / samples.len() as f64;
    let trimap = TRIMAP_WIDTHS.iter().zip(&tallies).map(|(&w, t)| (w, t.accuracy())).collect();
    Ok(EvalReport { variant: model.variant, per_sample, mean_dice, trimap, empty_bands, predictions })
}

/// Evaluates a trained state on a test split, normalising with the stored
/// training statistics. `expected` guards against evaluating the wrong head.
pub fn evaluate_state(state: &TrainState, test: &Dataset, expected: Option<Variant>) -> Result<EvalReport> {
    if let Some(v) = expected {
        if v != state.config.variant {
            return Err(Error::VariantMismatch { expected: v.to_string(), found: state.config.variant.to_string() });
        }
    }
    let mut test = test.clone();
    test.norm = state.norm.clone();
    evaluate(&state.model, &prepare(&test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn adam_cfg() -> AdamConfig {
        AdamConfig { lr: 0.003, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    #[test]
    fn three_step_trace() {
        let (mut th, mut m, mut v) = ([1.0], [0.0], [0.0]);
        let want = [0.99700000006, 0.9964255059682533, 0.994614896910486];
        for (t, (g, w)) in [0.5, -0.3, 0.8].iter().zip(want).enumerate() {
            adam_step(&mut th, &[*g], &mut m, &mut v, t as u64 + 1, &adam_cfg()).unwrap();
            assert!((th[0] - w).abs() < 1e-12, "step {}: {} vs {w}", t + 1, th[0]);
        }
        assert!((m[0] - 0.0935).abs() < 1e-15);
        assert!((v[0] - 0.000979410250000001).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let (mut th, mut m, mut v) = ([2.0, -1.0], [0.0, 0.0], [0.0, 0.0]);
        adam_step(&mut th, &[0.0, 0.0], &mut m, &mut v, 1, &adam_cfg()).unwrap();
        assert_eq!(th, [2.0, -1.0]);
        let (mut th, mut m, mut v) = ([2.0], [0.5], [0.04]);
        adam_step(&mut th, &[0.0], &mut m, &mut v, 3, &adam_cfg()).unwrap();
        assert!((m[0] - 0.45).abs() < 1e-15 && (v[0] - 0.03996).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let (mut th, mut m, mut v) = ([0.0], [0.0], [0.0]);
        let mut prev = 0.0;
        for t in 1..=500 {
            prev = th[0];
            adam_step(&mut th, &[0.7], &mut m, &mut v, t, &adam_cfg()).unwrap();
        }
        let step = prev - th[0];
        assert!((step - 0.003).abs() / 0.003 < 0.01);
    }
}
