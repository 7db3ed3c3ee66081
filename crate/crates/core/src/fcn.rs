//! The four unary sub-networks, their position-prior bias, and unary fusion.
//!
//! Each network is conv(same)+tanh+pool, conv(same)+tanh+pool,
//! conv(valid)+tanh, then a full-size transposed convolution whose output is
//! centre-cropped, offset by a per-pixel log-prior bias map, and softmaxed
//! over the two labels.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{glorot_uniform, record_params, Param};
use crate::tensor::{Padding, Tape, Tensor, Var};

/// Probability floor inside `-log p`.
pub const PROB_FLOOR: f64 = 1e-12;
/// Smoothing added to the prior before taking logs for the bias map.
pub const PRIOR_SMOOTHING: f64 = 1e-6;
pub const NUM_CLASSES: usize = 2;

/// Filters and kernel size of one convolutional layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
}

const fn layer(filters: usize, k: usize) -> LayerSpec {
    LayerSpec { filters, kh: k, kw: k }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FcnConfig {
    pub name: String,
    pub layers: [LayerSpec; 3],
    /// Input and output side length; must be divisible by 4.
    pub image_size: usize,
}

impl FcnConfig {
    pub const NAMES: [&'static str; 4] = ["fcn1", "fcn2", "fcn3", "fcn4"];

    /// Table rows for the 40x40 ROIs.
    pub fn by_name(name: &str) -> Result<Self> {
        let layers = match name {
            "fcn1" => [layer(6, 5), layer(12, 5), layer(588, 7)],
            "fcn2" => [layer(9, 4), layer(12, 4), layer(588, 7)],
            "fcn3" => [layer(16, 3), layer(13, 3), layer(415, 8)],
            "fcn4" => [layer(37, 2), layer(12, 2), layer(355, 9)],
            other => {
                return Err(Error::Config(format!(
                    "unknown network `{other}` (expected one of {})",
                    Self::NAMES.join("|")
                )))
            }
        };
        Ok(FcnConfig { name: name.to_string(), layers, image_size: 40 })
    }

    /// All four rows in order.
    pub fn all() -> Vec<FcnConfig> {
        Self::NAMES.iter().map(|n| Self::by_name(n).expect("built-in")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if s == 0 || s % 4 != 0 {
            return Err(Error::BadParam(format!("image size {s} must be a positive multiple of 4")));
        }
        if self.layers.iter().any(|l| l.filters == 0 || l.kh == 0 || l.kw == 0) {
            return Err(Error::BadParam(format!("{}: empty layer", self.name)));
        }
        let l3 = self.layers[2];
        if l3.kh > s / 4 || l3.kw > s / 4 {
            return Err(Error::BadParam(format!(
                "{}: layer-3 kernel {}x{} exceeds the {}x{} pooled map",
                self.name,
                l3.kh,
                l3.kw,
                s / 4,
                s / 4
            )));
        }
        Ok(())
    }

    /// Spatial size after the valid layer-3 convolution.
    pub fn layer3_output(&self) -> (usize, usize) {
        let q = self.image_size / 4;
        (q - self.layers[2].kh + 1, q - self.layers[2].kw + 1)
    }

    /// Spatial size of the transposed-convolution output before cropping.
    pub fn uncropped_output(&self) -> (usize, usize) {
        let (h, w) = self.layer3_output();
        (h - 1 + self.image_size, w - 1 + self.image_size)
    }

    /// Kernel + bias counts of the three convolutional layers.
    pub fn layer_param_counts(&self) -> [usize; 3] {
        let mut cin = 1;
        self.layers.map(|l| {
            let n = l.filters * cin * l.kh * l.kw + l.filters;
            cin = l.filters;
            n
        })
    }

    /// Every parameter including the output layer and the prior bias map.
    pub fn param_count(&self) -> usize {
        let s = self.image_size;
        let conv: usize = self.layer_param_counts().iter().sum();
        conv + self.layers[2].filters * NUM_CLASSES * s * s + NUM_CLASSES * s * s
    }
}

/// `[2, S, S]` bias map: channel 1 is `ln(prior + 1e-6)`, channel 0 is
/// `ln(1 - prior + 1e-6)`.
pub fn prior_bias(prior: &[f64], size: usize) -> Result<Tensor> {
    if prior.len() != size * size {
        return Err(Error::shape(format!("prior has {} values for a {size}x{size} map", prior.len())));
    }
    let mut data = Vec::with_capacity(2 * prior.len());
    data.extend(prior.iter().map(|p| (1.0 - p + PRIOR_SMOOTHING).ln()));
    data.extend(prior.iter().map(|p| (p + PRIOR_SMOOTHING).ln()));
    Tensor::new(&[NUM_CLASSES, size, size], data)
}

/// One unary sub-network.
#[derive(Clone, Debug, PartialEq)]
pub struct FcnModel {
    pub config: FcnConfig,
    /// `l1.kernel, l1.bias, l2.kernel, l2.bias, l3.kernel, l3.bias,
    /// out.kernel, prior_bias`.
    pub params: Vec<Param>,
}

impl FcnModel {
    pub const PARAM_COUNT: usize = 8;
    const PRIOR_IDX: usize = 7;

    /// Glorot-initialised network with zero conv biases and the log-prior
    /// bias map. `prior` is row-major `image_size x image_size`.
    pub fn new(config: FcnConfig, prior: &[f64], seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(Self::PARAM_COUNT);
        let mut cin = 1;
        for (i, l) in config.layers.iter().enumerate() {
            let area = l.kh * l.kw;
            let kernel = glorot_uniform(&[l.filters, cin, l.kh, l.kw], cin * area, l.filters * area, &mut rng);
            params.push(Param::new(format!("l{}.kernel", i + 1), kernel));
            params.push(Param::new(format!("l{}.bias", i + 1), Tensor::zeros(&[l.filters])));
            cin = l.filters;
        }
        let s = config.image_size;
        let out = glorot_uniform(&[cin, NUM_CLASSES, s, s], cin * s * s, NUM_CLASSES * s * s, &mut rng);
        params.push(Param::new("out.kernel", out));
        params.push(Param::new("prior_bias", prior_bias(prior, s)?));
        Ok(FcnModel { config, params })
    }

    pub fn set_prior_trainable(&mut self, trainable: bool) {
        self.params[Self::PRIOR_IDX].trainable = trainable;
    }

    pub fn prior_bias(&self) -> &Tensor {
        &self.params[Self::PRIOR_IDX].value
    }

    /// Sets every convolution kernel and bias to zero, leaving the prior map.
    pub fn zero_weights(&mut self) {
        for p in &mut self.params[..Self::PRIOR_IDX] {
            Arc::make_mut(&mut p.value).data_mut().fill(0.0);
        }
    }

    /// Records the forward pass. `vars` are this model's parameters as
    /// recorded by [`record_params`]; `input` is `[B, 1, S, S]`. Returns
    /// `[B, 2, S, S]` probabilities.
    pub fn record(&self, tape: &mut Tape, vars: &[Var], input: Var) -> Result<Var> {
        if vars.len() != Self::PARAM_COUNT {
            return Err(Error::LengthMismatch(format!("{} parameter vars for an FCN", vars.len())));
        }
        let s = self.config.image_size;
        let x = tape.value(input);
        match x.shape() {
            [_, 1, h, w] if *h == s && *w == s => {}
            other => return Err(Error::shape(format!("FCN input must be [B, 1, {s}, {s}], got {other:?}"))),
        }
        let mut h = input;
        for (i, padding) in [Padding::Same, Padding::Same, Padding::Valid].into_iter().enumerate() {
            h = tape.conv2d(h, vars[2 * i], Some(vars[2 * i + 1]), padding)?;
            h = tape.tanh(h)?;
            if i < 2 {
                h = tape.maxpool2x2(h)?;
            }
        }
        let up = tape.transposed_conv2d(h, vars[6], None, 1)?;
        let cropped = tape.center_crop(up, s, s)?;
        let logits = tape.add_bias_map(cropped, vars[7])?;
        tape.softmax_channels(logits)
    }

    /// Inference without gradients: `[B, 1, S, S]` to `[B, 2, S, S]`.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.leaf_shared(Arc::clone(&p.value), false)).collect();
        let input = tape.constant(image.clone());
        let out = self.record(&mut tape, &vars, input)?;
        Ok(tape.value(out).clone())
    }

    /// Records parameters and forward pass together; returns `(param vars, probs)`.
    pub fn record_all(&self, tape: &mut Tape, input: Var) -> Result<(Vec<Var>, Var)> {
        let vars = record_params(tape, &self.params);
        let probs = self.record(tape, &vars, input)?;
        Ok((vars, probs))
    }
}

/// `psi = -ln(max(p, 1e-12))` on the tape.
pub fn unary_from_fcn(tape: &mut Tape, probs: Var) -> Result<Var> {
    tape.neg_log_floor(probs, PROB_FLOOR)
}

/// `sum_k w_k psi_k` on the tape.
pub fn fuse_unaries(tape: &mut Tape, fields: &[Var], weights: Var) -> Result<Var> {
    tape.weighted_sum(fields, weights)
}

/// Mean per-pixel negative log-likelihood of the true labels. `labels`
/// holds `B * S * S` entries matching `probs` `[B, 2, S, S]`.
pub fn fcn_nll_loss(tape: &mut Tape, probs: Var, labels: Arc<[u8]>) -> Result<Var> {
    tape.nll(probs, labels, PROB_FLOOR)
}

/// Tensor-level unary potential, `-ln(max(p, 1e-12))`.
pub fn unary_field(probs: &Tensor) -> Tensor {
    let data = probs.data().iter().map(|&p| -p.max(PROB_FLOOR).ln()).collect();
    Tensor::new(probs.shape(), data).expect("same shape")
}

/// Tensor-level weighted sum of unary fields.
pub fn fuse_fields(fields: &[Tensor], weights: &[f64]) -> Result<Tensor> {
    if fields.is_empty() || fields.len() != weights.len() {
        return Err(Error::LengthMismatch(format!("{} fields but {} weights", fields.len(), weights.len())));
    }
    let shape = fields[0].shape();
    let mut out = vec![0.0; fields[0].len()];
    for (f, &w) in fields.iter().zip(weights) {
        if f.shape() != shape {
            return Err(Error::shape(format!("fuse: {:?} vs {shape:?}", f.shape())));
        }
        for (o, v) in out.iter_mut().zip(f.data()) {
            *o += w * v;
        }
    }
    Tensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_prior(size: usize) -> Vec<f64> {
        (0..size * size).map(|i| (i % 97) as f64 / 96.0).collect()
    }

    #[test]
    fn output_shapes_for_all_rows() {
        let expect_uncropped = [(43, 43), (43, 43), (42, 42), (41, 41)];
        let image = Tensor::from_fn(&[1, 1, 40, 40], |i| ((i * 7) % 13) as f64 / 13.0 - 0.5);
        for (cfg, want) in FcnConfig::all().into_iter().zip(expect_uncropped) {
            assert_eq!(cfg.uncropped_output(), want, "{}", cfg.name);
            let model = FcnModel::new(cfg, &ramp_prior(40), 0).unwrap();
            let p = model.forward(&image).unwrap();
            assert_eq!(p.shape(), &[1, 2, 40, 40]);
            for i in 0..1600 {
                assert!((p.data()[i] + p.data()[1600 + i] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fcn1_intermediate_shapes() {
        let cfg = FcnConfig::by_name("fcn1").unwrap();
        assert_eq!(cfg.layer3_output(), (4, 4));
        let model = FcnModel::new(cfg, &ramp_prior(40), 1).unwrap();
        assert_eq!(model.params[4].value.shape(), &[588, 12, 7, 7]);
        assert_eq!(model.params[6].value.shape(), &[588, 2, 40, 40]);
    }

    #[test]
    fn zero_kernels_reproduce_prior() {
        let prior = ramp_prior(40);
        let mut model = FcnModel::new(FcnConfig::by_name("fcn3").unwrap(), &prior, 2).unwrap();
        model.zero_weights();
        let p = model.forward(&Tensor::full(&[1, 1, 40, 40], 0.3)).unwrap();
        for (i, &q) in prior.iter().enumerate() {
            let want = (q + PRIOR_SMOOTHING) / (1.0 + 2.0 * PRIOR_SMOOTHING);
            assert!((p.data()[1600 + i] - want).abs() < 1e-12, "pixel {i}");
            if (q - 0.5).abs() > 1e-9 {
                assert_eq!(p.data()[1600 + i] > 0.5, q > 0.5);
            }
        }
    }

    #[test]
    fn per_layer_counts_are_balanced() {
        let counts: Vec<[usize; 3]> = FcnConfig::all().iter().map(|c| c.layer_param_counts()).collect();
        assert_eq!(counts[0], [156, 1812, 346332]);
        for c in &counts[1..] {
            for l in 0..3 {
                let ratio = c[l] as f64 / counts[0][l] as f64;
                assert!((0.8..=1.2).contains(&ratio), "{c:?}");
            }
        }
    }

    #[test]
    fn unknown_name_is_config_error() {
        assert!(matches!(FcnConfig::by_name("fcn9"), Err(Error::Config(_))));
    }

    #[test]
    fn unary_floor_arithmetic() {
        let p = Tensor::new(&[1, 2, 1, 2], vec![0.5, 1.0, 0.5, 0.0]).unwrap();
        let u = unary_field(&p);
        assert!((u.data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(u.data()[1].abs() < 1e-15);
        assert!((u.data()[3] - 27.631021115928547).abs() < 1e-12);
    }

    #[test]
    fn fusion_examples() {
        let a = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.7 - 1.0);
        let b = Tensor::from_fn(&[2, 3], |i| (i * i) as f64);
        assert_eq!(fuse_fields(&[a.clone()], &[1.0]).unwrap(), a);
        let half = fuse_fields(&[a.clone(), a.clone()], &[0.5, 0.5]).unwrap();
        assert!(half.max_abs_diff(&a) < 1e-15);
        let sel = fuse_fields(&[a.clone(), b.clone(), b.clone(), b], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(sel, a);
        assert!(matches!(fuse_fields(&[a], &[1.0, 2.0]), Err(Error::LengthMismatch(_))));
    }

    #[test]
    fn nll_of_uniform_is_ln2() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::full(&[1, 2, 4, 4], 0.5));
        let labels: Arc<[u8]> = (0..16).map(|i| (i % 2) as u8).collect();
        let loss = fcn_nll_loss(&mut tape, p, labels).unwrap();
        assert!((tape.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn fusion_is_linear(vals in proptest::collection::vec(-5.0f64..5.0, 12), w in -2.0f64..2.0, c in -3.0f64..3.0) {
            let a = Tensor::new(&[2, 3], vals[..6].to_vec()).unwrap();
            let b = Tensor::new(&[2, 3], vals[6..].to_vec()).unwrap();
            let ca_b = Tensor::from_fn(&[2, 3], |i| c * a.data()[i] + b.data()[i]);
            let lhs = fuse_fields(&[ca_b], &[w]).unwrap();
            let fa = fuse_fields(&[a], &[w]).unwrap();
            let fb = fuse_fields(&[b], &[w]).unwrap();
            for i in 0..6 {
                prop_assert!((lhs.data()[i] - (c * fa.data()[i] + fb.data()[i])).abs() < 1e-12);
            }
        }

        #[test]
        fn unary_inverts_probabilities(p in 1e-10f64..1.0) {
            let t = Tensor::new(&[1], vec![p]).unwrap();
            prop_assert!(((-unary_field(&t).data()[0]).exp() - p).abs() < 1e-10);
        }
    }
}
