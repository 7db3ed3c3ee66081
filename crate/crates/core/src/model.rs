//! The eight segmentation variants: one or four FCNs, optionally fused, with
//! or without the CRF head. Adversarial training is a property of how a
//! variant is trained, not of its forward pass.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::crf::{self, CrfParams, KernelMatrix};
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::fcn::{self, FcnConfig, FcnModel};
use crate::params::{record_params, Param};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Fcn,
    FcnAdv,
    FcnCrf,
    FcnCrfAdv,
    MultiFcn,
    MultiFcnAdv,
    MultiFcnCrf,
    MultiFcnCrfAdv,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Fcn,
        Variant::FcnAdv,
        Variant::FcnCrf,
        Variant::FcnCrfAdv,
        Variant::MultiFcn,
        Variant::MultiFcnAdv,
        Variant::MultiFcnCrf,
        Variant::MultiFcnCrfAdv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Fcn => "fcn",
            Variant::FcnAdv => "fcn_adv",
            Variant::FcnCrf => "fcn_crf",
            Variant::FcnCrfAdv => "fcn_crf_adv",
            Variant::MultiFcn => "multi_fcn",
            Variant::MultiFcnAdv => "multi_fcn_adv",
            Variant::MultiFcnCrf => "multi_fcn_crf",
            Variant::MultiFcnCrfAdv => "multi_fcn_crf_adv",
        }
    }

    pub fn is_multi(self) -> bool {
        matches!(self, Variant::MultiFcn | Variant::MultiFcnAdv | Variant::MultiFcnCrf | Variant::MultiFcnCrfAdv)
    }

    pub fn has_crf(self) -> bool {
        matches!(self, Variant::FcnCrf | Variant::FcnCrfAdv | Variant::MultiFcnCrf | Variant::MultiFcnCrfAdv)
    }

    pub fn is_adversarial(self) -> bool {
        matches!(self, Variant::FcnAdv | Variant::FcnCrfAdv | Variant::MultiFcnAdv | Variant::MultiFcnCrfAdv)
    }

    /// The same head trained without adversarial examples.
    pub fn head(self) -> Variant {
        match self {
            Variant::FcnAdv => Variant::Fcn,
            Variant::FcnCrfAdv => Variant::FcnCrf,
            Variant::MultiFcnAdv => Variant::MultiFcn,
            Variant::MultiFcnCrfAdv => Variant::MultiFcnCrf,
            other => other,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::Config(format!("unknown variant `{s}`; expected one of: {}", names.join(", ")))
        })
    }
}

/// Architecture choices shared by every variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Network used by the single-FCN variants.
    pub network: String,
    pub crf: CrfParams,
    pub train_prior: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec { network: "fcn1".into(), crf: CrfParams::default(), train_prior: true }
    }
}

/// A network input together with what the loss and the CRF need.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub id: String,
    /// `[1, 1, S, S]` network input (normalised).
    pub input: Tensor,
    /// `[1, 1, S, S]` enhanced image in `[0, 1]`, the CRF's bilateral feature.
    pub crf_image: Tensor,
    pub labels: Arc<[u8]>,
}

/// Pairs each sample's network input with its clean image and labels.
pub fn prepare(ds: &Dataset) -> Vec<PreparedSample> {
    (0..ds.len())
        .map(|i| {
            let s = &ds.samples[i];
            PreparedSample {
                id: s.id.clone(),
                input: ds.input(i),
                crf_image: s.image.clone(),
                labels: s.mask.iter().copied().collect(),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    pub variant: Variant,
    pub fcns: Vec<FcnModel>,
    /// Unary fusion weights, multi-FCN variants only.
    pub fusion: Option<Param>,
    /// Kernel weights, CRF variants only.
    pub crf_weights: Option<Param>,
    pub crf: CrfParams,
}

/// Vars for every parameter plus the output of one recorded forward pass.
pub struct Forward {
    pub params: Vec<Var>,
    /// `[2, N]` final probabilities (FCN output or CRF marginals).
    pub probs: Var,
}

impl SegModel {
    /// Builds a variant from the standard 40x40 network rows.
    pub fn new(variant: Variant, spec: &ModelSpec, prior: &[f64], seed: u64) -> Result<Self> {
        let nets = if variant.is_multi() { FcnConfig::all() } else { vec![FcnConfig::by_name(&spec.network)?] };
        let mut model = Self::with_networks(variant, nets, spec.crf.clone(), prior, seed)?;
        for f in &mut model.fcns {
            f.set_prior_trainable(spec.train_prior);
        }
        Ok(model)
    }

    /// Builds a variant from explicit network configs (1, or 4 for multi).
    pub fn with_networks(
        variant: Variant,
        nets: Vec<FcnConfig>,
        crf: CrfParams,
        prior: &[f64],
        seed: u64,
    ) -> Result<Self> {
        let want = if variant.is_multi() { 4 } else { 1 };
        if nets.len() != want {
            return Err(Error::LengthMismatch(format!("{variant} needs {want} networks, got {}", nets.len())));
        }
        crf.validate()?;
        let fcns = nets
            .into_iter()
            .enumerate()
            .map(|(k, cfg)| FcnModel::new(cfg, prior, seed.wrapping_add(k as u64)))
            .collect::<Result<Vec<_>>>()?;
        let fusion =
            variant.is_multi().then(|| Param::new("fusion.w", Tensor::full(&[fcns.len()], 1.0 / fcns.len() as f64)));
        let crf_weights = variant
            .has_crf()
            .then(|| Param::new("crf.w", Tensor::new(&[crf.weights.len()], crf.weights.clone()).expect("1-d")));
        Ok(SegModel { variant, fcns, fusion, crf_weights, crf })
    }

    pub fn image_size(&self) -> usize {
        self.fcns[0].config.image_size
    }

    /// Every parameter with its qualified name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        for f in &self.fcns {
            for p in &f.params {
                out.push((format!("{}.{}", f.config.name, p.name), p));
            }
        }
        out.extend(self.fusion.iter().map(|p| (p.name.clone(), p)));
        out.extend(self.crf_weights.iter().map(|p| (p.name.clone(), p)));
        out
    }

    /// Mutable parameters in [`SegModel::named_params`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self.fcns.iter_mut().flat_map(|f| f.params.iter_mut()).collect();
        out.extend(self.fusion.iter_mut());
        out.extend(self.crf_weights.iter_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Indices (in parameter order) of the weights the L2 penalty covers:
    /// the CRF kernel weights and, alongside them, the fusion weights.
    pub fn penalized_params(&self) -> Vec<usize> {
        if !self.variant.has_crf() {
            return Vec::new();
        }
        let base = self.fcns.len() * FcnModel::PARAM_COUNT;
        (base..base + usize::from(self.fusion.is_some()) + 1).collect()
    }

    /// `sum ||theta_crf||^2` over [`SegModel::penalized_params`].
    pub fn penalty_norm_sq(&self) -> f64 {
        let params = self.named_params();
        self.penalized_params().into_iter().map(|i| params[i].1.value.data().iter().map(|v| v * v).sum::<f64>()).sum()
    }

    /// CRF kernels for a sample, if this variant has a CRF head.
    pub fn kernels_for(&self, crf_image: &Tensor) -> Result<Option<Vec<KernelMatrix>>> {
        if !self.variant.has_crf() {
            return Ok(None);
        }
        crf::build_kernels(crf_image, &self.crf).map(Some)
    }

    /// Records the forward pass from an already-recorded input.
    /// `trainable` controls whether the parameters ask for gradients.
    pub fn record(
        &self,
        tape: &mut Tape,
        input: Var,
        kernels: Option<&[KernelMatrix]>,
        steps: usize,
        trainable: bool,
    ) -> Result<Forward> {
        let named = self.named_params();
        let params: Vec<Var> = if trainable {
            record_params(tape, named.iter().map(|(_, p)| *p))
        } else {
            named.iter().map(|(_, p)| tape.leaf_shared(Arc::clone(&p.value), false)).collect()
        };
        let probs = self.record_with(tape, &params, input, kernels, steps)?;
        Ok(Forward { params, probs })
    }

    /// Forward pass against parameter vars recorded in
    /// [`SegModel::named_params`] order.
    pub fn record_with(
        &self,
        tape: &mut Tape,
        params: &[Var],
        input: Var,
        kernels: Option<&[KernelMatrix]>,
        steps: usize,
    ) -> Result<Var> {
        let n = self.image_size() * self.image_size();
        let per = FcnModel::PARAM_COUNT;
        let mut outputs = Vec::with_capacity(self.fcns.len());
        for (k, f) in self.fcns.iter().enumerate() {
            let p = f.record(tape, &params[k * per..(k + 1) * per], input)?;
            if tape.value(p).shape()[0] != 1 {
                return Err(Error::shape("SegModel runs one image per tape"));
            }
            outputs.push(tape.reshape(p, &[fcn::NUM_CLASSES, n])?);
        }
        let mut next = self.fcns.len() * per;
        let unary = if self.variant.is_multi() {
            let fields = outputs.iter().map(|&p| fcn::unary_from_fcn(tape, p)).collect::<Result<Vec<_>>>()?;
            let w = params[next];
            next += 1;
            Some(fcn::fuse_unaries(tape, &fields, w)?)
        } else if self.variant.has_crf() {
            Some(fcn::unary_from_fcn(tape, outputs[0])?)
        } else {
            None
        };
        match (unary, self.variant.has_crf()) {
            (None, _) => Ok(outputs[0]),
            (Some(u), false) => crf::record_unary_init(tape, u),
            (Some(u), true) => {
                let kernels = kernels.ok_or_else(|| Error::BadParam("CRF head needs kernels".into()))?;
                crf::record_crf_infer(tape, u, kernels, params[next], steps, self.crf.update_form)
            }
        }
    }

    /// `[2, N]` probabilities for one sample at test-time step count.
    pub fn predict(&self, sample: &PreparedSample) -> Result<Tensor> {
        let kernels = self.kernels_for(&sample.crf_image)?;
        let mut tape = Tape::new();
        let input = tape.constant(sample.input.clone());
        let fwd = self.record(&mut tape, input, kernels.as_deref(), self.crf.steps_test, false)?;
        Ok(tape.value(fwd.probs).clone())
    }

    /// Argmax labels at test-time step count.
    pub fn predict_labels(&self, sample: &PreparedSample) -> Result<Vec<u8>> {
        Ok(crf::argmax_labels(&self.predict(sample)?))
    }

    /// Mean per-pixel NLL of a sample's labels, training step count.
    pub fn sample_nll(&self, sample: &PreparedSample, input: &Tensor) -> Result<f64> {
        let kernels = self.kernels_for(&sample.crf_image)?;
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let fwd = self.record(&mut tape, x, kernels.as_deref(), self.crf.steps_train, false)?;
        let loss = crf::crf_nll_loss(&mut tape, fwd.probs, Arc::clone(&sample.labels))?;
        Ok(tape.value(loss).item())
    }
}
