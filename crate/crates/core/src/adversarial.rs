//! L2-normalised gradient perturbations and the combined training objective.

use std::sync::Arc;

use crate::crf;
use crate::error::{Error, Result};
use crate::model::{PreparedSample, SegModel};
use crate::tensor::{Tape, Tensor, Var};

/// Gradients with a smaller L2 norm are treated as zero.
pub const MIN_GRAD_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub r: Tensor,
    pub epsilon: f64,
    /// `||g||_2` of the gradient it was built from.
    pub source_grad_norm: f64,
}

/// Reverse-mode gradient of the scalar `f(image)` with respect to the image.
/// Anything else `f` records should be a constant so no other gradient is
/// accumulated.
pub fn input_gradient(image: &Tensor, f: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(image.clone(), true);
    let out = f(&mut tape, x)?;
    tape.backward(out)?;
    Ok(tape.take_grad(x).unwrap_or_else(|| Tensor::zeros(image.shape())))
}

/// `R = -epsilon * g / ||g||_2`.
pub fn make_perturbation(g: &Tensor, epsilon: f64) -> Result<Perturbation> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::BadParam(format!("epsilon must be positive, got {epsilon}")));
    }
    let norm = g.l2_norm();
    if !(norm >= MIN_GRAD_NORM) {
        return Err(Error::DegenerateGradient { norm });
    }
    let scale = -epsilon / norm;
    let r = Tensor::new(g.shape(), g.data().iter().map(|v| v * scale).collect())?;
    Ok(Perturbation { r, epsilon, source_grad_norm: norm })
}

/// `log p(y | I) = sum_i log Q_i(y_i)` recorded against a recorded input,
/// with the model's parameters as constants.
pub fn record_log_likelihood(
    model: &SegModel,
    tape: &mut Tape,
    input: Var,
    sample: &PreparedSample,
    kernels: Option<&[crf::KernelMatrix]>,
) -> Result<Var> {
    let fwd = model.record(tape, input, kernels, model.crf.steps_train, false)?;
    let nll = crf::crf_nll_loss(tape, fwd.probs, Arc::clone(&sample.labels))?;
    tape.scale(nll, -(sample.labels.len() as f64))
}

/// `grad_I log p(y | I)` at the sample's input.
pub fn likelihood_gradient(model: &SegModel, sample: &PreparedSample) -> Result<Tensor> {
    let kernels = model.kernels_for(&sample.crf_image)?;
    input_gradient(&sample.input, |tape, x| record_log_likelihood(model, tape, x, sample, kernels.as_deref()))
}

/// The adversarial input for a sample, or `None` when the likelihood
/// gradient is degenerate (the sample then trains on its clean input).
pub fn adversarial_input(model: &SegModel, sample: &PreparedSample, epsilon: f64) -> Result<Option<Tensor>> {
    let g = likelihood_gradient(model, sample)?;
    match make_perturbation(&g, epsilon) {
        Ok(p) => {
            let data = sample.input.data().iter().zip(p.r.data()).map(|(a, b)| a + b).collect();
            Ok(Some(Tensor::new(sample.input.shape(), data)?))
        }
        Err(Error::DegenerateGradient { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Mean NLL of the clean inputs.
pub fn empirical_loss(model: &SegModel, samples: &[PreparedSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let total = samples.iter().map(|s| model.sample_nll(s, &s.input)).sum::<Result<f64>>()?;
    Ok(total / samples.len() as f64)
}

/// Mean NLL of the adversarially perturbed inputs; degenerate samples
/// contribute their clean loss.
pub fn adversarial_loss(model: &SegModel, samples: &[PreparedSample], epsilon: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for s in samples {
        let input = adversarial_input(model, s, epsilon)?.unwrap_or_else(|| s.input.clone());
        total += model.sample_nll(s, &input)?;
    }
    Ok(total / samples.len() as f64)
}

/// `L_adv + L_emp + lambda / 2 * ||theta_crf||^2`.
pub fn total_loss(model: &SegModel, samples: &[PreparedSample], epsilon: f64, lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::BadParam(format!("lambda must be >= 0, got {lambda}")));
    }
    let adv = adversarial_loss(model, samples, epsilon)?;
    let emp = empirical_loss(model, samples)?;
    Ok(adv + emp + 0.5 * lambda * model.penalty_norm_sq())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sum_of_pixels_has_unit_gradient() {
        let img = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64);
        let g = input_gradient(&img, |t, x| t.sum(x)).unwrap();
        assert!(g.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let img = Tensor::from_fn(&[1, 1, 2, 2], |i| i as f64);
        let g = input_gradient(&img, |t, _| Ok(t.constant(Tensor::scalar(3.0)))).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn three_four_five() {
        let g = Tensor::new(&[2], vec![3.0, 4.0]).unwrap();
        let p = make_perturbation(&g, 1.0).unwrap();
        assert!((p.r.data()[0] + 0.6).abs() < 1e-15);
        assert!((p.r.data()[1] + 0.8).abs() < 1e-15);
        assert_eq!(p.source_grad_norm, 5.0);
    }

    #[test]
    fn zero_gradient_is_degenerate() {
        let g = Tensor::zeros(&[4]);
        assert!(matches!(make_perturbation(&g, 0.1), Err(Error::DegenerateGradient { .. })));
    }

    proptest! {
        #[test]
        fn norm_is_epsilon(v in proptest::collection::vec(-10.0f64..10.0, 1..50), eps in 1e-4f64..5.0) {
            let g = Tensor::new(&[v.len()], v).unwrap();
            prop_assume!(g.l2_norm() >= MIN_GRAD_NORM);
            let p = make_perturbation(&g, eps).unwrap();
            prop_assert!((p.r.l2_norm() - eps).abs() <= 1e-9 * eps);
            let directional: f64 = g.data().iter().zip(p.r.data()).map(|(a, b)| a * b).sum();
            prop_assert!(directional <= 0.0);
        }

        #[test]
        fn scale_invariant(v in proptest::collection::vec(-10.0f64..10.0, 1..20), c in 1e-3f64..1e3) {
            let g = Tensor::new(&[v.len()], v.clone()).unwrap();
            prop_assume!(g.l2_norm() >= 1e-6);
            let cg = Tensor::new(&[v.len()], v.iter().map(|x| x * c).collect()).unwrap();
            let (a, b) = (make_perturbation(&g, 0.1).unwrap(), make_perturbation(&cg, 0.1).unwrap());
            prop_assert!(a.r.max_abs_diff(&b.r) < 1e-12);
        }
    }
}
