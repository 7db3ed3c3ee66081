//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use masscrf::crf::CrfParams;
use masscrf::gradcheck::small_networks;
use masscrf::model::{PreparedSample, SegModel, Variant};
use masscrf::Tensor;
use rand::Rng;

pub const SMALL: usize = 8;

/// An `8 x 8` sample with a noisy disc.
pub fn small_sample(rng: &mut impl Rng) -> PreparedSample {
    let (cy, cx, r) = (rng.gen_range(2.5..5.5), rng.gen_range(2.5..5.5), rng.gen_range(1.5..3.0));
    let n = SMALL * SMALL;
    let labels: Vec<u8> = (0..n)
        .map(|i| {
            let (y, x) = ((i / SMALL) as f64, (i % SMALL) as f64);
            u8::from((y - cy).powi(2) + (x - cx).powi(2) <= r * r)
        })
        .collect();
    let crf_image = Tensor::from_fn(&[1, 1, SMALL, SMALL], |i| {
        (0.3 + 0.4 * f64::from(labels[i]) + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0)
    });
    let input =
        Tensor::new(&[1, 1, SMALL, SMALL], crf_image.data().iter().map(|v| (v - 0.5) / 0.25).collect()).unwrap();
    PreparedSample { id: "small".into(), input, crf_image, labels: labels.into() }
}

/// A variant built from the small `8 x 8` networks.
pub fn small_model(rng: &mut impl Rng, variant: Variant, crf: CrfParams) -> SegModel {
    let nets = if variant.is_multi() { small_networks() } else { small_networks().into_iter().take(1).collect() };
    let prior: Vec<f64> = (0..SMALL * SMALL).map(|_| rng.gen_range(0.05..0.95)).collect();
    SegModel::with_networks(variant, nets, crf, &prior, rng.gen()).unwrap()
}

/// Bit patterns of every parameter, for exact comparisons.
pub fn param_bits(model: &SegModel) -> Vec<u64> {
    model.named_params().iter().flat_map(|(_, p)| p.value.data().iter().map(|v| v.to_bits())).collect()
}
