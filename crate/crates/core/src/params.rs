//! Named parameter tensors shared by the models and the optimizer.

use std::sync::Arc;

use rand::Rng;

use crate::tensor::{Tape, Tensor, Var};

/// A named tensor owned by a model.
///
/// Values sit behind an `Arc` so a tape can record them as leaves without
/// copying; the optimizer mutates through [`Arc::make_mut`] once the tape is
/// gone.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param { name: name.into(), value: Arc::new(value), trainable: true }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Records every parameter as a leaf, in order.
pub fn record_params<'a>(tape: &mut Tape, params: impl IntoIterator<Item = &'a Param>) -> Vec<Var> {
    params.into_iter().map(|p| tape.leaf_shared(Arc::clone(&p.value), p.trainable)).collect()
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-limit..=limit))
}
