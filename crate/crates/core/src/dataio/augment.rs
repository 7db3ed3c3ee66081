use super::{AugmentationTag, Dataset, SegmentationSample, Split, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn flip<T: Copy>(src: &[T], horizontal: bool, vertical: bool) -> Vec<T> {
    let n = IMAGE_SIZE;
    let mut out = Vec::with_capacity(src.len());
    for y in 0..n {
        let sy = if vertical { n - 1 - y } else { y };
        for x in 0..n {
            let sx = if horizontal { n - 1 - x } else { x };
            out.push(src[sy * n + sx]);
        }
    }
    out
}

/// Mirrors a row-major 40x40 map (`horizontal` reverses columns).
pub fn flip_values(src: &[f64], horizontal: bool, vertical: bool) -> Vec<f64> {
    flip(src, horizontal, vertical)
}

/// Mirrors a row-major 40x40 label map.
pub fn flip_labels(src: &[u8], horizontal: bool, vertical: bool) -> Vec<u8> {
    flip(src, horizontal, vertical)
}

/// Expands every training sample into itself plus its horizontal, vertical
/// and double flips, in that order.
pub fn augment(train: &Dataset) -> Result<Dataset> {
    if train.split != Split::Train {
        return Err(Error::NotTrainSplit);
    }
    let mut samples = Vec::with_capacity(train.samples.len() * 4);
    for s in &train.samples {
        let (h0, v0) = s.tag.flags();
        for (h, v) in [(false, false), (true, false), (false, true), (true, true)] {
            let image = Tensor::new(s.image.shape(), flip_values(s.image.data(), h, v))?;
            let tag = AugmentationTag::from_flags(h0 ^ h, v0 ^ v);
            samples.push(SegmentationSample {
                id: format!("{}{}", s.id, AugmentationTag::from_flags(h, v).suffix()),
                image,
                mask: flip_labels(&s.mask, h, v),
                tag,
            });
        }
    }
    Ok(Dataset { samples, split: Split::Train, norm: train.norm.clone() })
}
