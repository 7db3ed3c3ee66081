//! Samples, datasets, and the preprocessing/augmentation pipeline.

mod augment;
mod files;
mod preprocess;
mod synth;

pub use augment::{augment, flip_labels, flip_values};
pub use files::{load_masks_dir, write_dataset_dir, Manifest};
pub use preprocess::{enhance, normalize, percentile, preprocess, RawImage};
pub use synth::{synth_generate, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Side length of every ROI the networks consume.
pub const IMAGE_SIZE: usize = 40;
/// Pixels per ROI.
pub const NUM_PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE;
/// Lower bound on the per-pixel std used by [`normalize`].
pub const STD_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (expected train|test)"))),
        }
    }
}

/// Which flips produced a sample from its original.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AugmentationTag {
    Orig,
    FlipH,
    FlipV,
    FlipHV,
}

impl AugmentationTag {
    pub fn from_flags(horizontal: bool, vertical: bool) -> Self {
        match (horizontal, vertical) {
            (false, false) => AugmentationTag::Orig,
            (true, false) => AugmentationTag::FlipH,
            (false, true) => AugmentationTag::FlipV,
            (true, true) => AugmentationTag::FlipHV,
        }
    }

    pub fn flags(self) -> (bool, bool) {
        match self {
            AugmentationTag::Orig => (false, false),
            AugmentationTag::FlipH => (true, false),
            AugmentationTag::FlipV => (false, true),
            AugmentationTag::FlipHV => (true, true),
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            AugmentationTag::Orig => "",
            AugmentationTag::FlipH => "_fh",
            AugmentationTag::FlipV => "_fv",
            AugmentationTag::FlipHV => "_fhv",
        }
    }
}

/// One 40x40 ROI: enhanced intensities in `[0, 1]` and a binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    pub id: String,
    /// `[1, 1, 40, 40]`.
    pub image: Tensor,
    /// Row-major labels, each 0 (background) or 1 (mass).
    pub mask: Vec<u8>,
    pub tag: AugmentationTag,
}

impl SegmentationSample {
    pub fn new(id: impl Into<String>, image: Tensor, mask: Vec<u8>) -> Result<Self> {
        if image.shape() != [1, 1, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(Error::shape(format!("sample image must be [1, 1, 40, 40], got {:?}", image.shape())));
        }
        if mask.len() != NUM_PIXELS {
            return Err(Error::shape(format!("sample mask has {} pixels", mask.len())));
        }
        if let Some(&v) = mask.iter().find(|&&v| v > 1) {
            return Err(Error::BadParam(format!("mask label {v} is not 0/1")));
        }
        Ok(SegmentationSample { id: id.into(), image, mask, tag: AugmentationTag::Orig })
    }

    pub fn foreground(&self) -> usize {
        self.mask.iter().filter(|&&v| v == 1).count()
    }
}

/// Per-pixel mean and std maps fitted on a training split.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population mean/std of every pixel across the samples' images.
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.split != Split::Train {
            return Err(Error::NotTrainSplit);
        }
        if train.samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = train.samples.len() as f64;
        let mut mean = vec![0.0; NUM_PIXELS];
        for s in &train.samples {
            for (m, v) in mean.iter_mut().zip(s.image.data()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; NUM_PIXELS];
        for s in &train.samples {
            for ((acc, v), m) in var.iter_mut().zip(s.image.data()).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
        Ok(NormStats { mean, std })
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<SegmentationSample>,
    pub split: Split,
    pub norm: Option<NormStats>,
}

impl Dataset {
    pub fn new(samples: Vec<SegmentationSample>, split: Split) -> Self {
        Dataset { samples, split, norm: None }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Fits [`NormStats`] on this (train) split and attaches them.
    pub fn fit_normalization(&mut self) -> Result<&NormStats> {
        let stats = NormStats::fit(self)?;
        Ok(self.norm.insert(stats))
    }

    /// Splits off the last `count` samples as a test set.
    pub fn split_off_test(mut self, count: usize) -> Result<(Dataset, Dataset)> {
        if count >= self.samples.len() {
            return Err(Error::BadParam(format!("cannot hold out {count} of {} samples", self.samples.len())));
        }
        let test = self.samples.split_off(self.samples.len() - count);
        Ok((Dataset::new(self.samples, Split::Train), Dataset::new(test, Split::Test)))
    }

    /// Runs [`enhance`] over every image in place.
    pub fn enhance_images(&mut self) -> Result<()> {
        for s in &mut self.samples {
            let raw = RawImage::new(IMAGE_SIZE, IMAGE_SIZE, s.image.data().to_vec())?;
            s.image = enhance(&raw)?;
        }
        Ok(())
    }

    /// The network input for sample `idx`: normalized if stats are attached.
    pub fn input(&self, idx: usize) -> Tensor {
        let image = &self.samples[idx].image;
        match &self.norm {
            Some(stats) => normalize(image, stats),
            None => image.clone(),
        }
    }
}

/// Empirical per-pixel foreground probability.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorMap {
    pub values: Vec<f64>,
}

impl PriorMap {
    /// Value at `(row, col)`.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * IMAGE_SIZE + col]
    }

    /// Position of the largest entry, first in row-major order on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / IMAGE_SIZE, best % IMAGE_SIZE)
    }
}

/// Per-pixel mean of the masks.
pub fn estimate_prior(train: &Dataset) -> Result<PriorMap> {
    if train.samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut values = vec![0.0; NUM_PIXELS];
    for s in &train.samples {
        for (v, &m) in values.iter_mut().zip(&s.mask) {
            *v += m as f64;
        }
    }
    let n = train.samples.len() as f64;
    values.iter_mut().for_each(|v| *v /= n);
    Ok(PriorMap { values })
}

/// Generates `cfg.count` synthetic samples, enhances them, and holds out the
/// last `test_count` as the test split.
pub fn synth_benchmark(cfg: &SynthConfig, test_count: usize) -> Result<(Dataset, Dataset)> {
    let mut all = synth_generate(cfg)?;
    all.enhance_images()?;
    all.split_off_test(test_count)
}

/// What training consumes: the train split, flipped four ways when
/// `with_flips`, with normalisation fitted on the result.
pub fn training_set(train: &Dataset, with_flips: bool) -> Result<Dataset> {
    let mut ds = if with_flips { augment(train)? } else { train.clone() };
    if ds.split != Split::Train {
        return Err(Error::NotTrainSplit);
    }
    ds.fit_normalization()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_with_mask(id: &str, mask: Vec<u8>) -> SegmentationSample {
        SegmentationSample::new(id, Tensor::zeros(&[1, 1, IMAGE_SIZE, IMAGE_SIZE]), mask).unwrap()
    }

    #[test]
    fn all_ones_masks_give_unit_prior() {
        let ds = Dataset::new(vec![sample_with_mask("a", vec![1; NUM_PIXELS]); 3], Split::Train);
        let prior = estimate_prior(&ds).unwrap();
        assert!(prior.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn disjoint_single_pixels_average_to_half() {
        let mut m1 = vec![0; NUM_PIXELS];
        m1[10] = 1;
        let mut m2 = vec![0; NUM_PIXELS];
        m2[700] = 1;
        let ds = Dataset::new(vec![sample_with_mask("a", m1), sample_with_mask("b", m2)], Split::Train);
        let prior = estimate_prior(&ds).unwrap();
        for (i, &v) in prior.values.iter().enumerate() {
            let want = if i == 10 || i == 700 { 0.5 } else { 0.0 };
            assert_eq!(v, want);
        }
    }

    #[test]
    fn prior_of_empty_dataset_fails() {
        let ds = Dataset::new(vec![], Split::Train);
        assert!(matches!(estimate_prior(&ds), Err(Error::EmptyDataset)));
    }

    #[test]
    fn prior_is_order_invariant() {
        let ds = synth_generate(&SynthConfig { count: 12, seed: 3, ..SynthConfig::default() }).unwrap();
        let mut rev = ds.clone();
        rev.samples.reverse();
        let (a, b) = (estimate_prior(&ds).unwrap(), estimate_prior(&rev).unwrap());
        let diff = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-15);
    }

    #[test]
    fn norm_stats_require_train_split() {
        let ds = Dataset::new(vec![sample_with_mask("a", vec![0; NUM_PIXELS])], Split::Test);
        assert!(matches!(NormStats::fit(&ds), Err(Error::NotTrainSplit)));
    }

    #[test]
    fn rejects_non_binary_labels() {
        let r = SegmentationSample::new("x", Tensor::zeros(&[1, 1, 40, 40]), vec![2; NUM_PIXELS]);
        assert!(r.is_err());
    }
}
