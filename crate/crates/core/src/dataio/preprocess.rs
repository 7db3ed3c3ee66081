use super::{NormStats, IMAGE_SIZE, STD_FLOOR};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const HIST_BINS: usize = 256;

/// A grayscale image of any size with raw (unscaled) intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.is_empty() {
            return Err(Error::EmptyImage);
        }
        if data.len() != width * height {
            return Err(Error::shape(format!("{width}x{height} image with {} values", data.len())));
        }
        Ok(RawImage { width, height, data })
    }

    /// Half-pixel-centred bilinear resampling; identity when sizes match.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> RawImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut out = Vec::with_capacity(width * height);
        let at = |y: usize, x: usize| self.data[y * self.width + x];
        for oy in 0..height {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for ox in 0..width {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                out.push(top * (1.0 - ty) + bottom * ty);
            }
        }
        RawImage { width, height, data: out }
    }
}

/// Linear-interpolated percentile (`q` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Contrast enhancement to a 40x40 map in `[0, 1]`: bilinear resize, clip to
/// the 1st/99th percentiles, rescale, then 256-bin histogram equalization.
pub fn enhance(raw: &RawImage) -> Result<Tensor> {
    if raw.data.is_empty() {
        return Err(Error::EmptyImage);
    }
    let resized = raw.resize_bilinear(IMAGE_SIZE, IMAGE_SIZE);
    let lo = percentile(&resized.data, 1.0);
    let hi = percentile(&resized.data, 99.0);
    if !(hi > lo) {
        return Err(Error::DegenerateRange);
    }
    let scaled: Vec<f64> = resized.data.iter().map(|v| (v.clamp(lo, hi) - lo) / (hi - lo)).collect();

    let bin = |v: f64| ((v * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
    let mut cdf = [0usize; HIST_BINS];
    for &v in &scaled {
        cdf[bin(v)] += 1;
    }
    for k in 1..HIST_BINS {
        cdf[k] += cdf[k - 1];
    }
    let n = scaled.len();
    let cdf_min = *cdf.iter().find(|&&c| c > 0).expect("non-empty histogram");
    if n == cdf_min {
        return Err(Error::DegenerateRange);
    }
    let equalized = scaled.iter().map(|&v| (cdf[bin(v)] - cdf_min) as f64 / (n - cdf_min) as f64).collect();
    Tensor::new(&[1, 1, IMAGE_SIZE, IMAGE_SIZE], equalized)
}

/// Per-pixel z-scoring `(x - mean) / max(std, 1e-3)`.
pub fn normalize(image: &Tensor, stats: &NormStats) -> Tensor {
    let data = image
        .data()
        .iter()
        .zip(stats.mean.iter().zip(&stats.std))
        .map(|(x, (m, s))| (x - m) / s.max(STD_FLOOR))
        .collect();
    Tensor::new(image.shape(), data).expect("same shape")
}

/// [`enhance`] followed by [`normalize`].
pub fn preprocess(raw: &RawImage, stats: &NormStats) -> Result<Tensor> {
    Ok(normalize(&enhance(raw)?, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synth_generate, Dataset, SynthConfig, NUM_PIXELS};

    #[test]
    fn constant_image_is_degenerate() {
        let raw = RawImage::new(40, 40, vec![0.7; 1600]).unwrap();
        assert!(matches!(enhance(&raw), Err(Error::DegenerateRange)));
    }

    #[test]
    fn empty_image_rejected() {
        assert!(matches!(RawImage::new(0, 0, vec![]), Err(Error::EmptyImage)));
    }

    #[test]
    fn image_equal_to_mean_normalizes_to_zero() {
        let raw = RawImage::new(40, 40, (0..1600).map(|i| ((i * 37) % 101) as f64).collect()).unwrap();
        let enhanced = enhance(&raw).unwrap();
        let stats = NormStats { mean: enhanced.data().to_vec(), std: vec![1.0; NUM_PIXELS] };
        let out = preprocess(&raw, &stats).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn enhance_output_spans_unit_interval() {
        let raw = RawImage::new(23, 57, (0..23 * 57).map(|i| ((i * 13) % 97) as f64 * 3.0).collect()).unwrap();
        let t = enhance(&raw).unwrap();
        assert_eq!(t.shape(), &[1, 1, 40, 40]);
        let (lo, hi) = t.data().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        assert_eq!(lo, 0.0);
        assert_eq!(hi, 1.0);
    }

    #[test]
    fn resize_identity_and_constant_preserved() {
        let raw = RawImage::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(raw.resize_bilinear(3, 2), raw);
        let flat = RawImage::new(7, 5, vec![2.5; 35]).unwrap().resize_bilinear(40, 40);
        assert!(flat.data.iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn percentile_interpolates() {
        let v: Vec<f64> = (0..101).map(|i| i as f64).collect();
        assert_eq!(percentile(&v, 1.0), 1.0);
        assert_eq!(percentile(&v, 99.0), 99.0);
        assert_eq!(percentile(&[0.0, 10.0], 25.0), 2.5);
    }

    #[test]
    fn normalized_train_split_is_standardized() {
        let mut ds: Dataset = synth_generate(&SynthConfig { count: 60, seed: 5, ..SynthConfig::default() }).unwrap();
        ds.enhance_images().unwrap();
        let stats = ds.fit_normalization().unwrap().clone();
        let inputs: Vec<Tensor> = (0..ds.len()).map(|i| ds.input(i)).collect();
        let n = inputs.len() as f64;
        for px in 0..NUM_PIXELS {
            if stats.std[px] <= STD_FLOOR {
                continue;
            }
            let mean = inputs.iter().map(|t| t.data()[px]).sum::<f64>() / n;
            let var = inputs.iter().map(|t| (t.data()[px] - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-10, "pixel {px} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-6, "pixel {px} std {}", var.sqrt());
        }
    }

    #[test]
    fn normalization_is_idempotent_given_stats() {
        let ds = synth_generate(&SynthConfig { count: 4, seed: 9, ..SynthConfig::default() }).unwrap();
        let stats = NormStats { mean: vec![0.2; NUM_PIXELS], std: vec![0.5; NUM_PIXELS] };
        let a = normalize(&ds.samples[0].image, &stats);
        let b = normalize(&ds.samples[0].image, &stats);
        assert_eq!(a, b);
    }
}
