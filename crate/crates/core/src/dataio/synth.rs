use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, SegmentationSample, Split, IMAGE_SIZE, NUM_PIXELS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const BACKGROUND: f64 = 0.3;
const MAX_CENTROID_OFFSET: f64 = 8.0;

/// Parameters of the synthetic mass generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    pub seed: u64,
    /// Intensity added on the mass, in `(0, 1]`.
    pub contrast: f64,
    /// Std of the additive Gaussian noise.
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { count: 100, seed: 1, contrast: 0.25, noise_sigma: 0.15 }
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

fn blob_mask(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let center = (IMAGE_SIZE as f64 - 1.0) / 2.0;
    loop {
        let r = 4.0 * rng.gen::<f64>().sqrt();
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let (cy, cx) = (center + r * theta.sin(), center + r * theta.cos());
        let pieces = rng.gen_range(1..=3);
        let ellipses: Vec<Ellipse> = (0..pieces)
            .map(|k| {
                let (oy, ox) = if k == 0 { (0.0, 0.0) } else { (rng.gen_range(-3.0..=3.0), rng.gen_range(-3.0..=3.0)) };
                let phi = rng.gen_range(0.0..std::f64::consts::PI);
                Ellipse {
                    cy: cy + oy,
                    cx: cx + ox,
                    a: rng.gen_range(4.0..=10.0),
                    b: rng.gen_range(4.0..=10.0),
                    cos: phi.cos(),
                    sin: phi.sin(),
                }
            })
            .collect();

        let mut mask = vec![0u8; NUM_PIXELS];
        let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                if ellipses.iter().any(|e| e.contains(y as f64, x as f64)) {
                    mask[y * IMAGE_SIZE + x] = 1;
                    sy += y as f64;
                    sx += x as f64;
                    n += 1;
                }
            }
        }
        if n == 0 {
            continue;
        }
        let (my, mx) = (sy / n as f64, sx / n as f64);
        if ((my - center).powi(2) + (mx - center).powi(2)).sqrt() <= MAX_CENTROID_OFFSET {
            return mask;
        }
    }
}

/// Deterministic synthetic ROIs: a blob built from a union of 1-3 random
/// ellipses near the centre, brightened by `contrast` over a flat background,
/// plus Gaussian noise, clipped to `[0, 1]`. Images are not yet enhanced.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.count == 0 {
        return Err(Error::BadParam("synthetic count must be positive".into()));
    }
    if !(cfg.contrast > 0.0 && cfg.contrast <= 1.0) {
        return Err(Error::BadParam(format!("contrast {} outside (0, 1]", cfg.contrast)));
    }
    if !(cfg.noise_sigma >= 0.0 && cfg.noise_sigma.is_finite()) {
        return Err(Error::BadParam(format!("noise sigma {} must be finite and >= 0", cfg.noise_sigma)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
    let mut samples = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let mask = blob_mask(&mut rng);
        let pixels = mask
            .iter()
            .map(|&m| {
                let v = BACKGROUND + cfg.contrast * m as f64 + noise.sample(&mut rng);
                v.clamp(0.0, 1.0)
            })
            .collect();
        let image = Tensor::new(&[1, 1, IMAGE_SIZE, IMAGE_SIZE], pixels)?;
        samples.push(SegmentationSample::new(format!("{i:05}"), image, mask)?);
    }
    Ok(Dataset::new(samples, Split::Train))
}
