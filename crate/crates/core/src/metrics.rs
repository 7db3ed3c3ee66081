//! Dice overlap, boundary-band (trimap) accuracy, and McNemar's test.

use statrs::function::gamma::gamma_ur;

use crate::error::{Error, Result};

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("masks have {a} and {b} pixels")));
    }
    Ok(())
}

/// Pixel-level confusion counts, label 1 positive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn from_masks(pred: &[u8], gt: &[u8]) -> Result<Self> {
        check_len(pred.len(), gt.len())?;
        let mut c = ConfusionCounts::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p != 0, g != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `2TP / (2TP + FP + FN)`, 1.0 when both masks are empty.
    pub fn dice(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total().max(1) as f64
    }
}

/// Dice from foreground index sets: `2 |P ∩ G| / (|P| + |G|)`, 1.0 when both
/// are empty.
pub fn dice(pred: &[u8], gt: &[u8]) -> Result<f64> {
    check_len(pred.len(), gt.len())?;
    let p: Vec<usize> = (0..pred.len()).filter(|&i| pred[i] != 0).collect();
    let g: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] != 0).collect();
    if p.is_empty() && g.is_empty() {
        return Ok(1.0);
    }
    // Both lists are sorted; merge to count the intersection.
    let (mut i, mut j, mut both) = (0, 0, 0usize);
    while i < p.len() && j < g.len() {
        match p[i].cmp(&g[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                both += 1;
                i += 1;
                j += 1;
            }
        }
    }
    Ok(2.0 * both as f64 / (p.len() + g.len()) as f64)
}

/// Pixels within Chebyshev distance `width` of the groundtruth boundary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrimapBand {
    pub width: usize,
    pub members: Vec<bool>,
}

impl TrimapBand {
    pub fn len(&self) -> usize {
        self.members.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.members.iter().any(|&m| m)
    }
}

/// Groundtruth pixels with an 8-neighbour of a different label.
pub fn boundary(gt: &[u8], h: usize, w: usize) -> Result<Vec<bool>> {
    check_len(gt.len(), h * w)?;
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let here = gt[y * w + x] != 0;
            'scan: for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    if (gt[ny * w + nx] != 0) != here {
                        out[y * w + x] = true;
                        break 'scan;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Dilates the boundary by a `(2 width + 1)^2` square, one axis at a time.
pub fn trimap_band(gt: &[u8], h: usize, w: usize, width: usize) -> Result<TrimapBand> {
    if width == 0 {
        return Err(Error::BadParam("trimap width must be >= 1".into()));
    }
    let edge = boundary(gt, h, w)?;
    let mut rows = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(width);
            let hi = (x + width).min(w - 1);
            rows[y * w + x] = (lo..=hi).any(|nx| edge[y * w + nx]);
        }
    }
    let mut members = vec![false; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(width);
        let hi = (y + width).min(h - 1);
        for x in 0..w {
            members[y * w + x] = (lo..=hi).any(|ny| rows[ny * w + x]);
        }
    }
    Ok(TrimapBand { width, members })
}

/// Agreement counts inside a trimap band.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrimapTally {
    pub correct: u64,
    pub total: u64,
}

impl TrimapTally {
    pub fn add(&mut self, other: TrimapTally) {
        self.correct += other.correct;
        self.total += other.total;
    }

    /// Fraction correct; an empty band counts as 1.0.
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }
}

pub fn trimap_tally(pred: &[u8], gt: &[u8], h: usize, w: usize, width: usize) -> Result<TrimapTally> {
    check_len(pred.len(), gt.len())?;
    let band = trimap_band(gt, h, w, width)?;
    let mut t = TrimapTally::default();
    for (i, &inside) in band.members.iter().enumerate() {
        if inside {
            t.total += 1;
            t.correct += u64::from((pred[i] != 0) == (gt[i] != 0));
        }
    }
    Ok(t)
}

/// Accuracy within the band of the given width. Returns `(accuracy,
/// empty_band)`; an empty band (all-background or all-foreground
/// groundtruth) reports 1.0 and logs a warning.
pub fn trimap_accuracy(pred: &[u8], gt: &[u8], h: usize, w: usize, width: usize) -> Result<(f64, bool)> {
    let t = trimap_tally(pred, gt, h, w, width)?;
    if t.is_empty() {
        log::warn!("trimap band of width {width} is empty; reporting accuracy 1.0");
    }
    Ok((t.accuracy(), t.is_empty()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McNemar {
    /// Pixels only model A gets right.
    pub b: u64,
    /// Pixels only model B gets right.
    pub c: u64,
    pub chi2: f64,
    pub p_value: f64,
}

/// `chi2 = (b - c)^2 / (b + c)` with one degree of freedom, no continuity
/// correction.
pub fn mcnemar_counts(b: u64, c: u64) -> Result<McNemar> {
    if b + c == 0 {
        return Err(Error::NoDiscordantPairs);
    }
    let d = b as f64 - c as f64;
    let chi2 = d * d / (b + c) as f64;
    // Chi-square(1) survival function: Q(1/2, chi2/2).
    let p_value = if chi2 == 0.0 { 1.0 } else { gamma_ur(0.5, chi2 / 2.0) };
    Ok(McNemar { b, c, chi2, p_value })
}

/// Paired test over per-pixel correctness of two models.
pub fn mcnemar(a_correct: &[bool], b_correct: &[bool]) -> Result<McNemar> {
    check_len(a_correct.len(), b_correct.len())?;
    let (mut b, mut c) = (0, 0);
    for (&a, &bb) in a_correct.iter().zip(b_correct) {
        match (a, bb) {
            (true, false) => b += 1,
            (false, true) => c += 1,
            _ => {}
        }
    }
    mcnemar_counts(b, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(n: usize, lo: usize, hi: usize) -> Vec<u8> {
        (0..n * n).map(|i| u8::from((lo..hi).contains(&(i / n)) && (lo..hi).contains(&(i % n)))).collect()
    }

    #[test]
    fn dice_examples() {
        let m = square(6, 1, 4);
        assert_eq!(dice(&m, &m).unwrap(), 1.0);
        assert_eq!(dice(&square(6, 0, 2), &square(6, 3, 5)).unwrap(), 0.0);
        assert_eq!(dice(&[0, 0], &[0, 0]).unwrap(), 1.0);
        let pred = [1, 1, 1, 1, 0, 0, 0];
        let gt = [1, 1, 1, 0, 1, 1, 0];
        let c = ConfusionCounts::from_masks(&pred, &gt).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (3, 1, 2));
        assert!((c.dice() - 6.0 / 9.0).abs() < 1e-15);
        assert!(matches!(dice(&[1], &[1, 0]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn perfect_prediction_is_exact_at_every_width() {
        let gt = square(11, 3, 8);
        for wdt in 1..=5 {
            assert_eq!(trimap_accuracy(&gt, &gt, 11, 11, wdt).unwrap(), (1.0, false));
        }
    }

    #[test]
    fn saturated_band_is_global_accuracy() {
        let gt = square(11, 3, 8);
        let pred = square(11, 2, 8);
        let (acc, _) = trimap_accuracy(&pred, &gt, 11, 11, 40).unwrap();
        let global = ConfusionCounts::from_masks(&pred, &gt).unwrap().accuracy();
        assert!((acc - global).abs() < 1e-15);
    }

    #[test]
    fn empty_band_is_flagged() {
        let gt = vec![0u8; 25];
        assert_eq!(trimap_accuracy(&[1; 25], &gt, 5, 5, 2).unwrap(), (1.0, true));
    }

    #[test]
    fn bands_nest() {
        let gt = square(15, 4, 9);
        let mut prev = trimap_band(&gt, 15, 15, 1).unwrap();
        for wdt in 2..=5 {
            let band = trimap_band(&gt, 15, 15, wdt).unwrap();
            assert!(prev.members.iter().zip(&band.members).all(|(&a, &b)| !a || b));
            prev = band;
        }
    }

    #[test]
    fn mcnemar_reference_counts() {
        let m = mcnemar_counts(4595, 3270).unwrap();
        assert!((m.chi2 - 1325.0f64.powi(2) / 7865.0).abs() < 1e-9);
        assert!(m.p_value < 1e-3);
        let t = mcnemar_counts(10, 0).unwrap();
        assert_eq!(t.chi2, 10.0);
        assert!((t.p_value - 0.0015654022580025488).abs() < 1e-12);
        let s = mcnemar_counts(7, 7).unwrap();
        assert_eq!((s.chi2, s.p_value), (0.0, 1.0));
        assert!(matches!(mcnemar_counts(0, 0), Err(Error::NoDiscordantPairs)));
    }

    proptest! {
        #[test]
        fn dice_two_paths_agree(pairs in proptest::collection::vec((0u8..2, 0u8..2), 1..200)) {
            let (p, g): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
            let a = dice(&p, &g).unwrap();
            let b = ConfusionCounts::from_masks(&p, &g).unwrap().dice();
            prop_assert_eq!(a, b);
            prop_assert_eq!(a, dice(&g, &p).unwrap());
        }

        #[test]
        fn mcnemar_swap_invariant(a in proptest::collection::vec(any::<bool>(), 1..100), b in proptest::collection::vec(any::<bool>(), 100)) {
            let b = &b[..a.len()];
            if let Ok(x) = mcnemar(&a, b) {
                let y = mcnemar(b, &a).unwrap();
                prop_assert_eq!(x.chi2, y.chi2);
                prop_assert_eq!(x.p_value, y.p_value);
            }
        }
    }
}
