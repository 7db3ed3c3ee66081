//! Contrast enhancement, per-pixel normalisation, flip augmentation and the
//! position prior on a synthetic training split.

use masscrf::dataio::{augment, estimate_prior, percentile, synth_generate, training_set, SynthConfig, IMAGE_SIZE};

fn main() -> masscrf::Result<()> {
    let mut ds = synth_generate(&SynthConfig { count: 200, ..SynthConfig::default() })?;
    let raw = ds.samples[0].image.clone();
    ds.enhance_images()?;
    let enhanced = &ds.samples[0].image;
    for (name, t) in [("raw", &raw), ("enhanced", enhanced)] {
        println!(
            "{name:>8}: p1 {:.3}  p50 {:.3}  p99 {:.3}",
            percentile(t.data(), 1.0),
            percentile(t.data(), 50.0),
            percentile(t.data(), 99.0)
        );
    }

    println!("augment: {} -> {} samples", ds.len(), augment(&ds)?.len());
    let train = training_set(&ds, true)?;
    let x = train.input(0);
    let mean = x.data().iter().sum::<f64>() / x.len() as f64;
    println!("normalised input 0: mean {mean:.3}, |x|max {:.3}", x.data().iter().fold(0.0f64, |m, v| m.max(v.abs())));

    let prior = estimate_prior(&ds)?;
    let (py, px) = prior.argmax();
    println!("prior peak {:.3} at ({py}, {px}); corner {:.3}", prior.at(py, px), prior.at(0, 0));
    // Coarse view of the prior, one character per 4x4 block.
    let shades = [' ', '.', ':', 'o', 'O', '@'];
    for by in (0..IMAGE_SIZE).step_by(4) {
        let row: String = (0..IMAGE_SIZE)
            .step_by(4)
            .map(|bx| {
                let v = prior.at(by + 2, bx + 2);
                shades[((v * (shades.len() - 1) as f64).round() as usize).min(shades.len() - 1)]
            })
            .collect();
        println!("  |{row}|");
    }
    Ok(())
}
