//! Generate a synthetic mass dataset and write it as PGM image/mask pairs.
//!
//!     cargo run --release --example synth_dataset -- [out_dir] [count]

use masscrf::dataio::{synth_generate, write_dataset_dir, SynthConfig, NUM_PIXELS};

fn main() -> masscrf::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "synth_out".into());
    let count = args.next().map_or(20, |c| c.parse().expect("count is an integer"));

    let cfg = SynthConfig { count, ..SynthConfig::default() };
    let ds = synth_generate(&cfg)?;
    let areas: Vec<usize> = ds.samples.iter().map(|s| s.foreground()).collect();
    let mean = areas.iter().sum::<usize>() as f64 / areas.len() as f64;
    println!(
        "{} samples, mass area {}..{} px (mean {:.1}, {:.1}% of the ROI)",
        ds.len(),
        areas.iter().min().unwrap(),
        areas.iter().max().unwrap(),
        mean,
        100.0 * mean / NUM_PIXELS as f64
    );
    write_dataset_dir(&ds, &out, Some(&cfg))?;
    println!("wrote {out}/ (img_*.pgm, msk_*.pgm, manifest.json)");
    Ok(())
}
