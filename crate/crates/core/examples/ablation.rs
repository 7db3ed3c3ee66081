//! The ablation protocol: train fcn, fcn_adv, fcn_crf and fcn_crf_adv on the
//! standard synthetic benchmark (data seed 1) for several training seeds and
//! compare test Dice.
//!
//!     cargo run --release --example ablation -- [seeds] [epochs] [train_count] [test_count]
//!
//! Defaults reproduce the full protocol (5 seeds, 30 epochs, 400/100), which
//! takes many hours on one core; pass smaller numbers for a quick look.

use std::time::Instant;

use masscrf::dataio::{synth_benchmark, training_set, SynthConfig};
use masscrf::metrics::mcnemar;
use masscrf::model::{prepare, Variant};
use masscrf::trainer::{evaluate, TrainConfig, TrainState};

const VARIANTS: [Variant; 4] = [Variant::Fcn, Variant::FcnAdv, Variant::FcnCrf, Variant::FcnCrfAdv];

fn arg(args: &[String], i: usize, default: usize) -> usize {
    args.get(i).map_or(default, |a| a.parse().expect("numeric argument"))
}

fn main() -> masscrf::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (seeds, epochs, n_train, n_test) =
        (arg(&args, 0, 5), arg(&args, 1, 30), arg(&args, 2, 400), arg(&args, 3, 100));
    let synth = SynthConfig { count: n_train + n_test, seed: 1, ..SynthConfig::default() };
    let (train, mut test) = synth_benchmark(&synth, n_test)?;
    let ts = training_set(&train, true)?;
    test.norm = ts.norm.clone();
    let test_samples = prepare(&test);
    let mut ordered = 0;
    for seed in 1..=seeds as u64 {
        let mut dices = Vec::new();
        let mut correct: Vec<Vec<bool>> = Vec::new();
        for v in VARIANTS {
            let start = Instant::now();
            let mut state = TrainState::new(TrainConfig { variant: v, epochs, seed, ..TrainConfig::default() }, &ts)?;
            state.train_to_end(&ts)?;
            let report = evaluate(&state.model, &test_samples)?;
            correct.push(
                report
                    .predictions
                    .iter()
                    .zip(&test_samples)
                    .flat_map(|(p, s)| p.iter().zip(s.labels.iter()).map(|(a, b)| a == b))
                    .collect(),
            );
            println!(
                "seed {seed} {v:<12} train dice {:.4}  test dice {:.4}  [{:.0}s]",
                state.log.last().map_or(f64::NAN, |e| e.dice_train),
                report.mean_dice,
                start.elapsed().as_secs_f64()
            );
            dices.push(report.mean_dice);
        }
        let holds = dices[1..].iter().all(|&d| dices[0] <= d);
        ordered += usize::from(holds);
        if let Ok(m) = mcnemar(&correct[3], &correct[0]) {
            println!(
                "seed {seed} fcn_crf_adv vs fcn pixels: b={} c={} p {:.3e}; ordering holds: {holds}",
                m.b, m.c, m.p_value
            );
        }
    }
    println!("fcn <= every other variant in {ordered}/{seeds} seeds");
    Ok(())
}
