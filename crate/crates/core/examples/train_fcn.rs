//! Train the plain FCN on a small synthetic split and evaluate it.
//!
//!     cargo run --release --example train_fcn -- [variant] [epochs]

use masscrf::dataio::{synth_benchmark, training_set, SynthConfig};
use masscrf::model::Variant;
use masscrf::trainer::{evaluate_state, TrainConfig, TrainState};

fn main() -> masscrf::Result<()> {
    let mut args = std::env::args().skip(1);
    let variant: Variant = args.next().as_deref().unwrap_or("fcn").parse()?;
    let epochs = args.next().map_or(10, |e| e.parse().expect("epochs is an integer"));

    let (train, test) = synth_benchmark(&SynthConfig { count: 96, ..SynthConfig::default() }, 32)?;
    let ts = training_set(&train, false)?;
    let cfg = TrainConfig { variant, epochs, ..TrainConfig::default() };
    let mut state = TrainState::new(cfg, &ts)?;
    println!("{variant}: {} parameters, {} training samples", state.model.param_count(), ts.len());
    let samples = masscrf::model::prepare(&ts);
    for _ in 0..epochs {
        let log = state.run_epoch(&samples)?;
        println!("epoch {:>2}  loss {:.4}  train dice {:.4}", log.epoch, log.loss, log.dice_train);
    }
    let report = evaluate_state(&state, &test, Some(variant))?;
    println!("test dice {:.4}", report.mean_dice);
    for (w, a) in &report.trimap {
        println!("  trimap width {w}: accuracy {a:.4}");
    }
    Ok(())
}
