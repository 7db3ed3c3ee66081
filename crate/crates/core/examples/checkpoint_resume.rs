//! Save a run mid-way, reload it, and confirm the continuation is
//! bit-for-bit the same as never stopping.

use masscrf::dataio::{synth_benchmark, training_set, SynthConfig};
use masscrf::model::{prepare, Variant};
use masscrf::trainer::{TrainConfig, TrainState};

fn main() -> masscrf::Result<()> {
    let (train, _) = synth_benchmark(&SynthConfig { count: 12, ..SynthConfig::default() }, 4)?;
    let ts = training_set(&train, true)?;
    let samples = prepare(&ts);
    let cfg = TrainConfig { variant: Variant::FcnCrf, epochs: 2, batch_size: 8, ..TrainConfig::default() };

    let mut unbroken = TrainState::new(cfg.clone(), &ts)?;
    unbroken.run_epoch(&samples)?;
    let path = std::env::temp_dir().join("masscrf_example_checkpoint.bin");
    unbroken.save(&path)?;
    println!("saved epoch {} to {} ({} bytes)", unbroken.epoch, path.display(), std::fs::metadata(&path)?.len());
    unbroken.run_epoch(&samples)?;

    let mut resumed = TrainState::load(&path)?;
    resumed.run_epoch(&samples)?;
    let bits = |s: &TrainState| {
        let mut buf = Vec::new();
        s.to_checkpoint().write_to(&mut buf).map(|_| buf)
    };
    println!("epoch-2 loss unbroken {:.6} resumed {:.6}", unbroken.log[1].loss, resumed.log[1].loss);
    println!("identical checkpoints: {}", bits(&unbroken)? == bits(&resumed)?);
    std::fs::remove_file(path)?;
    Ok(())
}
