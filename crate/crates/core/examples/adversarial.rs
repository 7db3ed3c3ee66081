//! Build the adversarial perturbation for a freshly initialised model and
//! show that it lowers the likelihood of the groundtruth labels.

use masscrf::adversarial::{adversarial_input, likelihood_gradient, make_perturbation};
use masscrf::dataio::{estimate_prior, synth_benchmark, training_set, SynthConfig};
use masscrf::model::{prepare, ModelSpec, SegModel, Variant};

fn main() -> masscrf::Result<()> {
    let (train, _) = synth_benchmark(&SynthConfig { count: 8, ..SynthConfig::default() }, 2)?;
    let ts = training_set(&train, false)?;
    let prior = estimate_prior(&ts)?;
    let samples = prepare(&ts);
    for variant in [Variant::FcnAdv, Variant::FcnCrfAdv] {
        let model = SegModel::new(variant, &ModelSpec::default(), &prior.values, 1)?;
        println!("{variant}");
        for s in &samples[..3] {
            let g = likelihood_gradient(&model, s)?;
            for eps in [0.1, 1.0] {
                let p = make_perturbation(&g, eps)?;
                let adv = adversarial_input(&model, s, eps)?.expect("non-degenerate gradient");
                println!(
                    "  {} eps {eps:<3}: |g| {:.3e}  |R| {:.6}  nll clean {:.5} -> adversarial {:.5}",
                    s.id,
                    p.source_grad_norm,
                    p.r.l2_norm(),
                    model.sample_nll(s, &s.input)?,
                    model.sample_nll(s, &adv)?
                );
            }
        }
    }
    Ok(())
}
