//! Mean-field inference on a noisy unary field, and a check against exact
//! enumeration on a tiny grid.

use masscrf::crf::{self, CrfParams, UpdateForm};
use masscrf::dataio::{synth_benchmark, SynthConfig, NUM_PIXELS};
use masscrf::metrics::dice;
use masscrf::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unary(p_fg: &[f64]) -> Tensor {
    let mut psi: Vec<f64> = p_fg.iter().map(|p| -(1.0 - p).ln()).collect();
    psi.extend(p_fg.iter().map(|p| -p.ln()));
    Tensor::new(&[2, p_fg.len()], psi).unwrap()
}

fn main() -> masscrf::Result<()> {
    let (train, _) = synth_benchmark(&SynthConfig { count: 2, ..SynthConfig::default() }, 1)?;
    let sample = &train.samples[0];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p_fg: Vec<f64> = sample
        .mask
        .iter()
        .map(|&m| {
            let base = if m != 0 { 0.7 } else { 0.3 };
            (base + rng.gen_range(-0.35..0.35f64)).clamp(0.01, 0.99)
        })
        .collect();
    let psi = unary(&p_fg);

    for form in [UpdateForm::Paper, UpdateForm::Conventional] {
        for w in [0.01, 0.1, 1.0] {
            let params = CrfParams { weights: vec![w, w], update_form: form, ..CrfParams::default() };
            let kernels = crf::build_kernels(&sample.image, &params)?;
            let traj = crf::crf_trajectory(&psi, &kernels, &params, params.steps_test)?;
            let first = crf::argmax_labels(&traj[0]);
            let last = crf::argmax_labels(traj.last().unwrap());
            let fg = last.iter().filter(|&&l| l == 1).count();
            println!(
                "{form:>12} w={w:<4}: dice unary {:.3} -> crf {:.3} ({fg}/{NUM_PIXELS} fg)",
                dice(&first, &sample.mask)?,
                dice(&last, &sample.mask)?
            );
        }
    }

    // 3 x 4 grid: mean-field vs the exact Gibbs marginals.
    let image = Tensor::from_fn(&[1, 1, 3, 4], |_| rng.gen_range(0.0..1.0));
    let small = unary(&(0..12).map(|_| rng.gen_range(0.05..0.95)).collect::<Vec<_>>());
    let weights = [0.2, 0.2];
    let kernels = crf::build_kernels(&image, &CrfParams::default())?;
    let exact = crf::exact_marginals(&small, &kernels, &weights)?;
    for form in [UpdateForm::Paper, UpdateForm::Conventional] {
        let params = CrfParams { weights: weights.to_vec(), update_form: form, ..CrfParams::default() };
        let mf = crf::crf_infer(&small, &kernels, &params, 20)?;
        let agree = crf::argmax_labels(&mf).iter().zip(crf::argmax_labels(&exact)).filter(|(a, b)| **a == *b).count();
        println!(
            "{form:>12}: argmax agrees with exact on {agree}/12 pixels, max |Q - P| {:.3}",
            mf.max_abs_diff(&exact)
        );
    }
    Ok(())
}
