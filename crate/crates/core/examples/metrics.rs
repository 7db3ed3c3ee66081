//! Dice, trimap accuracy and McNemar's test on toy masks.

use masscrf::metrics::{dice, mcnemar, mcnemar_counts, trimap_accuracy, trimap_band};

fn disc(n: usize, cy: f64, cx: f64, r: f64) -> Vec<u8> {
    (0..n * n).map(|i| u8::from(((i / n) as f64 - cy).powi(2) + ((i % n) as f64 - cx).powi(2) <= r * r)).collect()
}

fn main() -> masscrf::Result<()> {
    let n = 20;
    let gt = disc(n, 10.0, 10.0, 6.0);
    let shifted = disc(n, 10.0, 11.0, 6.0);
    let shrunk = disc(n, 10.0, 10.0, 5.0);
    for (name, pred) in [("shifted", &shifted), ("shrunk", &shrunk)] {
        print!("{name:>8}: dice {:.4}  trimap", dice(pred, &gt)?);
        for w in 1..=5 {
            print!(" {:.3}", trimap_accuracy(pred, &gt, n, n, w)?.0);
        }
        println!();
    }
    let band = trimap_band(&gt, n, n, 2)?;
    for y in 0..n {
        let row: String = (0..n)
            .map(|x| match (band.members[y * n + x], gt[y * n + x]) {
                (true, 1) => '#',
                (true, _) => '+',
                (false, 1) => 'o',
                _ => '.',
            })
            .collect();
        println!("  {row}");
    }

    let a: Vec<bool> = shifted.iter().zip(&gt).map(|(p, g)| p == g).collect();
    let b: Vec<bool> = shrunk.iter().zip(&gt).map(|(p, g)| p == g).collect();
    let m = mcnemar(&a, &b)?;
    println!("shifted vs shrunk: b={} c={} chi2 {:.3} p {:.4}", m.b, m.c, m.chi2, m.p_value);
    let m = mcnemar_counts(4595, 3270)?;
    println!("b=4595 c=3270: chi2 {:.4} p {:.3e}", m.chi2, m.p_value);
    Ok(())
}
