//! Finite-difference checks of every differentiable operator and of the
//! full training objective.
//!
//!     cargo run --release --example gradcheck -- [name_or_prefix] [seeds]

use masscrf::gradcheck;

fn main() -> masscrf::Result<()> {
    let mut args = std::env::args().skip(1);
    let filter = args.next().filter(|f| f != "all");
    let seeds = args.next().map_or(5, |s| s.parse().expect("seeds is an integer"));
    let report = gradcheck::run(filter.as_deref(), 1, seeds)?;
    print!("{}", report.to_text());
    std::process::exit(if report.passed() { 0 } else { 2 });
}
