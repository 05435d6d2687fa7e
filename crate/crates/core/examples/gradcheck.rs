//! Finite-difference check of the upper, lower and combined gradients on a
//! tiny encoder.

use birq::verify::{self, GradCheckConfig};

fn main() -> birq::error::Result<()> {
    let started = std::time::Instant::now();
    let report = verify::gradcheck_birq(&GradCheckConfig::default())?;
    print!("{}", report.table());
    for objective in ["F", "G", "combined"] {
        println!("{objective:>8}: max relative error {:.3e}", report.objective_max(objective));
    }
    println!("passed {} in {:.1?}", report.passed(), started.elapsed());
    Ok(())
}
