//! Penalty descent on a quadratic bilevel toy against the constrained
//! optimum, for growing penalty weights.

use birq::verify::{self, ToyBilevelProblem};

fn main() -> birq::error::Result<()> {
    let problem = ToyBilevelProblem::fixture();
    let report = verify::run_penalty_demo(
        &problem,
        &verify::DEMO_GAMMAS,
        verify::DEMO_ETA,
        verify::DEMO_STEPS,
    )?;
    print!("{}", report.table());
    println!("delta non-increasing: {}", report.delta_non_increasing());
    if let Some(row) = report.row(100.0) {
        println!("gamma 100: theta_pen {:?} theta_star {:?}", row.theta_pen, row.theta_star);
    }
    Ok(())
}
