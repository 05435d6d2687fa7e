//! Span masking statistics and the noise fill of masked frames.

use birq::masking::{self, MaskPolicy};
use birq::matrix::Matrix;

fn main() -> birq::error::Result<()> {
    let policy = MaskPolicy::default();
    let frames = 500;
    let draws = 2000;
    let mut total = 0.0;
    for seed in 0..draws {
        total += masking::sample_mask(&policy, frames, seed)?.fraction();
    }
    println!(
        "start_prob {} span {} (effective {}): mean masked fraction {:.4} over {draws} masks of {frames} frames",
        policy.start_prob,
        policy.span,
        policy.effective_span(),
        total / draws as f64
    );

    let mask = masking::sample_mask(&policy, 60, 9)?;
    let line: String = (0..60).map(|t| if mask.contains(t) { '#' } else { '.' }).collect();
    println!("{line}");

    let x = Matrix::filled(60, 3, 5.0);
    let filled = masking::apply_mask(&x, &mask, &policy, 10)?;
    if let Some(&t) = mask.indices().first() {
        println!("frame {t} after fill: {:?}", filled.row(t));
    }
    Ok(())
}
