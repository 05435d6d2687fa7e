//! Log-mel front end on a pure tone, then stacking and normalization.

use birq::features::{self, Waveform, SAMPLE_RATE};

fn main() -> birq::error::Result<()> {
    let freq = 1000.0;
    let samples: Vec<f64> = (0..SAMPLE_RATE as usize / 2)
        .map(|n| (2.0 * std::f64::consts::PI * freq * n as f64 / SAMPLE_RATE as f64).sin())
        .collect();
    let logmel = features::compute_logmel(&Waveform::new(samples, SAMPLE_RATE)?)?;
    println!("{} frames x {} mel bins", logmel.num_frames(), logmel.dim());

    let frame = logmel.data().row(logmel.num_frames() / 2);
    let peak = (0..frame.len()).max_by(|&a, &b| frame[a].total_cmp(&frame[b])).unwrap();
    let centers = features::mel_center_frequencies();
    println!("loudest bin {peak} centered at {:.0} Hz for a {freq} Hz tone", centers[peak]);

    let stacked = features::normalize(&features::stack_frames(&logmel, 2)?)?;
    println!(
        "stacked x2: {} frames x {} dims, normalized = {}",
        stacked.num_frames(),
        stacked.dim(),
        stacked.is_normalized()
    );
    Ok(())
}
