//! Bilevel pretraining on the synthetic corpus. Pass a step count as the
//! first argument (default 60; the full smoke run uses 200).

use birq::features::{self, SynthSpec};
use birq::trainer::{TrainConfig, Trainer};

fn main() -> birq::error::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(60);
    let data = features::synth_dataset(&SynthSpec {
        seed: 7,
        num_sequences: 4,
        frames: 200,
        dim: 8,
        num_clusters: 4,
        cluster_spread: 0.05,
    })?;
    let mut cfg = TrainConfig::default();
    cfg.model.codebook_dim = 4;
    cfg.epochs = steps;
    let mut trainer = Trainer::new(cfg, &data)?;

    println!("{:>5} {:>9} {:>8} {:>8} {:>8} {:>8}", "step", "total", "F", "G", "acc", "util_enh");
    while (trainer.steps_done() as usize) < steps {
        trainer.run_epoch(&mut |r| {
            if r.step % 10 == 0 || r.step as usize == steps {
                println!(
                    "{:>5} {:>9.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
                    r.step, r.loss_total, r.loss_f, r.loss_g, r.mask_acc_anchor, r.codebook_util_enh
                );
            }
            Ok(())
        })?;
    }
    Ok(())
}
