//! Interrupt a run after one epoch, resume from the checkpoint and compare
//! against the uninterrupted run.

use birq::features::{self, SynthSpec};
use birq::trainer::{self, TrainConfig};

fn main() -> birq::error::Result<()> {
    let data = features::synth_dataset(&SynthSpec {
        seed: 3,
        num_sequences: 8,
        frames: 60,
        dim: 6,
        num_clusters: 3,
        cluster_spread: 0.1,
    })?;
    let mut cfg = TrainConfig::default();
    cfg.epochs = 3;
    cfg.model.layers = 2;
    cfg.model.hidden_dim = 16;
    cfg.model.ff_dim = 32;
    cfg.objective.k = birq::encoder::default_k(2);

    let dir = std::env::temp_dir().join(format!("birq-resume-{}", std::process::id()));
    let full = trainer::run_pretrain(&cfg, &data, &dir.join("full"), None)?;
    let resumed = trainer::run_pretrain(
        &cfg,
        &data,
        &dir.join("resumed"),
        Some(&trainer::checkpoint_path(&dir.join("full"), 1)),
    )?;
    let full_csv = std::fs::read_to_string(&full.metrics_path).unwrap();
    let resumed_csv = std::fs::read_to_string(&resumed.metrics_path).unwrap();
    let tail: Vec<&str> = full_csv.lines().skip(1 + 2).collect();
    let again: Vec<&str> = resumed_csv.lines().skip(1).collect();
    println!("uninterrupted rows after epoch 1: {}", tail.len());
    println!("resumed rows identical: {}", tail == again);
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
