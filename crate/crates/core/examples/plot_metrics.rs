//! Short training run rendered to an SVG of losses and utilization.

use birq::cli;
use birq::features::{self, SynthSpec};
use birq::trainer::{self, TrainConfig};

fn main() -> birq::error::Result<()> {
    let data = features::synth_dataset(&SynthSpec {
        seed: 1,
        num_sequences: 4,
        frames: 80,
        dim: 6,
        num_clusters: 3,
        cluster_spread: 0.1,
    })?;
    let mut cfg = TrainConfig::default();
    cfg.epochs = 20;
    cfg.model.layers = 2;
    cfg.model.hidden_dim = 16;
    cfg.model.ff_dim = 32;
    cfg.objective.k = birq::encoder::default_k(2);

    let dir = std::env::temp_dir().join("birq-plot-example");
    let summary = trainer::run_pretrain(&cfg, &data, &dir, None)?;
    let rows = cli::read_metrics(&summary.metrics_path)?;
    let svg_path = dir.join("metrics.svg");
    std::fs::write(&svg_path, cli::render_svg(&rows)).unwrap();
    println!("{} rows plotted to {}", rows.len(), svg_path.display());
    Ok(())
}
