//! Anchoring labels from a frozen random projection and codebook, checked
//! against the clusters planted in the synthetic corpus.

use birq::features::{self, SynthSpec};
use birq::quantizer::{self, QuantizerSpec, QuantizerState};

fn main() -> birq::error::Result<()> {
    let spec = SynthSpec {
        seed: 7,
        num_sequences: 1,
        frames: 400,
        dim: 8,
        num_clusters: 4,
        cluster_spread: 0.05,
    };
    let corpus = features::synth_corpus(&spec)?;
    let x = features::normalize(&corpus.sequences[0])?.into_data();
    let quant = QuantizerState::new(&QuantizerSpec {
        seed: 5,
        num_codebooks: 1,
        codebook_size: 8,
        codebook_dim: 4,
        input_dim: x.cols(),
        hidden_dim: 16,
        l2_normalize: false,
    })?;
    let labels = quant.anchor_labels(0, &x)?;
    println!(
        "codebook utilization {:.3}",
        quantizer::codebook_utilization(labels.indices(), labels.num_codes())
    );

    // contingency of planted cluster vs. label
    let mut table = vec![vec![0usize; labels.num_codes()]; spec.num_clusters];
    for (&c, &l) in corpus.clusters[0].iter().zip(labels.indices()) {
        table[c][l] += 1;
    }
    println!("cluster | label counts");
    for (c, row) in table.iter().enumerate() {
        println!("{c:7} | {row:?}");
    }
    let purity: usize = table.iter().map(|r| r.iter().max().unwrap()).sum();
    println!("cluster purity {:.3}", purity as f64 / labels.len() as f64);
    Ok(())
}
