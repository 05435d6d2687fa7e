//! Bit-exact round trips of the on-disk formats and rejection of damaged
//! headers.

use birq::error::Error;
use birq::features::{self, FeatureSequence, SynthSpec, FRAME_SHIFT_SECS};
use birq::matrix::Matrix;
use birq::quantizer::{self, HardLabels, LabelFile, SoftLabels};
use birq::trainer::{self, TrainConfig, Trainer};
use proptest::prelude::*;

fn f32_matrix(rows: usize, cols: usize, values: &[f32]) -> Matrix {
    Matrix::from_fn(rows, cols, |r, c| f64::from(values[(r * cols + c) % values.len()]))
}

proptest! {
    #[test]
    fn feats_roundtrip(t in 1usize..20, d in 1usize..12, values in prop::collection::vec(-1e6f32..1e6, 1..64)) {
        let seq = FeatureSequence::new(f32_matrix(t, d, &values), FRAME_SHIFT_SECS).unwrap();
        let bytes = features::encode_features(&seq);
        let back = features::decode_features(&bytes).unwrap();
        prop_assert_eq!(back.data(), seq.data());
        prop_assert_eq!(features::encode_features(&back), bytes);
    }

    #[test]
    fn hard_labels_roundtrip(n in 1usize..40, idx in prop::collection::vec(0usize..1000, 1..50)) {
        let labels = LabelFile::Hard(HardLabels::new(idx.iter().map(|i| i % n).collect(), n).unwrap());
        let bytes = quantizer::encode_labels(&labels);
        let back = quantizer::decode_labels(&bytes).unwrap();
        prop_assert_eq!(&back, &labels);
        prop_assert_eq!(quantizer::encode_labels(&back), bytes);
    }

    #[test]
    fn soft_labels_roundtrip(seed in 0u64..1000, t in 1usize..30, n in 2usize..10, tau in 0.05f64..3.0) {
        let cb = quantizer::init_codebook(seed, n, 3).unwrap();
        let u = Matrix::from_fn(t, 3, |r, c| ((seed as usize + r * 3 + c) as f64).sin());
        let soft = quantizer::assign_soft(&u, &cb, tau, None).unwrap();
        let bytes = quantizer::encode_labels(&LabelFile::Soft(soft.clone()));
        let back = quantizer::decode_labels(&bytes).unwrap();
        prop_assert_eq!(quantizer::encode_labels(&back), bytes);
        match back {
            LabelFile::Soft(s) => prop_assert!(s.rows().max_abs_diff(soft.rows()) < 1e-7),
            LabelFile::Hard(_) => prop_assert!(false, "mode flipped"),
        }
    }
}

fn trained_checkpoint() -> trainer::Checkpoint {
    let data = features::synth_dataset(&SynthSpec {
        seed: 2,
        num_sequences: 3,
        frames: 30,
        dim: 4,
        num_clusters: 2,
        cluster_spread: 0.1,
    })
    .unwrap();
    let mut cfg = TrainConfig::default();
    cfg.epochs = 2;
    cfg.batch_size = 2;
    cfg.model.layers = 1;
    cfg.model.hidden_dim = 8;
    cfg.model.heads = 2;
    cfg.model.ff_dim = 8;
    cfg.objective.k = 1;
    let mut tr = Trainer::new(cfg, &data).unwrap();
    tr.run_epoch(&mut |_| Ok(())).unwrap();
    tr.checkpoint()
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let ck = trained_checkpoint();
    assert_eq!(ck.epoch, 1);
    assert!(!ck.optimizer.first.is_empty());
    let bytes = trainer::encode_checkpoint(&ck).unwrap();
    let back = trainer::decode_checkpoint(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(trainer::encode_checkpoint(&back).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    trainer::save_checkpoint(&ck, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(trainer::load_checkpoint(&path).unwrap(), ck);
}

fn assert_format_error<T: std::fmt::Debug>(r: birq::error::Result<T>, what: &str) {
    match r {
        Err(Error::Format(_)) => {}
        other => panic!("{what}: expected a format error, got {other:?}"),
    }
}

/// Flipped magic, bumped version and truncation of an otherwise valid file.
fn damaged(bytes: &[u8]) -> Vec<(&'static str, Vec<u8>)> {
    let mut magic = bytes.to_vec();
    magic[0] ^= 0x20;
    let mut version = bytes.to_vec();
    version[8] = version[8].wrapping_add(1);
    vec![
        ("magic", magic),
        ("version", version),
        ("header cut", bytes[..10].to_vec()),
        ("payload cut", bytes[..bytes.len() - 1].to_vec()),
        ("trailing byte", [bytes, &[0u8]].concat()),
        ("empty", Vec::new()),
    ]
}

#[test]
fn damaged_files_are_format_errors() {
    let feats = features::encode_features(&FeatureSequence::new(Matrix::filled(3, 2, 0.5), FRAME_SHIFT_SECS).unwrap());
    for (what, b) in damaged(&feats) {
        assert_format_error(features::decode_features(&b), &format!("FEATS {what}"));
    }
    let hard = quantizer::encode_labels(&LabelFile::Hard(HardLabels::new(vec![0, 2, 1], 3).unwrap()));
    let soft = quantizer::encode_labels(&LabelFile::Soft(SoftLabels::new(Matrix::filled(2, 2, 0.5)).unwrap()));
    for (what, b) in damaged(&hard).into_iter().chain(damaged(&soft)) {
        assert_format_error(quantizer::decode_labels(&b), &format!("LABELS {what}"));
    }
    let mut mode = hard.clone();
    mode[28] = 7;
    assert_format_error(quantizer::decode_labels(&mode), "LABELS mode");

    let ckpt = trainer::encode_checkpoint(&trained_checkpoint()).unwrap();
    for (what, b) in damaged(&ckpt) {
        assert_format_error(trainer::decode_checkpoint(&b), &format!("CKPT {what}"));
    }
}

#[test]
fn out_of_range_hard_label_rejected() {
    let mut bytes = quantizer::encode_labels(&LabelFile::Hard(HardLabels::new(vec![0, 1], 2).unwrap()));
    let last = bytes.len() - 4;
    bytes[last..].copy_from_slice(&5u32.to_le_bytes());
    assert_format_error(quantizer::decode_labels(&bytes), "index beyond codebook");
}
