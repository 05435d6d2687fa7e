//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::time::Instant;

use birq::cli::RunConfig;
use birq::encoder::default_k;
use birq::error::Error;
use birq::features::{self, FeatureSequence, SynthSpec, FRAME_SHIFT_SECS};
use birq::masking::{self, MaskPolicy};
use birq::matrix::Matrix;
use birq::objectives::{Objective, PenaltyWeights};
use birq::quantizer::{self, HardLabels, LabelFile};
use birq::trainer::{self, TrainConfig, Trainer};
use birq::verify::{self, GradCheckConfig, ToyBilevelProblem};
use rand::{Rng, SeedableRng};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_fidelity() -> Outcome {
    let started = Instant::now();
    let report = verify::gradcheck_birq(&GradCheckConfig::default()).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    let (f, g, c) = (
        report.objective_max("F"),
        report.objective_max("G"),
        report.objective_max("combined"),
    );
    check(
        f <= 1e-4 && g <= 1e-4 && c <= 1e-4 && secs < 60.0,
        format!("max rel err F {f:.2e}, G {g:.2e}, combined {c:.2e}; {} params; {secs:.1} s", report.num_params),
    )
}

fn smoke_corpus(frames: usize) -> Vec<FeatureSequence> {
    features::synth_dataset(&SynthSpec {
        seed: 7,
        num_sequences: 4,
        frames,
        dim: 8,
        num_clusters: 4,
        cluster_spread: 0.05,
    })
    .unwrap()
}

fn best_rq_reduction() -> Outcome {
    let data = smoke_corpus(100);
    let mut bilevel = TrainConfig::default();
    bilevel.epochs = 50;
    bilevel.objective.weights = PenaltyWeights::new(0.0, 1.0).map_err(|e| e.to_string())?;
    let mut lower = bilevel.clone();
    lower.objective.objective = Objective::LowerOnly;
    let train = |cfg: TrainConfig| -> Result<Vec<f64>, Error> {
        let mut tr = Trainer::new(cfg, &data)?;
        while tr.steps_done() < 50 {
            tr.run_epoch(&mut |_| Ok(()))?;
        }
        Ok(tr.params().tensors().iter().flat_map(|t| t.data.clone()).collect())
    };
    let a = train(bilevel).map_err(|e| e.to_string())?;
    let b = train(lower).map_err(|e| e.to_string())?;
    let max = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    check(max <= 1e-12, format!("50 adamw steps, {} params, max |diff| {max:e}", a.len()))
}

/// Sorted squared distances from one frame to every code.
fn distances(u: &Matrix, t: usize, c: &Matrix) -> Vec<(f64, usize)> {
    let mut d: Vec<(f64, usize)> = (0..c.rows())
        .map(|n| ((0..u.cols()).map(|j| (u.get(t, j) - c.get(n, j)).powi(2)).sum(), n))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d
}

fn random_frames(seed: u64) -> Matrix {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    Matrix::from_fn(1000, 16, |_, _| rng.random_range(-3.0..3.0))
}

fn quantizer_oracle() -> Outcome {
    let u = random_frames(31);
    let cb = quantizer::init_codebook(5, 8, 16).map_err(|e| e.to_string())?;
    let hard = quantizer::assign_hard(&u, &cb).map_err(|e| e.to_string())?;
    let soft = quantizer::assign_soft(&u, &cb, quantizer::DEFAULT_TEMPERATURE, None).map_err(|e| e.to_string())?;
    let argmax = soft.argmax();
    let (mut nn_miss, mut soft_miss, mut gapped) = (0, 0, 0);
    for t in 0..u.rows() {
        let d = distances(&u, t, cb.entries());
        nn_miss += usize::from(hard.indices()[t] != d[0].1);
        if d[1].0 > d[0].0 {
            gapped += 1;
            soft_miss += usize::from(argmax[t] != hard.indices()[t]);
        }
    }
    // exact ties through duplicated codes resolve to the lower index
    let mut dup = cb.entries().clone();
    let first = dup.row(2).to_vec();
    dup.row_mut(6).copy_from_slice(&first);
    let dup = quantizer::Codebook::from_entries(dup, 0).map_err(|e| e.to_string())?;
    let tied = quantizer::assign_hard(&Matrix::from_rows(&[first]).unwrap(), &dup).map_err(|e| e.to_string())?;
    check(
        nn_miss == 0 && soft_miss == 0 && tied.indices() == [2],
        format!("1000 frames: {nn_miss} NN mismatches, {soft_miss} soft-argmax mismatches over {gapped} gapped frames, tie -> {:?}", tied.indices()),
    )
}

fn gumbel_limit() -> Outcome {
    let u = random_frames(32);
    let cb = quantizer::init_codebook(6, 8, 16).map_err(|e| e.to_string())?;
    let hard = quantizer::assign_hard(&u, &cb).map_err(|e| e.to_string())?;
    let soft = quantizer::assign_soft(&u, &cb, 1e-3, None).map_err(|e| e.to_string())?;
    let mut rows = 0;
    let mut worst: f64 = 1.0;
    for t in 0..u.rows() {
        let d = distances(&u, t, cb.entries());
        if d[1].0 - d[0].0 >= 0.1 {
            rows += 1;
            worst = worst.min(soft.rows().get(t, hard.indices()[t]));
        }
    }
    check(
        rows > 0 && worst >= 1.0 - 1e-6,
        format!("{rows} frames with gap >= 0.1, min mass on hard index {worst}"),
    )
}

fn penalty_equivalence() -> Outcome {
    let started = Instant::now();
    let report = verify::run_penalty_demo(
        &ToyBilevelProblem::fixture(),
        &verify::DEMO_GAMMAS,
        verify::DEMO_ETA,
        verify::DEMO_STEPS,
    )
    .map_err(|e| e.to_string())?;
    let row = report.row(100.0).ok_or("no gamma 100 row")?;
    // an anisotropic instance where descent leaves the constrained path
    let control = ToyBilevelProblem::new(
        vec![vec![2.0, 0.5], vec![0.5, 1.0]],
        vec![3.0, -1.0],
        vec![vec![1.0, 0.0], vec![0.0, 4.0]],
        vec![0.0, 0.0],
        1.0,
    )
    .map_err(|e| e.to_string())?;
    let ctrl = verify::run_penalty_demo(&control, &[100.0], 0.2, 60_000).map_err(|e| e.to_string())?;
    let ctrl_row = &ctrl.rows[0];
    let secs = started.elapsed().as_secs_f64();
    let deltas: Vec<String> = report.rows.iter().map(|r| format!("{:.2e}", r.delta)).collect();
    check(
        row.distance <= 1e-2 && report.delta_non_increasing() && ctrl_row.distance <= 1e-2 && secs < 10.0,
        format!(
            "gamma 100 distance {:.1e}; delta over gammas [{}]; anisotropic control distance {:.1e}; {secs:.2} s",
            row.distance,
            deltas.join(", "),
            ctrl_row.distance
        ),
    )
}

fn masking_statistics() -> Outcome {
    let policy = MaskPolicy::default();
    let frames = 500;
    let mut empirical = 0.0;
    for s in 0..10_000u64 {
        empirical += masking::sample_mask(&policy, frames, s).map_err(|e| e.to_string())?.fraction();
    }
    empirical /= 10_000.0;
    // independent simulation of the union of Bernoulli-started spans
    let span = policy.effective_span();
    let mut rng = rand::rngs::StdRng::seed_from_u64(77);
    let mut covered = 0usize;
    let draws = 10_000;
    for _ in 0..draws {
        let mut hit = vec![false; frames];
        for s in 0..frames {
            if rng.random::<f64>() < policy.start_prob {
                hit.iter_mut().skip(s).take(span).for_each(|h| *h = true);
            }
        }
        covered += hit.iter().filter(|&&h| h).count();
    }
    let oracle = covered as f64 / (draws * frames) as f64;
    let rel = (empirical - oracle).abs() / oracle;
    check(rel <= 0.1, format!("empirical {empirical:.4} vs oracle {oracle:.4}, relative gap {rel:.3}"))
}

fn learning_smoke() -> Outcome {
    let started = Instant::now();
    let mut cfg = TrainConfig::default();
    cfg.model.codebook_dim = 4;
    cfg.epochs = 200;
    let mut tr = Trainer::new(cfg, &smoke_corpus(200)).map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    while tr.steps_done() < 200 {
        tr.run_epoch(&mut |r| {
            rows.push(r.clone());
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    }
    let secs = started.elapsed().as_secs_f64();
    let last = rows.last().ok_or("no steps")?;
    let min_util = rows.iter().map(|r| r.codebook_util_enh).fold(f64::INFINITY, f64::min);
    check(
        last.mask_acc_anchor >= 0.625 && min_util > 0.0 && secs < 300.0,
        format!(
            "step {} mask_acc_anchor {:.3} (need 0.625), min codebook_util_enh {min_util:.3}; {secs:.0} s",
            last.step, last.mask_acc_anchor
        ),
    )
}

fn determinism_and_resume() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = features::synth_dataset(&SynthSpec {
        seed: 12,
        num_sequences: 6,
        frames: 60,
        dim: 6,
        num_clusters: 3,
        cluster_spread: 0.1,
    })
    .map_err(|e| e.to_string())?;
    let mut cfg = TrainConfig::default();
    cfg.epochs = 4;
    cfg.model.layers = 2;
    cfg.model.hidden_dim = 16;
    cfg.model.ff_dim = 32;
    cfg.objective.k = default_k(2);
    let run = |name: &str, resume: Option<&std::path::Path>| {
        let s = trainer::run_pretrain(&cfg, &data, &dir.path().join(name), resume).map_err(|e| e.to_string())?;
        std::fs::read_to_string(&s.metrics_path).map_err(|e| e.to_string())
    };
    let a = run("a", None)?;
    let b = run("b", None)?;
    let full: Vec<&str> = a.lines().collect();
    let per_epoch = (full.len() - 1) / cfg.epochs;
    let mut resumed_ok = 0;
    for epoch in 1..cfg.epochs as u64 {
        let ckpt = trainer::checkpoint_path(&dir.path().join("a"), epoch);
        let r = run(&format!("r{epoch}"), Some(&ckpt))?;
        let rows: Vec<&str> = r.lines().skip(1).collect();
        resumed_ok += usize::from(rows[..] == full[1 + per_epoch * epoch as usize..]);
    }
    check(
        a == b && resumed_ok == cfg.epochs - 1,
        format!(
            "repeat run identical: {}; resume matched at {resumed_ok}/{} epochs",
            a == b,
            cfg.epochs - 1
        ),
    )
}

fn corrupt_rejected<T>(bytes: &[u8], decode: impl Fn(&[u8]) -> Result<T, Error>) -> bool {
    let mut magic = bytes.to_vec();
    magic[1] ^= 0xff;
    let mut version = bytes.to_vec();
    version[8] ^= 0x01;
    [magic, version, bytes[..12].to_vec()]
        .iter()
        .all(|b| matches!(decode(b), Err(Error::Format(_))))
}

fn format_roundtrips() -> Outcome {
    let sm = |e: Error| e.to_string();
    let feats = FeatureSequence::new(
        Matrix::from_fn(13, 7, |r, c| f64::from(((r * 7 + c) as f32 * 0.37).sin())),
        FRAME_SHIFT_SECS,
    )
    .map_err(sm)?;
    let fb = features::encode_features(&feats);
    let feats_ok = features::decode_features(&fb).map_err(sm)?.data() == feats.data()
        && features::encode_features(&features::decode_features(&fb).map_err(sm)?) == fb;

    let hard = LabelFile::Hard(HardLabels::new((0..50).map(|i| (i * 7) % 8).collect(), 8).map_err(sm)?);
    let cb = quantizer::init_codebook(1, 8, 4).map_err(sm)?;
    let u = Matrix::from_fn(20, 4, |r, c| ((r + 2 * c) as f64).cos());
    let soft = LabelFile::Soft(quantizer::assign_soft(&u, &cb, 0.5, None).map_err(sm)?);
    let mut labels_ok = true;
    for l in [&hard, &soft] {
        let b = quantizer::encode_labels(l);
        labels_ok &= quantizer::encode_labels(&quantizer::decode_labels(&b).map_err(sm)?) == b;
    }
    labels_ok &= quantizer::decode_labels(&quantizer::encode_labels(&hard)).map_err(sm)? == hard;

    let mut cfg = TrainConfig::default();
    cfg.epochs = 1;
    cfg.model.layers = 1;
    cfg.model.hidden_dim = 8;
    cfg.model.heads = 2;
    cfg.model.ff_dim = 8;
    cfg.objective.k = 1;
    let mut tr = Trainer::new(cfg, &smoke_corpus(40)).map_err(sm)?;
    tr.run_epoch(&mut |_| Ok(())).map_err(sm)?;
    let ck = tr.checkpoint();
    let cb_bytes = trainer::encode_checkpoint(&ck).map_err(sm)?;
    let back = trainer::decode_checkpoint(&cb_bytes).map_err(sm)?;
    let ckpt_ok = back == ck && trainer::encode_checkpoint(&back).map_err(sm)? == cb_bytes;

    let corrupt_ok = corrupt_rejected(&fb, features::decode_features)
        && corrupt_rejected(&quantizer::encode_labels(&hard), quantizer::decode_labels)
        && corrupt_rejected(&quantizer::encode_labels(&soft), quantizer::decode_labels)
        && corrupt_rejected(&cb_bytes, trainer::decode_checkpoint);
    check(
        feats_ok && labels_ok && ckpt_ok && corrupt_ok,
        format!("FEATS {feats_ok}, LABELS {labels_ok}, CKPT {ckpt_ok}, corrupt headers rejected {corrupt_ok}"),
    )
}

fn hyperparameter_wiring() -> Outcome {
    let cfg = RunConfig::default();
    let text = cfg.resolved();
    let has = |line: &str| text.lines().any(|l| l == line);
    let gamma = cfg.train.objective.weights.gamma();
    let deep = RunConfig::parse("layers = 10").map_err(|e| e.to_string())?.resolved();
    let lines_ok = has("tau = 0.5") && has("w1 = 0.1") && has("w2 = 2.4") && has("mask_noise_std = 0.1") && has("k = 3");
    let gamma_ok = gamma.is_some_and(|g| (g - 24.0).abs() < 1e-12);
    let k_ok = default_k(5) == 3 && default_k(10) == 7 && deep.lines().any(|l| l == "k = 7");
    check(
        lines_ok && gamma_ok && k_ok,
        format!("resolved lines {lines_ok}, gamma {:.6}, default_k(5) {}, default_k(10) {}", gamma.unwrap_or(f64::NAN), default_k(5), default_k(10)),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient fidelity", gradient_fidelity),
        ("best-rq reduction", best_rq_reduction),
        ("quantizer oracle equivalence", quantizer_oracle),
        ("gumbel-softmax limit", gumbel_limit),
        ("penalty/constrained equivalence", penalty_equivalence),
        ("masking statistics", masking_statistics),
        ("learning smoke test", learning_smoke),
        ("determinism and resume", determinism_and_resume),
        ("format round-trips", format_roundtrips),
        ("hyperparameter wiring", hyperparameter_wiring),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
