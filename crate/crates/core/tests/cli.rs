//! The `birq` executable: exit codes, file outputs and config closure.

use std::path::Path;
use std::process::{Command, Output};

use birq::cli::RunConfig;
use birq::features;
use birq::matrix::Matrix;
use birq::quantizer::{self, HardLabels, LabelFile, QuantizerState};

fn birq(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_birq"))
        .args(args)
        .current_dir(dir)
        .env_remove("BIRQ_BASE_SEED")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = "epochs = 2\nsynth_frames = 40\nlayers = 2\nhidden_dim = 16\nff_dim = 32\n";

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    let o = birq(&["pretrain", "--config", "small.cfg", "--synth", "--out", "a"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let resolved = std::fs::read_to_string(dir.path().join("a/config.resolved")).unwrap();
    assert!(resolved.contains("k = 1\n"));
    let o = birq(&["pretrain", "--config", "a/config.resolved", "--synth", "--out", "b"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/metrics.csv"), read("b/metrics.csv"));
    assert_eq!(read("a/config.resolved"), read("b/config.resolved"));
    assert_eq!(read("a/checkpoint_epoch0002.ckpt"), read("b/checkpoint_epoch0002.ckpt"));
}

#[test]
fn base_seed_env_rederives_seeds_and_is_logged() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    let run = |out: &str, seed: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_birq"));
        cmd.args(["pretrain", "--config", "small.cfg", "--synth", "--out", out])
            .current_dir(dir.path())
            .env_remove("BIRQ_BASE_SEED");
        if let Some(s) = seed {
            cmd.env("BIRQ_BASE_SEED", s);
        }
        cmd.output().unwrap()
    };
    let plain = run("plain", None);
    let seeded = run("seeded", Some("1234"));
    assert_eq!(code(&seeded), 0);
    assert!(stderr(&seeded).contains("BIRQ_BASE_SEED=1234"));
    assert!(!stderr(&plain).contains("BIRQ_BASE_SEED"));
    let read = |p: &str| std::fs::read_to_string(dir.path().join(p)).unwrap();
    assert_ne!(read("plain/metrics.csv"), read("seeded/metrics.csv"));
    assert!(read("seeded/config.resolved").contains("synth_seed = 1234\n"));
    assert_eq!(code(&run("again", Some("1234"))), 0);
    assert_eq!(read("seeded/metrics.csv"), read("again/metrics.csv"));
    assert_eq!(code(&run("bad", Some("minus one"))), 2);
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "epochs = 1\nlearning_rate = 0.1\n").unwrap();
    let o = birq(&["pretrain", "--config", "bad.cfg", "--synth", "--out", "x"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_rate"));
    assert!(!dir.path().join("x").exists());

    let o = birq(&["gradcheck", "--config", "missing.cfg"], dir.path());
    assert_eq!(code(&o), 2);
    assert_eq!(code(&birq(&["pretrain", "--out", "x"], dir.path())), 2);
    assert_eq!(code(&birq(&["no-such-command"], dir.path())), 2);
    assert_eq!(code(&birq(&["--help"], dir.path())), 0);
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("junk.feats"), b"NOTFEATS and then some bytes to pad it out").unwrap();
    let o = birq(&["pretrain", "--data", "junk.feats", "--out", "x"], dir.path());
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("format error"));
    assert_eq!(code(&birq(&["pretrain", "--data", "nowhere", "--out", "x"], dir.path())), 3);
    std::fs::create_dir(dir.path().join("empty")).unwrap();
    assert_eq!(code(&birq(&["pretrain", "--data", "empty", "--out", "x"], dir.path())), 3);
    assert_eq!(
        code(&birq(&["quantize", "--feats", "junk.feats", "--out", "l.labels"], dir.path())),
        3
    );
}

#[test]
fn gradcheck_passes_and_sabotage_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = birq(&["gradcheck", "--csv", "g.csv"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));
    let csv = std::fs::read_to_string(dir.path().join("g.csv")).unwrap();
    assert!(csv.lines().count() > 3);

    let o = birq(&["gradcheck", "--sabotage", "head.weight"], dir.path());
    assert_eq!(code(&o), 5);
    assert!(stderr(&o).contains("head.weight"), "{}", stderr(&o));
    assert_eq!(code(&birq(&["gradcheck", "--sabotage", "nope"], dir.path())), 2);
    assert_eq!(code(&birq(&["gradcheck", "--f32"], dir.path())), 0);
}

#[test]
fn bilevel_demo_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    let o = birq(&["bilevel-demo", "--csv", "demo.csv"], dir.path());
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(dir.path().join("demo.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    // descent from the origin stays on the constrained-optimum path of this
    // fixture, so even a truncated run passes
    assert_eq!(code(&birq(&["bilevel-demo", "--steps", "1"], dir.path())), 0);
    assert_eq!(code(&birq(&["bilevel-demo", "--eta", "50"], dir.path())), 4);
    assert_eq!(code(&birq(&["bilevel-demo", "--gammas", "1,-3"], dir.path())), 2);
}

fn nearest(u: &Matrix, c: &Matrix) -> Vec<usize> {
    (0..u.rows())
        .map(|t| {
            let d = |n: usize| (0..u.cols()).map(|j| (u.get(t, j) - c.get(n, j)).powi(2)).sum::<f64>();
            (0..c.rows()).fold(0, |best, n| if d(n) < d(best) { n } else { best })
        })
        .collect()
}

#[test]
fn quantize_matches_brute_force_golden() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&birq(&["synth-data", "--out", "feats"], dir.path())), 0);
    let o = birq(&["quantize", "--feats", "feats/seq_0001.feats", "--out", "hard.labels"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    // golden file built from a brute-force nearest neighbour over the
    // stacked, normalized frames
    let cfg = RunConfig::default();
    let raw = features::load_features(dir.path().join("feats/seq_0001.feats")).unwrap();
    let x = features::normalize(&features::stack_frames(&raw, 2).unwrap()).unwrap().into_data();
    let quant = QuantizerState::new(&cfg.train.model.quantizer_spec(x.cols(), cfg.train.seeds.quantizer)).unwrap();
    let p = quant.anchor_projection(0).matrix();
    let u = Matrix::from_fn(x.rows(), p.cols(), |t, j| (0..x.cols()).map(|i| x.get(t, i) * p.get(i, j)).sum());
    let golden = LabelFile::Hard(HardLabels::new(nearest(&u, quant.codebook(0).entries()), 8).unwrap());
    assert_eq!(
        std::fs::read(dir.path().join("hard.labels")).unwrap(),
        quantizer::encode_labels(&golden)
    );

    std::fs::write(dir.path().join("quiet.cfg"), "gumbel_noise = false\ntau = 0.001\n").unwrap();
    let o = birq(
        &["quantize", "--feats", "feats/seq_0001.feats", "--mode", "soft", "--config", "quiet.cfg", "--out", "soft.labels"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let LabelFile::Soft(soft) = quantizer::load_labels(dir.path().join("soft.labels")).unwrap() else {
        panic!("expected soft labels");
    };
    let LabelFile::Hard(hard) = golden else { unreachable!() };
    assert_eq!(soft.argmax(), hard.indices());
    for t in 0..soft.rows().rows() {
        let s: f64 = soft.rows().row(t).iter().sum();
        assert!((s - 1.0).abs() < 1e-5);
    }
}

#[test]
fn soft_labels_from_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    assert_eq!(code(&birq(&["synth-data", "--config", "small.cfg", "--out", "feats"], dir.path())), 0);
    let o = birq(&["pretrain", "--config", "small.cfg", "--data", "feats", "--out", "run"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let args = ["quantize", "--feats", "feats/seq_0000.feats", "--config", "small.cfg", "--checkpoint", "run/checkpoint_epoch0002.ckpt"];
    let o = birq(&[&args[..], &["--mode", "soft", "--out", "enh.labels"]].concat(), dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(matches!(quantizer::load_labels(dir.path().join("enh.labels")).unwrap(), LabelFile::Soft(_)));
    assert_eq!(code(&birq(&[&args[..], &["--out", "h.labels"]].concat(), dir.path())), 2);
    // checkpoint shapes must match the configured model
    let o = birq(
        &["quantize", "--feats", "feats/seq_0000.feats", "--mode", "soft", "--checkpoint", "run/checkpoint_epoch0002.ckpt", "--out", "x.labels"],
        dir.path(),
    );
    assert_eq!(code(&o), 3);
}

#[test]
fn plot_renders_one_path_per_series() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    assert_eq!(code(&birq(&["pretrain", "--config", "small.cfg", "--synth", "--out", "run"], dir.path())), 0);
    let o = birq(&["plot", "--metrics", "run/metrics.csv", "--out", "m.svg"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let svg = std::fs::read_to_string(dir.path().join("m.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("viewBox=\"0 0 800 560\""));
    assert_eq!(svg.matches("<path").count(), 5);
    assert_eq!(code(&birq(&["plot", "--metrics", "run/metrics.csv", "--out", "n.svg"], dir.path())), 0);
    assert_eq!(svg, std::fs::read_to_string(dir.path().join("n.svg")).unwrap());

    // lower-level-only runs have no upper loss or enhanced accuracy
    std::fs::write(dir.path().join("brq.cfg"), format!("{SMALL}objective = best-rq\n")).unwrap();
    assert_eq!(code(&birq(&["pretrain", "--config", "brq.cfg", "--synth", "--out", "brq"], dir.path())), 0);
    assert_eq!(code(&birq(&["plot", "--metrics", "brq/metrics.csv", "--out", "b.svg"], dir.path())), 0);
    let svg = std::fs::read_to_string(dir.path().join("b.svg")).unwrap();
    assert_eq!(svg.matches("<path").count(), 3);

    let header = format!("{}\n", birq::trainer::METRICS_HEADER);
    std::fs::write(dir.path().join("empty.csv"), &header).unwrap();
    std::fs::write(dir.path().join("broken.csv"), format!("{header}1,0,abc\n")).unwrap();
    std::fs::write(dir.path().join("other.csv"), "a,b\n1,2\n").unwrap();
    for f in ["empty.csv", "broken.csv", "other.csv", "absent.csv"] {
        assert_eq!(code(&birq(&["plot", "--metrics", f, "--out", "z.svg"], dir.path())), 3, "{f}");
    }
}
