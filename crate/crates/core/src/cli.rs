//! Command-line front end and the flat `key = value` run configuration.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 data, I/O or
//! format error, 4 numeric abort, 5 threshold failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::autodiff::Precision;
use crate::encoder::{self, EncoderParams};
use crate::error::{Error, Result};
use crate::features::{self, FeatureSequence, SynthSpec};
use crate::objectives::{Objective, PenaltyWeights};
use crate::quantizer::{self, LabelFile, QuantizerState};
use crate::trainer::{self, MetricsRecord, OptimizerKind, Seeds, TrainConfig};
use crate::verify::{self, GradCheckConfig, ToyBilevelProblem};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_THRESHOLD: i32 = 5;

pub const BASE_SEED_ENV: &str = "BIRQ_BASE_SEED";

/// Every configuration key with its default and a one-line description,
/// in the order `config.resolved` lists them.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("epochs", "10", "passes over the dataset"),
    ("batch_size", "4", "sequences per update"),
    ("optimizer", "adamw", "sgd | adamw"),
    ("lr", "0.001", "peak learning rate"),
    ("warmup_steps", "20", "linear warmup length in updates"),
    ("adam_beta1", "0.9", "AdamW first-moment decay"),
    ("adam_beta2", "0.98", "AdamW second-moment decay"),
    ("adam_eps", "0.00000001", "AdamW denominator epsilon"),
    ("weight_decay", "0", "decoupled weight decay"),
    ("clip_norm", "none", "global gradient-norm clip, or none"),
    ("objective", "birq", "birq (w1*F + w2*G) | best-rq (G only)"),
    ("w1", "0.1", "upper-level weight"),
    ("w2", "2.4", "lower-level weight"),
    ("tau", "0.5", "Gumbel-softmax temperature"),
    ("k", "auto", "tap layer; auto = default_k(layers)"),
    ("gumbel_noise", "true", "add Gumbel noise to enhanced labels"),
    ("stop_label_grad", "false", "treat enhanced labels as constants"),
    ("precision", "f64", "f64 | f32 (emulated) tape precision"),
    ("mask_start_prob", "0.02", "per-frame span start probability"),
    ("mask_span", "20", "span length before stacking"),
    ("mask_noise_mean", "0", "mean of the masked-frame fill"),
    ("mask_noise_std", "0.1", "std of the masked-frame fill"),
    ("mask_exact_count", "false", "exactly round(p*T) span starts"),
    ("stack_factor", "2", "frames stacked per encoder step"),
    ("codebook_size", "8", "codes per codebook (N)"),
    ("codebook_dim", "16", "code dimension (d_c)"),
    ("num_codebooks", "1", "independent codebooks"),
    ("codebook_l2_normalize", "false", "unit-norm codes and projections"),
    ("layers", "5", "encoder layers (K)"),
    ("hidden_dim", "64", "encoder width (d_h)"),
    ("heads", "4", "attention heads"),
    ("ff_dim", "128", "feed-forward width"),
    ("pos_encoding", "true", "sinusoidal positions"),
    ("seed_data", "1", "shuffle seed"),
    ("seed_mask", "2", "mask and fill-noise seed"),
    ("seed_gumbel", "3", "Gumbel noise seed"),
    ("seed_init", "4", "encoder initialization seed"),
    ("seed_quantizer", "5", "codebook and projection seed"),
    ("synth_seed", "7", "synthetic corpus seed"),
    ("synth_sequences", "4", "synthetic sequences"),
    ("synth_frames", "200", "frames per synthetic sequence"),
    ("synth_dim", "8", "synthetic feature dimension"),
    ("synth_clusters", "4", "planted clusters"),
    ("synth_spread", "0.05", "cluster noise scale"),
];

/// Parsed, validated and frozen configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synth: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_map(&BTreeMap::new()).expect("defaults are valid")
    }
}

fn parse_value<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = lookup(map, key);
    raw.parse()
        .map_err(|_| Error::Config(format!("invalid value '{raw}' for key '{key}'")))
}

fn lookup<'a>(map: &'a BTreeMap<String, String>, key: &str) -> &'a str {
    map.get(key).map(String::as_str).unwrap_or_else(|| {
        KEYS.iter()
            .find(|(k, _, _)| *k == key)
            .map(|(_, d, _)| *d)
            .expect("known key")
    })
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.iter().any(|(k, _, _)| *k == key) {
                return Err(Error::Config(format!("unknown config key '{key}' (line {})", n + 1)));
            }
            if map.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::Config(format!("duplicate config key '{key}' (line {})", n + 1)));
            }
        }
        RunConfig::from_map(&map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut t = TrainConfig::default();
        t.epochs = parse_value(map, "epochs")?;
        t.batch_size = parse_value(map, "batch_size")?;
        let o = &mut t.optimizer;
        o.kind = lookup(map, "optimizer").parse::<OptimizerKind>()?;
        o.lr = parse_value(map, "lr")?;
        o.warmup_steps = parse_value(map, "warmup_steps")?;
        o.beta1 = parse_value(map, "adam_beta1")?;
        o.beta2 = parse_value(map, "adam_beta2")?;
        o.eps = parse_value(map, "adam_eps")?;
        o.weight_decay = parse_value(map, "weight_decay")?;
        o.clip_norm = match lookup(map, "clip_norm") {
            "none" => None,
            _ => Some(parse_value(map, "clip_norm")?),
        };

        let m = &mut t.model;
        m.layers = parse_value(map, "layers")?;
        m.hidden_dim = parse_value(map, "hidden_dim")?;
        m.heads = parse_value(map, "heads")?;
        m.ff_dim = parse_value(map, "ff_dim")?;
        m.positional_encoding = parse_value(map, "pos_encoding")?;
        m.codebook_size = parse_value(map, "codebook_size")?;
        m.codebook_dim = parse_value(map, "codebook_dim")?;
        m.num_codebooks = parse_value(map, "num_codebooks")?;
        m.codebook_l2_normalize = parse_value(map, "codebook_l2_normalize")?;
        m.stack_factor = parse_value(map, "stack_factor")?;

        let ob = &mut t.objective;
        ob.objective = match lookup(map, "objective") {
            "birq" => Objective::Bilevel,
            "best-rq" => Objective::LowerOnly,
            other => return Err(Error::Config(format!("invalid value '{other}' for key 'objective'"))),
        };
        ob.weights = PenaltyWeights::new(parse_value(map, "w1")?, parse_value(map, "w2")?)
            .map_err(|e| Error::Config(e.to_string()))?;
        ob.temperature = parse_value(map, "tau")?;
        ob.k = match lookup(map, "k") {
            "auto" => encoder::default_k(t.model.layers),
            _ => parse_value(map, "k")?,
        };
        ob.stop_label_grad = parse_value(map, "stop_label_grad")?;
        ob.precision = match lookup(map, "precision") {
            "f64" => Precision::F64,
            "f32" => Precision::F32,
            other => return Err(Error::Config(format!("invalid value '{other}' for key 'precision'"))),
        };
        t.gumbel_noise = parse_value(map, "gumbel_noise")?;

        let mk = &mut t.mask;
        mk.start_prob = parse_value(map, "mask_start_prob")?;
        mk.span = parse_value(map, "mask_span")?;
        mk.noise_mean = parse_value(map, "mask_noise_mean")?;
        mk.noise_std = parse_value(map, "mask_noise_std")?;
        mk.exact_count = parse_value(map, "mask_exact_count")?;
        mk.stack_factor = t.model.stack_factor;

        t.seeds = Seeds {
            data: parse_value(map, "seed_data")?,
            mask: parse_value(map, "seed_mask")?,
            gumbel: parse_value(map, "seed_gumbel")?,
            init: parse_value(map, "seed_init")?,
            quantizer: parse_value(map, "seed_quantizer")?,
        };
        let synth = SynthSpec {
            seed: parse_value(map, "synth_seed")?,
            num_sequences: parse_value(map, "synth_sequences")?,
            frames: parse_value(map, "synth_frames")?,
            dim: parse_value(map, "synth_dim")?,
            num_clusters: parse_value(map, "synth_clusters")?,
            cluster_spread: parse_value(map, "synth_spread")?,
        };
        t.validate()?;
        synth.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(RunConfig { train: t, synth })
    }

    /// Derives every seed from one base value.
    pub fn apply_base_seed(&mut self, base: u64) {
        self.train.seeds = Seeds::all(base);
        self.synth.seed = base;
    }

    /// Every key with its effective value; parsing the result reproduces
    /// this configuration exactly.
    pub fn resolved(&self) -> String {
        let t = &self.train;
        let value = |key: &str| -> String {
            match key {
                "epochs" => t.epochs.to_string(),
                "batch_size" => t.batch_size.to_string(),
                "optimizer" => t.optimizer.kind.to_string(),
                "lr" => t.optimizer.lr.to_string(),
                "warmup_steps" => t.optimizer.warmup_steps.to_string(),
                "adam_beta1" => t.optimizer.beta1.to_string(),
                "adam_beta2" => t.optimizer.beta2.to_string(),
                "adam_eps" => t.optimizer.eps.to_string(),
                "weight_decay" => t.optimizer.weight_decay.to_string(),
                "clip_norm" => t.optimizer.clip_norm.map_or("none".into(), |c| c.to_string()),
                "objective" => match t.objective.objective {
                    Objective::Bilevel => "birq".into(),
                    Objective::LowerOnly => "best-rq".into(),
                },
                "w1" => t.objective.weights.w1().to_string(),
                "w2" => t.objective.weights.w2().to_string(),
                "tau" => t.objective.temperature.to_string(),
                "k" => t.objective.k.to_string(),
                "gumbel_noise" => t.gumbel_noise.to_string(),
                "stop_label_grad" => t.objective.stop_label_grad.to_string(),
                "precision" => match t.objective.precision {
                    Precision::F64 => "f64".into(),
                    Precision::F32 => "f32".into(),
                },
                "mask_start_prob" => t.mask.start_prob.to_string(),
                "mask_span" => t.mask.span.to_string(),
                "mask_noise_mean" => t.mask.noise_mean.to_string(),
                "mask_noise_std" => t.mask.noise_std.to_string(),
                "mask_exact_count" => t.mask.exact_count.to_string(),
                "stack_factor" => t.model.stack_factor.to_string(),
                "codebook_size" => t.model.codebook_size.to_string(),
                "codebook_dim" => t.model.codebook_dim.to_string(),
                "num_codebooks" => t.model.num_codebooks.to_string(),
                "codebook_l2_normalize" => t.model.codebook_l2_normalize.to_string(),
                "layers" => t.model.layers.to_string(),
                "hidden_dim" => t.model.hidden_dim.to_string(),
                "heads" => t.model.heads.to_string(),
                "ff_dim" => t.model.ff_dim.to_string(),
                "pos_encoding" => t.model.positional_encoding.to_string(),
                "seed_data" => t.seeds.data.to_string(),
                "seed_mask" => t.seeds.mask.to_string(),
                "seed_gumbel" => t.seeds.gumbel.to_string(),
                "seed_init" => t.seeds.init.to_string(),
                "seed_quantizer" => t.seeds.quantizer.to_string(),
                "synth_seed" => self.synth.seed.to_string(),
                "synth_sequences" => self.synth.num_sequences.to_string(),
                "synth_frames" => self.synth.frames.to_string(),
                "synth_dim" => self.synth.dim.to_string(),
                "synth_clusters" => self.synth.num_clusters.to_string(),
                "synth_spread" => self.synth.cluster_spread.to_string(),
                other => unreachable!("unlisted key {other}"),
            }
        };
        let mut out = String::from("# resolved configuration; every key is explicit\n");
        for (key, _, doc) in KEYS {
            let _ = writeln!(out, "# {doc}\n{key} = {}", value(key));
        }
        out
    }
}

#[derive(Parser, Debug)]
#[command(name = "birq", version, about = "Bilevel masked-prediction speech SSL toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LabelMode {
    Hard,
    Soft,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on FEATS files or the synthetic corpus.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// A FEATS file or a directory of `*.feats` files.
        #[arg(long, conflicts_with = "synth", required_unless_present = "synth")]
        data: Option<PathBuf>,
        /// Use the synthetic corpus described by the `synth_*` keys.
        #[arg(long)]
        synth: bool,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Finite-difference check of the analytic gradients on a tiny model.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Emulate 32-bit arithmetic for the analytic gradient.
        #[arg(long)]
        f32: bool,
        /// Test hook: corrupt the gradient of this tensor.
        #[arg(long)]
        sabotage: Option<String>,
        /// Also write the per-tensor table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Penalty descent against the constrained optimum on a quadratic fixture.
    BilevelDemo {
        #[arg(long, value_delimiter = ',', default_values_t = verify::DEMO_GAMMAS.to_vec())]
        gammas: Vec<f64>,
        #[arg(long, default_value_t = verify::DEMO_ETA)]
        eta: f64,
        #[arg(long, default_value_t = verify::DEMO_STEPS)]
        steps: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Export anchoring (hard) or relaxed (soft) labels for a FEATS file.
    Quantize {
        #[arg(long)]
        feats: PathBuf,
        #[arg(long, value_enum, default_value = "hard")]
        mode: LabelMode,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Soft mode only: use the enhanced path of this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write the synthetic corpus as FEATS files.
    SynthData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render loss and utilization curves from a metrics CSV as SVG.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io { .. } => Error::Config(e.to_string()),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    if let Ok(raw) = std::env::var(BASE_SEED_ENV) {
        let base: u64 = raw
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{BASE_SEED_ENV}='{raw}' is not an unsigned integer")))?;
        eprintln!("{BASE_SEED_ENV}={base}: deriving every seed from it");
        cfg.apply_base_seed(base);
    }
    Ok(cfg)
}

/// FEATS file or every `*.feats` in a directory, in name order.
pub fn load_dataset(path: &Path) -> Result<Vec<FeatureSequence>> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_file() {
        return Ok(vec![features::load_features(path)?]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "feats"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Input(format!("no .feats files in {}", path.display())));
    }
    files.iter().map(features::load_features).collect()
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Pretrain {
            config,
            data,
            synth,
            out,
            resume,
        } => {
            let cfg = load_config(config.as_deref())?;
            let dataset = if synth {
                features::synth_dataset(&cfg.synth)?
            } else {
                load_dataset(data.as_deref().expect("clap enforces --data or --synth"))?
            };
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_file(&out.join("config.resolved"), cfg.resolved())?;
            let summary = trainer::run_pretrain(&cfg.train, &dataset, &out, resume.as_deref())?;
            println!("steps {}", summary.steps);
            if let Some(m) = &summary.final_metrics {
                println!(
                    "final loss_total {:.6} loss_F {:.6} loss_G {:.6} mask_acc_anchor {:.4}",
                    m.loss_total, m.loss_f, m.loss_g, m.mask_acc_anchor
                );
            }
            println!("metrics {}", summary.metrics_path.display());
            for c in &summary.checkpoints {
                println!("checkpoint {}", c.display());
            }
            Ok(EXIT_OK)
        }
        Command::Gradcheck {
            config,
            f32,
            sabotage,
            csv,
        } => {
            let run = load_config(config.as_deref())?;
            let o = &run.train.objective;
            let precision = if f32 { Precision::F32 } else { o.precision };
            let cfg = GradCheckConfig {
                weights: o.weights,
                temperature: o.temperature,
                gumbel_noise: run.train.gumbel_noise,
                stop_label_grad: o.stop_label_grad,
                precision,
                sabotage,
                ..GradCheckConfig::default()
            };
            let report = verify::gradcheck_birq(&cfg)?;
            print!("{}", report.table());
            if let Some(p) = csv {
                write_file(&p, report.to_csv())?;
            }
            if report.passed() {
                println!("PASS");
                Ok(EXIT_OK)
            } else {
                let w = report.worst();
                eprintln!(
                    "gradcheck failed: worst tensor {} ({}) relative error {:.3e} > {:e}",
                    w.tensor, w.objective, w.max_rel_error, report.threshold
                );
                Ok(EXIT_THRESHOLD)
            }
        }
        Command::BilevelDemo {
            gammas,
            eta,
            steps,
            csv,
        } => {
            if gammas.is_empty() {
                return Err(Error::Config("--gammas needs at least one value".into()));
            }
            if let Some(g) = gammas.iter().find(|g| g.is_nan() || **g < 0.0) {
                return Err(Error::Config(format!("gamma {g} must be >= 0")));
            }
            let report = verify::run_penalty_demo(&ToyBilevelProblem::fixture(), &gammas, eta, steps)?;
            print!("{}", report.table());
            if let Some(p) = csv {
                write_file(&p, report.to_csv())?;
            }
            let ok = match report.row(100.0) {
                Some(r) => r.distance <= verify::DEMO_TOL,
                None => true,
            };
            if ok {
                println!("PASS");
                Ok(EXIT_OK)
            } else {
                eprintln!("bilevel demo failed: distance at gamma 100 exceeds {}", verify::DEMO_TOL);
                Ok(EXIT_THRESHOLD)
            }
        }
        Command::Quantize {
            feats,
            mode,
            out,
            config,
            checkpoint,
        } => {
            let cfg = load_config(config.as_deref())?;
            let labels = quantize_file(&cfg, &feats, mode, checkpoint.as_deref())?;
            quantizer::save_labels(&labels, &out)?;
            let (frames, codes) = match &labels {
                LabelFile::Hard(h) => (h.len(), h.num_codes()),
                LabelFile::Soft(s) => s.rows().shape(),
            };
            println!("wrote {} frames x {} codes to {}", frames, codes, out.display());
            Ok(EXIT_OK)
        }
        Command::SynthData { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let data = features::synth_dataset(&cfg.synth)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            for (i, seq) in data.iter().enumerate() {
                features::save_features(seq, out.join(format!("seq_{i:04}.feats")))?;
            }
            println!("wrote {} sequences to {}", data.len(), out.display());
            Ok(EXIT_OK)
        }
        Command::Plot { metrics, out } => {
            let rows = read_metrics(&metrics)?;
            write_file(&out, render_svg(&rows))?;
            println!("wrote {}", out.display());
            Ok(EXIT_OK)
        }
    }
}

/// Applies the training front end (stacking, normalization) and exports
/// labels for codebook 0.
fn quantize_file(cfg: &RunConfig, feats: &Path, mode: LabelMode, checkpoint: Option<&Path>) -> Result<LabelFile> {
    let raw = features::load_features(feats)?;
    let model = &cfg.train.model;
    let x = features::normalize(&features::stack_frames(&raw, model.stack_factor)?)?.into_data();
    let input_dim = x.cols();
    let quant = QuantizerState::new(&model.quantizer_spec(input_dim, cfg.train.seeds.quantizer))?;
    let tau = cfg.train.objective.temperature;
    let noise = cfg
        .train
        .gumbel_noise
        .then(|| quantizer::sample_gumbel(cfg.train.seeds.gumbel, x.rows(), quant.codebook_size()));
    match (mode, checkpoint) {
        (LabelMode::Hard, None) => Ok(LabelFile::Hard(quant.anchor_labels(0, &x)?)),
        (LabelMode::Hard, Some(_)) => Err(Error::Config("--checkpoint applies to soft mode only".into())),
        (LabelMode::Soft, None) => {
            let u = quantizer::project(quant.anchor_projection(0), &x)?;
            Ok(LabelFile::Soft(quantizer::assign_soft(&u, quant.codebook(0), tau, noise.as_ref())?))
        }
        (LabelMode::Soft, Some(ckpt)) => {
            let ck = trainer::load_checkpoint(ckpt)?;
            let ecfg = model.encoder_config(input_dim, cfg.train.seeds.init);
            let params = EncoderParams::from_tensors(&ecfg, ck.params)?;
            let trace = encoder::forward(&params, &x)?;
            let z = encoder::tap(&trace, cfg.train.objective.k)?;
            let u = quantizer::project(quant.enhance_projection(0), &z)?;
            Ok(LabelFile::Soft(quantizer::assign_soft(&u, quant.codebook(0), tau, noise.as_ref())?))
        }
    }
}

/// Reads a metrics CSV; header-only or malformed files are format errors.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    })?;
    let header = reader
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != trainer::METRICS_HEADER {
        return Err(Error::Format(format!("{}: unexpected metrics header", path.display())));
    }
    let rows = reader
        .deserialize()
        .collect::<std::result::Result<Vec<MetricsRecord>, _>>()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if rows.is_empty() {
        return Err(Error::Format(format!("{}: no metrics rows", path.display())));
    }
    Ok(rows)
}

const SVG_WIDTH: f64 = 800.0;
const PANEL_HEIGHT: f64 = 260.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 3] = ["#1f77b4", "#d62728", "#2ca02c"];

type Series<'a> = (&'a str, Vec<(f64, f64)>);

fn panel(out: &mut String, top: f64, title: &str, series: &[Series<'_>]) {
    let (x0, x1) = (MARGIN, SVG_WIDTH - MARGIN);
    let (y0, y1) = (top + 30.0, top + PANEL_HEIGHT);
    let points = series.iter().flat_map(|(_, p)| p.iter());
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    if xmax <= xmin {
        xmax = xmin + 1.0;
    }
    if ymax <= ymin {
        ymax = ymin + 1.0;
    }
    let _ = writeln!(
        out,
        r#"<rect x="{x0}" y="{y0}" width="{}" height="{}" fill="none" stroke="gray"/>"#,
        x1 - x0,
        y1 - y0
    );
    let _ = writeln!(out, r#"<text x="{x0}" y="{}" font-size="14">{title}</text>"#, top + 20.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{ymax:.3}</text>"#, x0 - 4.0, y0 + 10.0);
    let _ = writeln!(out, r#"<text x="{}" y="{y1}" font-size="10" text-anchor="end">{ymin:.3}</text>"#, x0 - 4.0);
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut d = String::new();
        for (j, &(x, y)) in pts.iter().enumerate() {
            let px = x0 + (x - xmin) / (xmax - xmin) * (x1 - x0);
            let py = y1 - (y - ymin) / (ymax - ymin) * (y1 - y0);
            let _ = write!(d, "{}{px:.2},{py:.2}", if j == 0 { "M" } else { " L" });
        }
        let _ = writeln!(out, r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="1.5"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{name}</text>"#,
            x1 - 150.0,
            y0 + 15.0 + 14.0 * i as f64
        );
    }
}

/// Two panels (losses, utilizations), one path per series with at least one
/// finite value.
pub fn render_svg(rows: &[MetricsRecord]) -> String {
    let collect = |f: fn(&MetricsRecord) -> f64| -> Vec<(f64, f64)> {
        rows.iter()
            .filter(|r| f(r).is_finite())
            .map(|r| (r.step as f64, f(r)))
            .collect()
    };
    let keep = |s: Vec<Series<'static>>| s.into_iter().filter(|(_, p)| !p.is_empty()).collect::<Vec<_>>();
    let losses = keep(vec![
        ("loss_total", collect(|r| r.loss_total)),
        ("loss_F", collect(|r| r.loss_f)),
        ("loss_G", collect(|r| r.loss_g)),
    ]);
    let utils = keep(vec![
        ("codebook_util_anchor", collect(|r| r.codebook_util_anchor)),
        ("codebook_util_enh", collect(|r| r.codebook_util_enh)),
    ]);
    let height = 2.0 * PANEL_HEIGHT + 40.0;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {SVG_WIDTH} {height}\" width=\"{SVG_WIDTH}\" height=\"{height}\">\n"
    );
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    panel(&mut out, 0.0, "losses", &losses);
    panel(&mut out, PANEL_HEIGHT + 20.0, "codebook utilization", &utils);
    out.push_str("</svg>\n");
    out
}
