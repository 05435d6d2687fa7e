//! K-layer self-attention encoder with a tap at layer `k` and an `N`-way
//! per-frame logit head.
//!
//! Each block is post-norm:
//!
//! ```text
//! a   = LayerNorm(z + SelfAttention(z))
//! z'  = LayerNorm(a + W2 · gelu(W1 · a + b1) + b2)
//! ```
//!
//! `z⁽⁰⁾` is the input projection plus sinusoidal positions. All parameters
//! live in a flat, named list so the trainer, the optimizer and the checkpoint
//! format can treat them uniformly.
//!
//! Parameter count for input dim `d_in`, hidden `d_h`, feed-forward `d_ff`,
//! `K` layers and head width `N·L` (`L` codebooks):
//!
//! ```text
//! d_in·d_h + d_h + K·(4·d_h² + 2·d_h·d_ff + d_ff + 5·d_h) + d_h·N·L + N·L
//! ```

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Precision, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;

/// Epsilon inside every layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Epsilon of the per-frame standardization applied at the tap.
pub const TAP_EPS: f64 = 1e-12;
pub const MAX_LAYERS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Codebook size `N`.
    pub codebook_size: usize,
    /// Number of codebooks; the head emits `N` logits per codebook.
    pub num_codebooks: usize,
    pub seed: u64,
    pub positional_encoding: bool,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.layers > MAX_LAYERS {
            return bad(format!("layers = {} not in 1..={MAX_LAYERS}", self.layers));
        }
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden_dim {} not divisible by heads {}",
                self.hidden_dim, self.heads
            ));
        }
        if self.codebook_size < 2 {
            return bad(format!("codebook_size = {} < 2", self.codebook_size));
        }
        if self.input_dim == 0 || self.ff_dim == 0 || self.num_codebooks == 0 {
            return bad("encoder dimensions must be positive".into());
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.codebook_size * self.num_codebooks
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (di, dh, dff, k, n) = (
            self.input_dim,
            self.hidden_dim,
            self.ff_dim,
            self.layers,
            self.head_width(),
        );
        di * dh + dh + k * (4 * dh * dh + 2 * dh * dff + dff + 5 * dh) + dh * n + n
    }

    fn tensor_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let (dh, dff) = (self.hidden_dim, self.ff_dim);
        let mut specs = vec![
            ("input.weight".to_string(), vec![self.input_dim, dh], Init::Weight),
            ("input.bias".to_string(), vec![dh], Init::Zero),
        ];
        for l in 0..self.layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            for name in ["attn.query", "attn.key", "attn.value", "attn.output"] {
                specs.push((p(name), vec![dh, dh], Init::Weight));
            }
            specs.push((p("norm1.gain"), vec![dh], Init::One));
            specs.push((p("norm1.bias"), vec![dh], Init::Zero));
            specs.push((p("ff.weight1"), vec![dh, dff], Init::Weight));
            specs.push((p("ff.bias1"), vec![dff], Init::Zero));
            specs.push((p("ff.weight2"), vec![dff, dh], Init::Weight));
            specs.push((p("ff.bias2"), vec![dh], Init::Zero));
            specs.push((p("norm2.gain"), vec![dh], Init::One));
            specs.push((p("norm2.bias"), vec![dh], Init::Zero));
        }
        specs.push(("head.weight".into(), vec![dh, self.head_width()], Init::Weight));
        specs.push(("head.bias".into(), vec![self.head_width()], Init::Zero));
        specs
    }
}

#[derive(Clone, Copy)]
enum Init {
    Weight,
    Zero,
    One,
}

/// One named parameter tensor (rank 1 or 2), row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        ParamTensor {
            name: name.into(),
            shape,
            data,
        }
    }

    pub fn zeros_like(&self) -> Self {
        ParamTensor::new(self.name.clone(), self.shape.clone(), vec![0.0; self.data.len()])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rank-1 tensors become `1 x n` rows.
    pub fn to_matrix(&self) -> Matrix {
        let (r, c) = match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => panic!("unsupported tensor rank {}", other.len()),
        };
        Matrix::from_vec(r, c, self.data.clone()).unwrap()
    }
}

/// Encoder parameters θ.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    tensors: Vec<ParamTensor>,
}

/// Seeded initialization: weights `N(0, 1/fan_in)`, gains 1, biases 0.
pub fn init_encoder(cfg: &EncoderConfig) -> Result<EncoderParams> {
    cfg.validate()?;
    let mut rng = rng::rng_from(rng::mix(&[cfg.seed, rng::Role::Init as u64]));
    let tensors = cfg
        .tensor_specs()
        .into_iter()
        .map(|(name, shape, init)| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zero => vec![0.0; n],
                Init::One => vec![1.0; n],
                Init::Weight => {
                    let scale = 1.0 / (shape[0] as f64).sqrt();
                    (0..n)
                        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                }
            };
            ParamTensor::new(name, shape, data)
        })
        .collect();
    Ok(EncoderParams {
        config: cfg.clone(),
        tensors,
    })
}

impl EncoderParams {
    /// Rebuilds parameters from tensors, checking names and shapes against
    /// the config.
    pub fn from_tensors(cfg: &EncoderConfig, tensors: Vec<ParamTensor>) -> Result<Self> {
        cfg.validate()?;
        let specs = cfg.tensor_specs();
        if specs.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                tensors.len()
            )));
        }
        for ((name, shape, _), t) in specs.iter().zip(&tensors) {
            if name != &t.name || shape != &t.shape {
                return Err(Error::Shape(format!(
                    "tensor {}: expected {name} {shape:?}, found {} {:?}",
                    t.name, t.name, t.shape
                )));
            }
        }
        Ok(EncoderParams {
            config: cfg.clone(),
            tensors,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(ParamTensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Places every parameter on `tape` (as leaves when `trainable`).
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.to_matrix())
                } else {
                    tape.constant(t.to_matrix())
                }
            })
            .collect();
        ParamVars { vars }
    }
}

/// Tape handles of the parameters, index-aligned with
/// [`EncoderParams::tensors`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn layer(&self, l: usize) -> LayerVars<'_> {
        LayerVars(&self.vars[2 + 12 * l..2 + 12 * (l + 1)])
    }

    fn head(&self) -> (Var, Var) {
        let n = self.vars.len();
        (self.vars[n - 2], self.vars[n - 1])
    }
}

struct LayerVars<'a>(&'a [Var]);

impl LayerVars<'_> {
    fn q(&self) -> Var {
        self.0[0]
    }
    fn k(&self) -> Var {
        self.0[1]
    }
    fn v(&self) -> Var {
        self.0[2]
    }
    fn o(&self) -> Var {
        self.0[3]
    }
    fn norm1(&self) -> (Var, Var) {
        (self.0[4], self.0[5])
    }
    fn ff(&self) -> (Var, Var, Var, Var) {
        (self.0[6], self.0[7], self.0[8], self.0[9])
    }
    fn norm2(&self) -> (Var, Var) {
        (self.0[10], self.0[11])
    }
}

/// Sinusoidal position table, `frames x dim`.
pub fn positional_encoding(frames: usize, dim: usize) -> Matrix {
    Matrix::from_fn(frames, dim, |t, j| {
        let i = (j / 2) as f64;
        let angle = t as f64 / 10_000f64.powf(2.0 * i / dim as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Tape nodes produced by [`forward_on_tape`].
#[derive(Clone, Debug)]
pub struct TapeTrace {
    /// `z⁽¹⁾ … z⁽ᵐ⁾` for the layers that were run.
    pub layers: Vec<Var>,
    /// Present only when every layer ran.
    pub logits: Option<Var>,
}

fn layer_norm(tape: &mut Tape, x: Var, (gain, bias): (Var, Var)) -> Var {
    let s = tape.standardize_rows(x, LAYER_NORM_EPS);
    let g = tape.mul_row(s, gain);
    tape.add_row(g, bias)
}

fn self_attention(tape: &mut Tape, z: Var, lv: &LayerVars<'_>, heads: usize, dh: usize) -> Var {
    let q = tape.matmul(z, lv.q());
    let k = tape.matmul(z, lv.k());
    let v = tape.matmul(z, lv.v());
    let dk = dh / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let outs: Vec<Var> = (0..heads)
        .map(|h| {
            let qh = tape.slice_cols(q, h * dk, dk);
            let kh = tape.slice_cols(k, h * dk, dk);
            let vh = tape.slice_cols(v, h * dk, dk);
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            tape.matmul(attn, vh)
        })
        .collect();
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
    tape.matmul(cat, lv.o())
}

/// Records the forward pass on `tape`. With `upto = Some(m)` only layers
/// `1..=m` run and no logits are produced.
pub fn forward_on_tape(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    vars: &ParamVars,
    x: Var,
    upto: Option<usize>,
) -> Result<TapeTrace> {
    let (frames, dim) = tape.value(x).shape();
    if dim != cfg.input_dim {
        return Err(Error::Shape(format!(
            "input frames have dimension {dim}, encoder expects {}",
            cfg.input_dim
        )));
    }
    if frames == 0 {
        return Err(Error::Length("encoder input has no frames".into()));
    }
    let depth = upto.unwrap_or(cfg.layers);
    if depth == 0 || depth > cfg.layers {
        return Err(Error::Parameter(format!("layer {depth} out of 1..={}", cfg.layers)));
    }
    let proj = tape.matmul(x, vars.vars[0]);
    let mut z = tape.add_row(proj, vars.vars[1]);
    if cfg.positional_encoding {
        let pe = tape.constant(positional_encoding(frames, cfg.hidden_dim));
        z = tape.add(z, pe);
    }
    let mut layers = Vec::with_capacity(depth);
    for l in 0..depth {
        let lv = vars.layer(l);
        let attn = self_attention(tape, z, &lv, cfg.heads, cfg.hidden_dim);
        let res1 = tape.add(z, attn);
        let a = layer_norm(tape, res1, lv.norm1());
        let (w1, b1, w2, b2) = lv.ff();
        let h = tape.matmul(a, w1);
        let h = tape.add_row(h, b1);
        let h = tape.gelu(h);
        let f = tape.matmul(h, w2);
        let f = tape.add_row(f, b2);
        let res2 = tape.add(a, f);
        z = layer_norm(tape, res2, lv.norm2());
        layers.push(z);
    }
    let logits = if depth == cfg.layers {
        let (hw, hb) = vars.head();
        let o = tape.matmul(z, hw);
        Some(tape.add_row(o, hb))
    } else {
        None
    };
    Ok(TapeTrace { layers, logits })
}

/// Per-frame standardization of a tapped representation, on the tape.
pub fn tap_on_tape(tape: &mut Tape, z: Var) -> Var {
    tape.standardize_rows(z, TAP_EPS)
}

/// Materialized activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `z⁽¹⁾ … z⁽ᴷ⁾`, each `T x d_h`.
    pub layers: Vec<Matrix>,
    /// `T x N·L`.
    pub logits: Matrix,
}

/// Forward pass without gradient bookkeeping.
pub fn forward(params: &EncoderParams, x: &Matrix) -> Result<ForwardTrace> {
    let mut tape = Tape::with_precision(Precision::F64);
    let vars = params.register(&mut tape, false);
    let xv = tape.constant(x.clone());
    let trace = forward_on_tape(&mut tape, &params.config, &vars, xv, None)?;
    let layers: Vec<Matrix> = trace.layers.iter().map(|&v| tape.value(v).clone()).collect();
    let logits = tape.value(trace.logits.expect("full depth")).clone();
    if !logits.is_finite() || layers.iter().any(|m| !m.is_finite()) {
        return Err(Error::Numeric("encoder produced non-finite activations".into()));
    }
    Ok(ForwardTrace { layers, logits })
}

/// Standardized layer-`k` representation (1-based `k`).
pub fn tap(trace: &ForwardTrace, k: usize) -> Result<Matrix> {
    if k == 0 || k > trace.layers.len() {
        return Err(Error::Parameter(format!(
            "tap layer {k} out of 1..={}",
            trace.layers.len()
        )));
    }
    let mut tape = Tape::new();
    let z = tape.constant(trace.layers[k - 1].clone());
    let s = tap_on_tape(&mut tape, z);
    Ok(tape.value(s).clone())
}

/// `max(1, round(0.7·K))` with exact halves rounded down, so `K = 5` gives 3.
pub fn default_k(layers: usize) -> usize {
    ((7 * layers + 4) / 10).max(1)
}
