//! Masked cross-entropy and the two training objectives.
//!
//! Dataflow for one sequence `x` with mask `M`:
//!
//! * anchoring labels `y(x)`: nearest-neighbour quantization of the raw,
//!   unmasked input (θ-independent, cached by the caller);
//! * enhanced labels `y⁽ᵏ⁾(θ; x)`: Gumbel-softmax quantization of the
//!   standardized layer-`k` output of the *unmasked* input;
//! * predictions: logits of the *masked* input `x̃`.
//!
//! `G` is the masked cross-entropy against anchoring labels and `F` the one
//! against enhanced labels; each is summed over `M` and averaged over the
//! batch. The penalty objective is `w1·F + w2·G`; its gradient is assembled as
//! `w1·∇F + w2·∇G` from two separate backward sweeps.

use rayon::prelude::*;

use crate::autodiff::{Precision, Tape, Var};
use crate::encoder::{self, EncoderParams, ParamTensor};
use crate::error::{Error, Result};
use crate::masking::{self, MaskPolicy, MaskSpec};
use crate::matrix::Matrix;
use crate::quantizer::{self, GumbelNoise, HardLabels, QuantizerState, SoftLabels};

pub const DEFAULT_W1: f64 = 0.1;
pub const DEFAULT_W2: f64 = 2.4;

/// Upper/lower loss weights `w1`, `w2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PenaltyWeights {
    w1: f64,
    w2: f64,
}

impl Default for PenaltyWeights {
    fn default() -> Self {
        PenaltyWeights {
            w1: DEFAULT_W1,
            w2: DEFAULT_W2,
        }
    }
}

impl PenaltyWeights {
    pub fn new(w1: f64, w2: f64) -> Result<Self> {
        if !(w1 >= 0.0 && w2 >= 0.0) || !(w1 + w2 > 0.0) || !(w1 + w2).is_finite() {
            return Err(Error::Parameter(format!(
                "penalty weights need w1, w2 >= 0 and w1 + w2 > 0, got ({w1}, {w2})"
            )));
        }
        Ok(PenaltyWeights { w1, w2 })
    }

    pub fn w1(&self) -> f64 {
        self.w1
    }

    pub fn w2(&self) -> f64 {
        self.w2
    }

    /// Penalty constant `w2 / w1`, undefined when `w1 = 0`.
    pub fn gamma(&self) -> Option<f64> {
        (self.w1 > 0.0).then(|| self.w2 / self.w1)
    }
}

/// Label representation accepted by [`masked_ce`].
#[derive(Clone, Copy, Debug)]
pub enum Labels<'a> {
    Hard(&'a HardLabels),
    Soft(&'a SoftLabels),
}

/// `-Σ_{t∈M} y_tᵀ log softmax(o_t)` over the masked frames (rows) of
/// `logits`.
pub fn masked_ce(logits: &Matrix, labels: Labels<'_>, mask: &MaskSpec) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::Contract("masked cross-entropy over an empty mask".into()));
    }
    let y = match labels {
        Labels::Hard(h) => h.one_hot(),
        Labels::Soft(s) => s.rows().clone(),
    };
    if y.shape() != logits.shape() || mask.frames() != logits.rows() {
        return Err(Error::Shape(format!(
            "logits {:?}, labels {:?}, mask over {} frames",
            logits.shape(),
            y.shape(),
            mask.frames()
        )));
    }
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let yv = tape.constant(y);
    let ce = tape.masked_ce(l, yv, mask.indices());
    Ok(tape.scalar(ce))
}

/// One sequence with everything stochastic already drawn.
#[derive(Clone, Debug)]
pub struct PreparedSequence {
    /// Unmasked normalized input `x`, `T x d_in`.
    pub input: Matrix,
    /// Masked input `x̃`.
    pub masked_input: Matrix,
    pub mask: MaskSpec,
    /// Anchoring labels, one set per codebook.
    pub anchors: Vec<HardLabels>,
    /// Gumbel noise per codebook; `None` disables noise.
    pub gumbel: Vec<Option<GumbelNoise>>,
}

/// Seeds for the per-sequence draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceSeeds {
    pub mask: u64,
    pub noise: u64,
    /// `None` disables Gumbel noise.
    pub gumbel: Option<u64>,
}

impl PreparedSequence {
    /// Draws the mask, the noise fill and the Gumbel noise for `input`.
    /// `anchors` are computed from `input` when not supplied.
    pub fn prepare(
        input: Matrix,
        anchors: Option<Vec<HardLabels>>,
        quant: &QuantizerState,
        policy: &MaskPolicy,
        seeds: SequenceSeeds,
    ) -> Result<Self> {
        let frames = input.rows();
        let anchors = match anchors {
            Some(a) => a,
            None => (0..quant.num_codebooks())
                .map(|l| quant.anchor_labels(l, &input))
                .collect::<Result<_>>()?,
        };
        let mask = masking::sample_mask(policy, frames, seeds.mask)?;
        let masked_input = masking::apply_mask(&input, &mask, policy, seeds.noise)?;
        let gumbel = (0..quant.num_codebooks())
            .map(|l| {
                seeds.gumbel.map(|s| {
                    quantizer::sample_gumbel(crate::rng::mix(&[s, l as u64]), frames, quant.codebook_size())
                })
            })
            .collect();
        Ok(PreparedSequence {
            input,
            masked_input,
            mask,
            anchors,
            gumbel,
        })
    }
}

/// Which objectives a step optimizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Objective {
    /// Penalty objective `w1·F + w2·G`.
    #[default]
    Bilevel,
    /// `G` only; the enhanced-label path is never built.
    LowerOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub objective: Objective,
    pub weights: PenaltyWeights,
    /// Tap layer, 1-based.
    pub k: usize,
    pub temperature: f64,
    /// Treat enhanced labels as constants (ablation).
    pub stop_label_grad: bool,
    /// Detach the logits inside `F` so only the label path carries gradient
    /// (test harness).
    pub detach_prediction: bool,
    pub precision: Precision,
}

impl ObjectiveConfig {
    pub fn new(weights: PenaltyWeights, k: usize, temperature: f64) -> Self {
        ObjectiveConfig {
            objective: Objective::Bilevel,
            weights,
            k,
            temperature,
            stop_label_grad: false,
            detach_prediction: false,
            precision: Precision::F64,
        }
    }
}

/// Loss values and masked accuracies for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub f_value: f64,
    pub g_value: f64,
    pub combined: f64,
    pub masked_count: usize,
    pub mask_acc_anchor: f64,
    pub mask_acc_enhanced: f64,
}

/// Per-sequence labels and predictions (codebook 0), for diagnostics.
#[derive(Clone, Debug)]
pub struct SequenceDiagnostics {
    pub mask: Vec<usize>,
    pub anchor: Vec<usize>,
    /// Argmax of the enhanced labels, every frame; empty for `LowerOnly`.
    pub enhanced: Vec<usize>,
    pub predicted: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GradRequest {
    pub upper: bool,
    pub lower: bool,
}

impl GradRequest {
    pub const NONE: GradRequest = GradRequest {
        upper: false,
        lower: false,
    };
    pub const BOTH: GradRequest = GradRequest {
        upper: true,
        lower: true,
    };
}

/// Result of [`evaluate`].
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub breakdown: LossBreakdown,
    /// `∇F`, aligned with the parameter tensors.
    pub grad_upper: Option<Vec<ParamTensor>>,
    /// `∇G`.
    pub grad_lower: Option<Vec<ParamTensor>>,
    pub diagnostics: Vec<SequenceDiagnostics>,
}

impl Evaluation {
    /// `w1·∇F + w2·∇G` (`∇G` alone for [`Objective::LowerOnly`]).
    pub fn combined_grad(&self, cfg: &ObjectiveConfig) -> Result<Vec<ParamTensor>> {
        let lower = self
            .grad_lower
            .as_ref()
            .ok_or_else(|| Error::Contract("lower-level gradient was not requested".into()))?;
        let w2 = cfg.weights.w2();
        if cfg.objective == Objective::LowerOnly {
            return Ok(lower.iter().map(|g| scaled(g, 1.0)).collect());
        }
        let w1 = cfg.weights.w1();
        if w1 == 0.0 {
            return Ok(lower.iter().map(|g| scaled(g, w2)).collect());
        }
        let upper = self
            .grad_upper
            .as_ref()
            .ok_or_else(|| Error::Contract("upper-level gradient was not requested".into()))?;
        Ok(upper
            .iter()
            .zip(lower)
            .map(|(u, l)| {
                let data = u.data.iter().zip(&l.data).map(|(a, b)| w1 * a + w2 * b).collect();
                ParamTensor::new(u.name.clone(), u.shape.clone(), data)
            })
            .collect())
    }
}

fn scaled(g: &ParamTensor, s: f64) -> ParamTensor {
    ParamTensor::new(g.name.clone(), g.shape.clone(), g.data.iter().map(|v| s * v).collect())
}

struct SequenceResult {
    f: f64,
    g: f64,
    grad_f: Option<Vec<Matrix>>,
    grad_g: Option<Vec<Matrix>>,
    diag: SequenceDiagnostics,
}

fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows()).map(|t| m.row_argmax(t)).collect()
}

fn collect_grads(tape: &Tape, loss: Var, vars: &[Var]) -> Vec<Matrix> {
    let mut grads = tape.backward(loss);
    vars.iter()
        .map(|&v| {
            grads.take(v).unwrap_or_else(|| {
                let (r, c) = tape.value(v).shape();
                Matrix::zeros(r, c)
            })
        })
        .collect()
}

/// Mean of per-codebook losses as a tape node.
fn mean_node(tape: &mut Tape, parts: &[Var]) -> Var {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = tape.add(acc, p);
    }
    if parts.len() == 1 {
        acc
    } else {
        tape.scale(acc, 1.0 / parts.len() as f64)
    }
}

fn evaluate_sequence(
    params: &EncoderParams,
    quant: &QuantizerState,
    seq: &PreparedSequence,
    cfg: &ObjectiveConfig,
    want: GradRequest,
) -> Result<SequenceResult> {
    let ecfg = params.config();
    let codes = quant.codebook_size();
    let books = quant.num_codebooks();
    if seq.mask.is_empty() {
        return Err(Error::Contract("training sequence has an empty mask".into()));
    }
    if seq.anchors.len() != books || seq.gumbel.len() != books {
        return Err(Error::Shape("per-codebook labels/noise count mismatch".into()));
    }
    let bilevel = cfg.objective == Objective::Bilevel;
    let want_f = want.upper && bilevel;

    let mut tape = Tape::with_precision(cfg.precision);
    let vars = params.register(&mut tape, want.upper || want.lower);
    let masked = tape.constant(seq.masked_input.clone());
    let logits = encoder::forward_on_tape(&mut tape, ecfg, &vars, masked, None)?
        .logits
        .expect("full-depth forward");
    let rows = seq.mask.indices();
    let per_book = |tape: &mut Tape, l: usize| {
        if books == 1 {
            logits
        } else {
            tape.slice_cols(logits, l * codes, codes)
        }
    };

    let mut g_parts = Vec::with_capacity(books);
    for l in 0..books {
        let lg = per_book(&mut tape, l);
        let y = tape.constant(seq.anchors[l].one_hot());
        g_parts.push(tape.masked_ce(lg, y, rows));
    }
    let g_node = mean_node(&mut tape, &g_parts);

    let mut enhanced = Vec::new();
    let f_node = if bilevel {
        let x = tape.constant(seq.input.clone());
        let trace = encoder::forward_on_tape(&mut tape, ecfg, &vars, x, Some(cfg.k))?;
        let z = encoder::tap_on_tape(&mut tape, trace.layers[cfg.k - 1]);
        let mut f_parts = Vec::with_capacity(books);
        for l in 0..books {
            let mut y = quant.enhanced_labels_on_tape(&mut tape, l, z, cfg.temperature, seq.gumbel[l].as_ref())?;
            if l == 0 {
                enhanced = argmax_rows(tape.value(y));
            }
            if cfg.stop_label_grad {
                y = tape.stop_grad(y);
            }
            let mut lg = per_book(&mut tape, l);
            if cfg.detach_prediction {
                lg = tape.stop_grad(lg);
            }
            f_parts.push(tape.masked_ce(lg, y, rows));
        }
        Some(mean_node(&mut tape, &f_parts))
    } else {
        None
    };

    let logits_value = tape.value(logits);
    if !logits_value.is_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let predicted = argmax_rows(&if books == 1 {
        logits_value.clone()
    } else {
        Matrix::from_fn(logits_value.rows(), codes, |t, n| logits_value.get(t, n))
    });

    let grad_f = match f_node {
        Some(f) if want_f => Some(collect_grads(&tape, f, vars.vars())),
        _ => None,
    };
    let grad_g = want.lower.then(|| collect_grads(&tape, g_node, vars.vars()));
    Ok(SequenceResult {
        f: f_node.map_or(f64::NAN, |f| tape.scalar(f)),
        g: tape.scalar(g_node),
        grad_f,
        grad_g,
        diag: SequenceDiagnostics {
            mask: rows.to_vec(),
            anchor: seq.anchors[0].indices().to_vec(),
            enhanced,
            predicted,
        },
    })
}

fn mean_grads(params: &EncoderParams, per_seq: Vec<Vec<Matrix>>) -> Vec<ParamTensor> {
    let scale = 1.0 / per_seq.len() as f64;
    let mut acc: Vec<ParamTensor> = params.tensors().iter().map(ParamTensor::zeros_like).collect();
    // fixed sequence order keeps the reduction bit-stable
    for grads in per_seq {
        for (a, g) in acc.iter_mut().zip(grads) {
            for (x, y) in a.data.iter_mut().zip(g.as_slice()) {
                *x += y;
            }
        }
    }
    for a in &mut acc {
        a.data.iter_mut().for_each(|v| *v *= scale);
    }
    acc
}

/// Evaluates `F`, `G`, their combination and (optionally) their gradients
/// over `batch`. Sequences are processed in parallel and reduced in order.
pub fn evaluate(
    params: &EncoderParams,
    quant: &QuantizerState,
    batch: &[PreparedSequence],
    cfg: &ObjectiveConfig,
    want: GradRequest,
) -> Result<Evaluation> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let ecfg = params.config();
    if cfg.k == 0 || cfg.k > ecfg.layers {
        return Err(Error::Parameter(format!("tap layer k = {} not in 1..={}", cfg.k, ecfg.layers)));
    }
    if !(cfg.temperature > 0.0) {
        return Err(Error::Parameter("temperature must be > 0".into()));
    }
    if ecfg.codebook_size != quant.codebook_size() || ecfg.num_codebooks != quant.num_codebooks() {
        return Err(Error::Shape("encoder head does not match the quantizer".into()));
    }
    let results: Vec<SequenceResult> = batch
        .par_iter()
        .map(|seq| evaluate_sequence(params, quant, seq, cfg, want))
        .collect::<Result<_>>()?;

    let b = results.len() as f64;
    let f_value = results.iter().map(|r| r.f).sum::<f64>() / b;
    let g_value = results.iter().map(|r| r.g).sum::<f64>() / b;
    let combined = match cfg.objective {
        Objective::Bilevel => cfg.weights.w1() * f_value + cfg.weights.w2() * g_value,
        Objective::LowerOnly => g_value,
    };
    let mut masked_count = 0;
    let (mut hit_anchor, mut hit_enh) = (0usize, 0usize);
    for r in &results {
        for &t in &r.diag.mask {
            masked_count += 1;
            hit_anchor += usize::from(r.diag.predicted[t] == r.diag.anchor[t]);
            if let Some(&e) = r.diag.enhanced.get(t) {
                hit_enh += usize::from(r.diag.predicted[t] == e);
            }
        }
    }
    let mask_acc_enhanced = if cfg.objective == Objective::Bilevel {
        hit_enh as f64 / masked_count as f64
    } else {
        f64::NAN
    };
    let breakdown = LossBreakdown {
        f_value,
        g_value,
        combined,
        masked_count,
        mask_acc_anchor: hit_anchor as f64 / masked_count as f64,
        mask_acc_enhanced,
    };

    let mut grad_f = Vec::new();
    let mut grad_g = Vec::new();
    let mut diagnostics = Vec::with_capacity(results.len());
    for r in results {
        if let Some(g) = r.grad_f {
            grad_f.push(g);
        }
        if let Some(g) = r.grad_g {
            grad_g.push(g);
        }
        diagnostics.push(r.diag);
    }
    Ok(Evaluation {
        breakdown,
        grad_upper: (!grad_f.is_empty()).then(|| mean_grads(params, grad_f)),
        grad_lower: (!grad_g.is_empty()).then(|| mean_grads(params, grad_g)),
        diagnostics,
    })
}

/// `G(θ)`: batch mean of masked CE against anchoring labels.
pub fn lower_loss(
    params: &EncoderParams,
    quant: &QuantizerState,
    batch: &[PreparedSequence],
    cfg: &ObjectiveConfig,
) -> Result<f64> {
    let cfg = ObjectiveConfig {
        objective: Objective::LowerOnly,
        ..cfg.clone()
    };
    Ok(evaluate(params, quant, batch, &cfg, GradRequest::NONE)?.breakdown.g_value)
}

/// `F(θ)`: batch mean of masked CE against enhanced labels.
pub fn upper_loss(
    params: &EncoderParams,
    quant: &QuantizerState,
    batch: &[PreparedSequence],
    cfg: &ObjectiveConfig,
) -> Result<f64> {
    let cfg = ObjectiveConfig {
        objective: Objective::Bilevel,
        ..cfg.clone()
    };
    Ok(evaluate(params, quant, batch, &cfg, GradRequest::NONE)?.breakdown.f_value)
}

/// `w1·F + w2·G` with its breakdown.
pub fn combined_loss(
    params: &EncoderParams,
    quant: &QuantizerState,
    batch: &[PreparedSequence],
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    Ok(evaluate(params, quant, batch, cfg, GradRequest::NONE)?.breakdown)
}
