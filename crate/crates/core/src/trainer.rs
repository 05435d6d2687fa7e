//! Single-loop penalty training: label generation, forward, combined
//! gradient, parameter update, checkpoints and metrics.

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderConfig, EncoderParams, ParamTensor};
use crate::error::{Error, Result};
use crate::features::{self, read_u32, FeatureSequence};
use crate::masking::MaskPolicy;
use crate::matrix::Matrix;
use crate::objectives::{self, GradRequest, Objective, ObjectiveConfig, PreparedSequence, SequenceSeeds};
use crate::quantizer::{self, HardLabels, QuantizerSpec, QuantizerState};
use crate::rng::{self, Role};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    #[default]
    AdamW,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adamw" => Ok(OptimizerKind::AdamW),
            other => Err(Error::Config(format!("unknown optimizer '{other}' (sgd | adamw)"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::AdamW => "adamw",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSettings {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            kind: OptimizerKind::AdamW,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 20,
            clip_norm: None,
        }
    }
}

/// Linear ramp from 0 to `lr` over `warmup_steps`, then constant.
pub fn lr_schedule(step: u64, opt: &OptimizerSettings) -> f64 {
    if opt.warmup_steps == 0 || step >= opt.warmup_steps {
        opt.lr
    } else {
        opt.lr * step as f64 / opt.warmup_steps as f64
    }
}

/// Base seeds, one per stochastic role.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub data: u64,
    pub mask: u64,
    pub gumbel: u64,
    pub init: u64,
    pub quantizer: u64,
}

impl Seeds {
    pub fn all(base: u64) -> Self {
        Seeds {
            data: rng::mix(&[base, Role::Data as u64]),
            mask: rng::mix(&[base, Role::Mask as u64]),
            gumbel: rng::mix(&[base, Role::Gumbel as u64]),
            init: rng::mix(&[base, Role::Init as u64]),
            quantizer: rng::mix(&[base, Role::Quantizer as u64]),
        }
    }
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            data: 1,
            mask: 2,
            gumbel: 3,
            init: 4,
            quantizer: 5,
        }
    }
}

/// Encoder and quantizer shapes; the input width comes from the data.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub positional_encoding: bool,
    pub codebook_size: usize,
    pub codebook_dim: usize,
    pub num_codebooks: usize,
    pub codebook_l2_normalize: bool,
    pub stack_factor: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 5,
            hidden_dim: 64,
            heads: 4,
            ff_dim: 128,
            positional_encoding: true,
            codebook_size: 8,
            codebook_dim: 16,
            num_codebooks: 1,
            codebook_l2_normalize: false,
            stack_factor: 2,
        }
    }
}

impl ModelConfig {
    pub fn encoder_config(&self, input_dim: usize, seed: u64) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            input_dim,
            hidden_dim: self.hidden_dim,
            heads: self.heads,
            ff_dim: self.ff_dim,
            codebook_size: self.codebook_size,
            num_codebooks: self.num_codebooks,
            seed,
            positional_encoding: self.positional_encoding,
        }
    }

    pub fn quantizer_spec(&self, input_dim: usize, seed: u64) -> QuantizerSpec {
        QuantizerSpec {
            seed,
            num_codebooks: self.num_codebooks,
            codebook_size: self.codebook_size,
            codebook_dim: self.codebook_dim,
            input_dim,
            hidden_dim: self.hidden_dim,
            l2_normalize: self.codebook_l2_normalize,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSettings,
    pub objective: ObjectiveConfig,
    /// Draw Gumbel noise for the enhanced labels.
    pub gumbel_noise: bool,
    pub mask: MaskPolicy,
    pub model: ModelConfig,
    pub seeds: Seeds,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        TrainConfig {
            epochs: 10,
            batch_size: 4,
            optimizer: OptimizerSettings::default(),
            objective: ObjectiveConfig::new(Default::default(), encoder::default_k(model.layers), quantizer::DEFAULT_TEMPERATURE),
            gumbel_noise: true,
            mask: MaskPolicy {
                stack_factor: model.stack_factor,
                ..MaskPolicy::default()
            },
            model,
            seeds: Seeds::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !o.lr.is_finite() {
            return bad(format!("lr must be > 0, got {}", o.lr));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad("adam betas must be in [0, 1) and eps > 0".into());
        }
        if !(o.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0".into());
        }
        if let Some(c) = o.clip_norm {
            if !(c > 0.0) {
                return bad("clip_norm must be > 0".into());
            }
        }
        let k = self.objective.k;
        if k == 0 || k > self.model.layers {
            return bad(format!("k = {k} not in 1..={}", self.model.layers));
        }
        if !(self.objective.temperature > 0.0) {
            return bad("tau must be > 0".into());
        }
        if self.mask.stack_factor != self.model.stack_factor {
            return bad("mask policy and model disagree on stack_factor".into());
        }
        self.mask.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.model.codebook_size == 0 || self.model.codebook_dim == 0 || self.model.num_codebooks == 0 {
            return bad("codebook size, dimension and count must be >= 1".into());
        }
        self.model
            .encoder_config(1, 0)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }
}

/// Normalized training sequences with their cached anchoring labels.
#[derive(Clone, Debug)]
pub struct TrainData {
    sequences: Vec<Matrix>,
    anchors: Vec<Vec<HardLabels>>,
}

impl TrainData {
    /// Stacks and normalizes each sequence, then caches anchoring labels.
    pub fn from_features(raw: &[FeatureSequence], stack_factor: usize, quant: &QuantizerState) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Input("dataset is empty".into()));
        }
        let sequences = raw
            .iter()
            .map(|f| {
                let s = features::stack_frames(f, stack_factor)?;
                Ok(features::normalize(&s)?.into_data())
            })
            .collect::<Result<Vec<_>>>()?;
        TrainData::new(sequences, quant)
    }

    /// Uses already normalized sequences as they are.
    pub fn new(sequences: Vec<Matrix>, quant: &QuantizerState) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Input("dataset is empty".into()));
        }
        let dim = sequences[0].cols();
        if sequences.iter().any(|s| s.cols() != dim || s.rows() == 0) {
            return Err(Error::Input("sequences must share a dimension and be non-empty".into()));
        }
        let anchors = sequences
            .iter()
            .map(|x| (0..quant.num_codebooks()).map(|l| quant.anchor_labels(l, x)).collect())
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainData { sequences, anchors })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.sequences[0].cols()
    }

    pub fn sequences(&self) -> &[Matrix] {
        &self.sequences
    }

    pub fn anchors(&self) -> &[Vec<HardLabels>] {
        &self.anchors
    }

    /// Utilization of the cached codebook-0 anchoring labels.
    pub fn anchor_utilization(&self, num_codes: usize) -> f64 {
        let all: Vec<usize> = self.anchors.iter().flat_map(|a| a[0].indices().iter().copied()).collect();
        quantizer::codebook_utilization(&all, num_codes)
    }
}

/// One metrics row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss_total: f64,
    #[serde(rename = "loss_F")]
    pub loss_f: f64,
    #[serde(rename = "loss_G")]
    pub loss_g: f64,
    pub mask_acc_anchor: f64,
    pub mask_acc_enh: f64,
    pub codebook_util_anchor: f64,
    pub codebook_util_enh: f64,
    pub label_agreement: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "step,epoch,loss_total,loss_F,loss_G,mask_acc_anchor,mask_acc_enh,codebook_util_anchor,codebook_util_enh,label_agreement,grad_norm,lr";

/// First/second moments (AdamW only) and the update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<ParamTensor>,
    pub second: Vec<ParamTensor>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &EncoderParams) -> Self {
        let zeros = || params.tensors().iter().map(ParamTensor::zeros_like).collect();
        match kind {
            OptimizerKind::Sgd => OptimizerState {
                step: 0,
                first: Vec::new(),
                second: Vec::new(),
            },
            OptimizerKind::AdamW => OptimizerState {
                step: 0,
                first: zeros(),
                second: zeros(),
            },
        }
    }
}

pub fn global_norm(grads: &[ParamTensor]) -> f64 {
    grads.iter().flat_map(|g| g.data.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Applies one update with `grads` and returns the learning rate used.
pub fn apply_update(
    params: &mut EncoderParams,
    state: &mut OptimizerState,
    grads: &[ParamTensor],
    opt: &OptimizerSettings,
) -> Result<f64> {
    if let Some(bad) = grads.iter().find(|g| g.data.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric(format!("non-finite gradient in tensor '{}'", bad.name)));
    }
    let clip = match opt.clip_norm {
        Some(c) => {
            let n = global_norm(grads);
            if n > c {
                c / n
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let lr = lr_schedule(state.step, opt);
    let tensors = params.tensors_mut();
    match opt.kind {
        OptimizerKind::Sgd => {
            for (p, g) in tensors.iter_mut().zip(grads) {
                for (w, &d) in p.data.iter_mut().zip(&g.data) {
                    let d = if clip == 1.0 { d } else { d * clip };
                    *w -= lr * (d + opt.weight_decay * *w);
                }
            }
        }
        OptimizerKind::AdamW => {
            let t = state.step as i32;
            let c1 = 1.0 - opt.beta1.powi(t);
            let c2 = 1.0 - opt.beta2.powi(t);
            for (((p, g), m), v) in tensors.iter_mut().zip(grads).zip(&mut state.first).zip(&mut state.second) {
                for i in 0..p.data.len() {
                    let d = g.data[i] * clip;
                    m.data[i] = opt.beta1 * m.data[i] + (1.0 - opt.beta1) * d;
                    v.data[i] = opt.beta2 * v.data[i] + (1.0 - opt.beta2) * d * d;
                    let mhat = m.data[i] / c1;
                    let vhat = v.data[i] / c2;
                    p.data[i] *= 1.0 - lr * opt.weight_decay;
                    p.data[i] -= lr * mhat / (vhat.sqrt() + opt.eps);
                }
            }
        }
    }
    Ok(lr)
}

fn snap_f32(t: &mut ParamTensor) {
    t.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
}

/// Parameters, optimizer state and progress as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<ParamTensor>,
    pub optimizer: OptimizerState,
    /// Completed epochs.
    pub epoch: u64,
}

const CKPT_MAGIC: &[u8; 8] = b"BIRQCKPT";
const CKPT_VERSION: u32 = 1;

/// Counters travel as four exact 16-bit chunks in an f32 tensor.
fn counter_tensor(name: &str, v: u64) -> ParamTensor {
    let data = (0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f64).collect();
    ParamTensor::new(name, vec![4], data)
}

fn counter_value(t: &ParamTensor) -> Result<u64> {
    if t.shape != [4] || t.data.iter().any(|&c| !(0.0..65536.0).contains(&c) || c.fract() != 0.0) {
        return Err(Error::Format(format!("malformed counter tensor '{}'", t.name)));
    }
    Ok(t.data.iter().enumerate().fold(0u64, |acc, (i, &c)| acc | ((c as u64) << (16 * i))))
}

fn encode_tensor(out: &mut Vec<u8>, t: &ParamTensor) -> Result<()> {
    let name = t.name.as_bytes();
    let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {}", t.name)))?;
    let rank = u8::try_from(t.shape.len()).map_err(|_| Error::Format(format!("tensor rank too large: {}", t.name)))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name);
    out.push(rank);
    for &d in &t.shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in &t.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut tensors: Vec<ParamTensor> = ckpt.params.clone();
    for m in &ckpt.optimizer.first {
        tensors.push(ParamTensor::new(format!("opt.m.{}", m.name), m.shape.clone(), m.data.clone()));
    }
    for v in &ckpt.optimizer.second {
        tensors.push(ParamTensor::new(format!("opt.v.{}", v.name), v.shape.clone(), v.data.clone()));
    }
    tensors.push(counter_tensor("opt.step", ckpt.optimizer.step));
    tensors.push(counter_tensor("opt.epoch", ckpt.epoch));
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in &tensors {
        encode_tensor(&mut out, t)?;
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != CKPT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = read_u32(bytes, 8).unwrap_or(0);
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(bytes, 12).unwrap_or(0) as usize;
    let mut cur = Cursor { bytes, pos: 16 };
    let mut params = Vec::new();
    let mut first = Vec::new();
    let mut second = Vec::new();
    let (mut step, mut epoch) = (None, None);
    for _ in 0..count {
        let len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
            shape.push(usize::try_from(d).map_err(|_| Error::Format("dimension overflow".into()))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor '{name}' too large")))?;
        let raw = cur.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let t = ParamTensor::new(name.clone(), shape, data);
        if name == "opt.step" {
            step = Some(counter_value(&t)?);
        } else if name == "opt.epoch" {
            epoch = Some(counter_value(&t)?);
        } else if let Some(rest) = name.strip_prefix("opt.m.") {
            first.push(ParamTensor { name: rest.to_string(), ..t });
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            second.push(ParamTensor { name: rest.to_string(), ..t });
        } else if name.starts_with("opt.") {
            return Err(Error::Format(format!("unknown optimizer tensor '{name}'")));
        } else {
            params.push(t);
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    let (Some(step), Some(epoch)) = (step, epoch) else {
        return Err(Error::Format("checkpoint lacks optimizer counters".into()));
    };
    Ok(Checkpoint {
        params,
        optimizer: OptimizerState { step, first, second },
        epoch,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Training state: parameters, frozen quantizer, optimizer and data.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    params: EncoderParams,
    quant: QuantizerState,
    opt: OptimizerState,
    data: TrainData,
    /// Completed epochs.
    epoch: u64,
    anchor_util: f64,
}

impl Trainer {
    /// Builds the quantizer, stacks/normalizes the data and initializes the
    /// encoder, all from `cfg` seeds.
    pub fn new(cfg: TrainConfig, raw: &[FeatureSequence]) -> Result<Self> {
        cfg.validate()?;
        let first = raw.first().ok_or_else(|| Error::Input("dataset is empty".into()))?;
        let input_dim = first.dim() * cfg.model.stack_factor;
        let quant = QuantizerState::new(&cfg.model.quantizer_spec(input_dim, cfg.seeds.quantizer))?;
        let data = TrainData::from_features(raw, cfg.model.stack_factor, &quant)?;
        let params = encoder::init_encoder(&cfg.model.encoder_config(input_dim, cfg.seeds.init))?;
        Trainer::from_parts(cfg, params, quant, data)
    }

    pub fn from_parts(cfg: TrainConfig, params: EncoderParams, quant: QuantizerState, data: TrainData) -> Result<Self> {
        cfg.validate()?;
        if params.config().input_dim != data.input_dim() {
            return Err(Error::Shape("encoder input width does not match the data".into()));
        }
        let opt = OptimizerState::new(cfg.optimizer.kind, &params);
        let anchor_util = data.anchor_utilization(quant.codebook_size());
        Ok(Trainer {
            cfg,
            params,
            quant,
            opt,
            data,
            epoch: 0,
            anchor_util,
        })
    }

    /// Restores parameters, optimizer state and progress.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let params = EncoderParams::from_tensors(self.params.config(), ckpt.params.clone())?;
        let expected = OptimizerState::new(self.cfg.optimizer.kind, &params);
        for (want, got) in [(&expected.first, &ckpt.optimizer.first), (&expected.second, &ckpt.optimizer.second)] {
            if want.len() != got.len() {
                return Err(Error::Shape(format!(
                    "checkpoint has {} optimizer moment tensors, optimizer expects {}",
                    got.len(),
                    want.len()
                )));
            }
            for (w, g) in want.iter().zip(got) {
                if w.name != g.name || w.shape != g.shape {
                    return Err(Error::Shape(format!(
                        "optimizer tensor '{}' {:?} does not match '{}' {:?}",
                        g.name, g.shape, w.name, w.shape
                    )));
                }
            }
        }
        self.params = params;
        self.opt = ckpt.optimizer.clone();
        self.epoch = ckpt.epoch;
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.tensors().to_vec(),
            optimizer: self.opt.clone(),
            epoch: self.epoch,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn quantizer(&self) -> &QuantizerState {
        &self.quant
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.opt
    }

    pub fn data(&self) -> &TrainData {
        &self.data
    }

    pub fn epochs_done(&self) -> u64 {
        self.epoch
    }

    pub fn steps_done(&self) -> u64 {
        self.opt.step
    }

    /// Batches (sequence indices) of `epoch` in seeded shuffle order.
    pub fn epoch_batches(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        let mut r = rng::rng_from(rng::derive(self.cfg.seeds.data, Role::Shuffle, epoch, 0, 0));
        order.shuffle(&mut r);
        order.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Crops the batch to its shortest member and draws the per-step masks
    /// and noise. `step` is the 0-based index of the update.
    pub fn prepare_batch(&self, epoch: u64, step: u64, indices: &[usize]) -> Result<Vec<PreparedSequence>> {
        let frames = indices
            .iter()
            .map(|&i| self.data.sequences[i].rows())
            .min()
            .ok_or_else(|| Error::Contract("empty batch".into()))?;
        let s = &self.cfg.seeds;
        indices
            .iter()
            .map(|&i| {
                let id = i as u64;
                let seeds = SequenceSeeds {
                    mask: rng::derive(s.mask, Role::Mask, epoch, step, id),
                    noise: rng::derive(s.mask, Role::MaskNoise, epoch, step, id),
                    gumbel: self
                        .cfg
                        .gumbel_noise
                        .then(|| rng::derive(s.gumbel, Role::Gumbel, epoch, step, id)),
                };
                let x = self.data.sequences[i].take_rows(frames);
                let anchors = self.data.anchors[i].iter().map(|a| a.truncated(frames)).collect();
                PreparedSequence::prepare(x, Some(anchors), &self.quant, &self.cfg.mask, seeds)
            })
            .collect()
    }

    /// One update on a prepared batch.
    pub fn train_step(&mut self, batch: &[PreparedSequence]) -> Result<MetricsRecord> {
        let ocfg = &self.cfg.objective;
        let bilevel = ocfg.objective == Objective::Bilevel;
        let want = GradRequest {
            upper: bilevel && ocfg.weights.w1() != 0.0,
            lower: true,
        };
        let ev = objectives::evaluate(&self.params, &self.quant, batch, ocfg, want)?;
        let grads = ev.combined_grad(ocfg)?;
        let grad_norm = global_norm(&grads);
        let lr = apply_update(&mut self.params, &mut self.opt, &grads, &self.cfg.optimizer)?;

        let n = self.quant.codebook_size();
        let (util_enh, agreement) = if bilevel {
            let enh: Vec<usize> = ev.diagnostics.iter().flat_map(|d| d.enhanced.iter().copied()).collect();
            let (mut agree, mut masked) = (0usize, 0usize);
            for d in &ev.diagnostics {
                for &t in &d.mask {
                    masked += 1;
                    agree += usize::from(d.anchor[t] == d.enhanced[t]);
                }
            }
            (quantizer::codebook_utilization(&enh, n), agree as f64 / masked as f64)
        } else {
            (f64::NAN, f64::NAN)
        };
        let b = &ev.breakdown;
        Ok(MetricsRecord {
            step: self.opt.step,
            epoch: self.epoch,
            loss_total: b.combined,
            loss_f: b.f_value,
            loss_g: b.g_value,
            mask_acc_anchor: b.mask_acc_anchor,
            mask_acc_enh: b.mask_acc_enhanced,
            codebook_util_anchor: self.anchor_util,
            codebook_util_enh: util_enh,
            label_agreement: agreement,
            grad_norm,
            lr,
        })
    }

    /// Runs the next epoch, handing every metrics row to `sink`. At the end
    /// parameters and optimizer state are rounded to the checkpoint's f32
    /// precision so a resumed run continues from identical values.
    pub fn run_epoch(&mut self, sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>) -> Result<()> {
        let epoch = self.epoch;
        for indices in self.epoch_batches(epoch) {
            let batch = self.prepare_batch(epoch, self.opt.step, &indices)?;
            let row = self.train_step(&batch)?;
            sink(&row)?;
        }
        self.params.tensors_mut().iter_mut().for_each(snap_f32);
        self.opt.first.iter_mut().chain(self.opt.second.iter_mut()).for_each(snap_f32);
        self.epoch += 1;
        Ok(())
    }
}

pub fn checkpoint_path(dir: &Path, epoch: u64) -> PathBuf {
    dir.join(format!("checkpoint_epoch{epoch:04}.ckpt"))
}

/// Outcome of [`run_pretrain`].
#[derive(Clone, Debug)]
pub struct PretrainSummary {
    pub metrics_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub final_metrics: Option<MetricsRecord>,
    pub steps: u64,
}

/// Trains until `cfg.epochs` epochs are complete, writing `metrics.csv` and
/// one checkpoint per epoch into `out`. With `resume`, training continues
/// from that checkpoint and `metrics.csv` holds only the new rows.
pub fn run_pretrain(
    cfg: &TrainConfig,
    raw: &[FeatureSequence],
    out: &Path,
    resume: Option<&Path>,
) -> Result<PretrainSummary> {
    let mut trainer = Trainer::new(cfg.clone(), raw)?;
    if let Some(path) = resume {
        trainer.restore(&load_checkpoint(path)?)?;
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let metrics_path = out.join("metrics.csv");
    let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut writer = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(&metrics_path, io),
        other => Error::Format(format!("{other:?}")),
    };
    // header even when no rows follow
    writer.write_record(METRICS_HEADER.split(',')).map_err(csv_err)?;
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(writer.into_inner().map_err(|e| Error::io(&metrics_path, e.into_error()))?);
    let mut last = None;
    let mut checkpoints = Vec::new();
    while (trainer.epochs_done() as usize) < cfg.epochs {
        trainer.run_epoch(&mut |row| {
            writer.serialize(row).map_err(csv_err)?;
            writer.flush().map_err(|e| Error::io(&metrics_path, e))?;
            last = Some(row.clone());
            Ok(())
        })?;
        let path = checkpoint_path(out, trainer.epochs_done());
        save_checkpoint(&trainer.checkpoint(), &path)?;
        checkpoints.push(path);
    }
    Ok(PretrainSummary {
        metrics_path,
        checkpoints,
        final_metrics: last,
        steps: trainer.steps_done(),
    })
}
