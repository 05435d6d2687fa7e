//! Fixed random-projection quantization.
//!
//! A quantizer is a frozen Gaussian codebook `C` (`N x d_c`, one entry per
//! row) plus a frozen Gaussian projection `P` (`d_in x d_c`). Frames are rows,
//! so projecting a `T x d_in` sequence is `X · P`, which is `(Pᵀ Xᵀ)ᵀ`.
//!
//! Hard labels are nearest-neighbour codebook indices. Soft labels are the
//! Gumbel-softmax relaxation `softmax_n(-(‖u_t - C_n‖² + v_tn) / τ)`, built on
//! a [`Tape`] so they stay differentiable in `u`.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::features::{read_u32, read_u64};
use crate::matrix::Matrix;
use crate::rng;

pub const DEFAULT_TEMPERATURE: f64 = 0.5;
const GUMBEL_CLAMP: f64 = 1e-12;
const LABELS_MAGIC: &[u8; 8] = b"BIRQLABL";
const LABELS_VERSION: u32 = 1;

/// Frozen random codebook, `N x d_c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Matrix,
    seed: u64,
}

impl Codebook {
    /// Wraps explicit entries (test fixtures, checkpoints).
    pub fn from_entries(entries: Matrix, seed: u64) -> Result<Self> {
        if entries.rows() < 2 {
            return Err(Error::Parameter("codebook needs at least 2 entries".into()));
        }
        Ok(Codebook { entries, seed })
    }

    pub fn entries(&self) -> &Matrix {
        &self.entries
    }

    pub fn size(&self) -> usize {
        self.entries.rows()
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Copy with every entry scaled to unit norm.
    pub fn l2_normalized(&self) -> Codebook {
        let mut entries = self.entries.clone();
        for n in 0..entries.rows() {
            let norm = l2(entries.row(n)).max(1e-12);
            entries.row_mut(n).iter_mut().for_each(|v| *v /= norm);
        }
        Codebook {
            entries,
            seed: self.seed,
        }
    }
}

/// Frozen random projection, `d_in x d_c`.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomProjection {
    matrix: Matrix,
    seed: u64,
}

impl RandomProjection {
    pub fn from_matrix(matrix: Matrix, seed: u64) -> Self {
        RandomProjection { matrix, seed }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn input_dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Per-frame codebook indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardLabels {
    indices: Vec<usize>,
    num_codes: usize,
}

impl HardLabels {
    pub fn new(indices: Vec<usize>, num_codes: usize) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= num_codes) {
            return Err(Error::Parameter(format!("label {bad} >= codebook size {num_codes}")));
        }
        Ok(HardLabels { indices, num_codes })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn num_codes(&self) -> usize {
        self.num_codes
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// First `n` frames.
    pub fn truncated(&self, n: usize) -> HardLabels {
        HardLabels {
            indices: self.indices[..n.min(self.indices.len())].to_vec(),
            num_codes: self.num_codes,
        }
    }

    /// `T x N` one-hot matrix.
    pub fn one_hot(&self) -> Matrix {
        let mut m = Matrix::zeros(self.indices.len(), self.num_codes);
        for (t, &i) in self.indices.iter().enumerate() {
            m.set(t, i, 1.0);
        }
        m
    }
}

/// Per-frame categorical distributions over the codebook, `T x N`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabels {
    rows: Matrix,
}

impl SoftLabels {
    pub fn new(rows: Matrix) -> Result<Self> {
        for t in 0..rows.rows() {
            let r = rows.row(t);
            if r.iter().any(|&v| !(v >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(Error::Input(format!("soft label row {t} is not a distribution")));
            }
        }
        Ok(SoftLabels { rows })
    }

    pub fn rows(&self) -> &Matrix {
        &self.rows
    }

    pub fn argmax(&self) -> Vec<usize> {
        (0..self.rows.rows()).map(|t| self.rows.row_argmax(t)).collect()
    }
}

/// Gumbel(0, 1) noise, `T x N`.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelNoise {
    values: Matrix,
    seed: u64,
}

impl GumbelNoise {
    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// First `n` frames.
    pub fn truncated(&self, n: usize) -> GumbelNoise {
        GumbelNoise {
            values: self.values.take_rows(n),
            seed: self.seed,
        }
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `N x d_c` codebook with i.i.d. standard normal entries.
pub fn init_codebook(seed: u64, size: usize, dim: usize) -> Result<Codebook> {
    if size < 2 {
        return Err(Error::Parameter(format!("codebook size {size} < 2")));
    }
    if dim == 0 {
        return Err(Error::Parameter("codebook dimension must be positive".into()));
    }
    let mut rng = rng::rng_from(seed);
    let entries = Matrix::from_fn(size, dim, |_, _| rng.sample(StandardNormal));
    Ok(Codebook { entries, seed })
}

/// `d_in x d_c` projection with i.i.d. `N(0, 1/d_in)` entries.
pub fn init_projection(seed: u64, input_dim: usize, output_dim: usize) -> Result<RandomProjection> {
    if input_dim == 0 || output_dim == 0 {
        return Err(Error::Parameter("projection dimensions must be positive".into()));
    }
    let mut rng = rng::rng_from(seed);
    let normal = Normal::new(0.0, (1.0 / input_dim as f64).sqrt()).unwrap();
    let matrix = Matrix::from_fn(input_dim, output_dim, |_, _| normal.sample(&mut rng));
    Ok(RandomProjection { matrix, seed })
}

/// Projects every frame (row) of `x`: `T x d_in` to `T x d_c`.
pub fn project(p: &RandomProjection, x: &Matrix) -> Result<Matrix> {
    if x.cols() != p.input_dim() {
        return Err(Error::Shape(format!(
            "frames have dimension {}, projection expects {}",
            x.cols(),
            p.input_dim()
        )));
    }
    x.matmul(&p.matrix)
}

/// Nearest codebook entry for every row of `u`; ties go to the smallest index.
pub fn assign_hard(u: &Matrix, c: &Codebook) -> Result<HardLabels> {
    if u.cols() != c.dim() {
        return Err(Error::Shape(format!(
            "projected dimension {} vs codebook dimension {}",
            u.cols(),
            c.dim()
        )));
    }
    let norms: Vec<f64> = (0..c.size()).map(|n| c.entries.row(n).iter().map(|v| v * v).sum()).collect();
    let indices = (0..u.rows())
        .map(|t| {
            let row = u.row(t);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (n, &cn) in norms.iter().enumerate() {
                let dot: f64 = row.iter().zip(c.entries.row(n)).map(|(a, b)| a * b).sum();
                // ‖u‖² is common to every n and dropped from the comparison
                let d = cn - 2.0 * dot;
                if d < best_d {
                    best_d = d;
                    best = n;
                }
            }
            best
        })
        .collect();
    HardLabels::new(indices, c.size())
}

/// Records the Gumbel-softmax relaxation of `u` on `tape` and returns the
/// `T x N` label node. Gradients flow back into `u`.
pub fn soft_assign_on_tape(
    tape: &mut Tape,
    u: Var,
    c: &Codebook,
    temperature: f64,
    noise: Option<&GumbelNoise>,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Parameter(format!("temperature {temperature} must be > 0")));
    }
    let (t, d) = tape.value(u).shape();
    if d != c.dim() {
        return Err(Error::Shape(format!("projected dimension {d} vs codebook dimension {}", c.dim())));
    }
    let mut scores = tape.sq_dist(u, c.entries());
    if let Some(g) = noise {
        if g.values.shape() != (t, c.size()) {
            return Err(Error::Shape(format!(
                "gumbel noise is {:?}, expected ({t}, {})",
                g.values.shape(),
                c.size()
            )));
        }
        let v = tape.constant(g.values.clone());
        scores = tape.add(scores, v);
    }
    let logits = tape.scale(scores, -1.0 / temperature);
    Ok(tape.softmax_rows(logits))
}

/// Non-differentiable convenience wrapper over [`soft_assign_on_tape`].
pub fn assign_soft(
    u: &Matrix,
    c: &Codebook,
    temperature: f64,
    noise: Option<&GumbelNoise>,
) -> Result<SoftLabels> {
    let mut tape = Tape::new();
    let uv = tape.constant(u.clone());
    let y = soft_assign_on_tape(&mut tape, uv, c, temperature, noise)?;
    Ok(SoftLabels {
        rows: tape.value(y).clone(),
    })
}

/// `v = -ln(-ln q)` with `q ~ U(0, 1)` clamped to `[1e-12, 1 - 1e-12]`.
pub fn sample_gumbel(seed: u64, frames: usize, codes: usize) -> GumbelNoise {
    let mut rng = rng::rng_from(seed);
    let values = Matrix::from_fn(frames, codes, |_, _| {
        let q: f64 = rng.random::<f64>().clamp(GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP);
        -(-q.ln()).ln()
    });
    GumbelNoise { values, seed }
}

/// Normalized entropy `H(p̂) / ln N` of the empirical index distribution.
pub fn codebook_utilization(indices: &[usize], num_codes: usize) -> f64 {
    if indices.is_empty() || num_codes < 2 {
        return 0.0;
    }
    let mut counts = vec![0usize; num_codes];
    for &i in indices {
        counts[i] += 1;
    }
    let total = indices.len() as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum();
    // + 0.0 turns a single-code -0.0 into 0.0
    (h / (num_codes as f64).ln()).clamp(0.0, 1.0) + 0.0
}

/// Codebooks and projections for anchoring and enhanced labels.
///
/// Codebook `l` is shared by the anchoring projection `l` (raw input) and
/// the enhancing projection `l` (tapped encoder layer). Everything here is
/// frozen for the lifetime of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerState {
    codebooks: Vec<Codebook>,
    anchor: Vec<RandomProjection>,
    enhance: Vec<RandomProjection>,
    l2_normalize: bool,
}

/// Shapes and seed of a [`QuantizerState`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantizerSpec {
    pub seed: u64,
    pub num_codebooks: usize,
    pub codebook_size: usize,
    pub codebook_dim: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub l2_normalize: bool,
}

impl QuantizerState {
    pub fn new(spec: &QuantizerSpec) -> Result<Self> {
        if spec.num_codebooks == 0 {
            return Err(Error::Parameter("num_codebooks must be at least 1".into()));
        }
        let mut codebooks = Vec::new();
        let mut anchor = Vec::new();
        let mut enhance = Vec::new();
        for l in 0..spec.num_codebooks as u64 {
            let cb = init_codebook(rng::mix(&[spec.seed, l, 0]), spec.codebook_size, spec.codebook_dim)?;
            codebooks.push(if spec.l2_normalize { cb.l2_normalized() } else { cb });
            anchor.push(init_projection(rng::mix(&[spec.seed, l, 1]), spec.input_dim, spec.codebook_dim)?);
            enhance.push(init_projection(rng::mix(&[spec.seed, l, 2]), spec.hidden_dim, spec.codebook_dim)?);
        }
        Ok(QuantizerState {
            codebooks,
            anchor,
            enhance,
            l2_normalize: spec.l2_normalize,
        })
    }

    /// Single-codebook state from explicit parts.
    pub fn from_parts(codebook: Codebook, anchor: RandomProjection, enhance: RandomProjection) -> Result<Self> {
        if anchor.output_dim() != codebook.dim() || enhance.output_dim() != codebook.dim() {
            return Err(Error::Shape("projection output must match codebook dimension".into()));
        }
        Ok(QuantizerState {
            codebooks: vec![codebook],
            anchor: vec![anchor],
            enhance: vec![enhance],
            l2_normalize: false,
        })
    }

    pub fn num_codebooks(&self) -> usize {
        self.codebooks.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.codebooks[0].size()
    }

    pub fn codebook(&self, l: usize) -> &Codebook {
        &self.codebooks[l]
    }

    pub fn anchor_projection(&self, l: usize) -> &RandomProjection {
        &self.anchor[l]
    }

    pub fn enhance_projection(&self, l: usize) -> &RandomProjection {
        &self.enhance[l]
    }

    pub fn l2_normalize(&self) -> bool {
        self.l2_normalize
    }

    /// Anchoring labels for codebook `l` from the unmasked input `x`.
    pub fn anchor_labels(&self, l: usize, x: &Matrix) -> Result<HardLabels> {
        let mut u = project(&self.anchor[l], x)?;
        if self.l2_normalize {
            for t in 0..u.rows() {
                let norm = l2(u.row(t)).max(1e-12);
                u.row_mut(t).iter_mut().for_each(|v| *v /= norm);
            }
        }
        assign_hard(&u, &self.codebooks[l])
    }

    /// Enhanced label node for codebook `l` from a tapped representation.
    pub fn enhanced_labels_on_tape(
        &self,
        tape: &mut Tape,
        l: usize,
        z: Var,
        temperature: f64,
        noise: Option<&GumbelNoise>,
    ) -> Result<Var> {
        let p = tape.constant(self.enhance[l].matrix.clone());
        let mut u = tape.matmul(z, p);
        if self.l2_normalize {
            u = tape.l2_normalize_rows(u);
        }
        soft_assign_on_tape(tape, u, &self.codebooks[l], temperature, noise)
    }
}

/// Contents of a `LABELS` file.
#[derive(Clone, Debug, PartialEq)]
pub enum LabelFile {
    Hard(HardLabels),
    Soft(SoftLabels),
}

pub fn encode_labels(labels: &LabelFile) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(LABELS_MAGIC);
    out.extend_from_slice(&LABELS_VERSION.to_le_bytes());
    match labels {
        LabelFile::Hard(h) => {
            out.extend_from_slice(&(h.len() as u64).to_le_bytes());
            out.extend_from_slice(&(h.num_codes as u64).to_le_bytes());
            out.push(0);
            for &i in &h.indices {
                out.extend_from_slice(&(i as u32).to_le_bytes());
            }
        }
        LabelFile::Soft(s) => {
            out.extend_from_slice(&(s.rows.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(s.rows.cols() as u64).to_le_bytes());
            out.push(1);
            for &v in s.rows.as_slice() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_labels(bytes: &[u8]) -> Result<LabelFile> {
    let bad = |m: String| Error::Format(format!("LABELS: {m}"));
    if bytes.len() < 29 || &bytes[..8] != LABELS_MAGIC {
        return Err(bad("bad magic or truncated header".into()));
    }
    let version = read_u32(bytes, 8).unwrap();
    if version != LABELS_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let t = read_u64(bytes, 12).unwrap() as usize;
    let n = read_u64(bytes, 20).unwrap() as usize;
    let payload = &bytes[29..];
    match bytes[28] {
        0 => {
            if payload.len() as u64 != t as u64 * 4 {
                return Err(bad("hard payload length mismatch".into()));
            }
            let indices = payload
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
                .collect();
            HardLabels::new(indices, n).map(LabelFile::Hard).map_err(|e| bad(e.to_string()))
        }
        1 => {
            if payload.len() as u64 != (t as u64) * (n as u64) * 4 {
                return Err(bad("soft payload length mismatch".into()));
            }
            let data = payload
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect();
            // rows were rounded to f32, so the sum tolerance is relaxed
            Ok(LabelFile::Soft(SoftLabels {
                rows: Matrix::from_vec(t, n, data)?,
            }))
        }
        m => Err(bad(format!("unknown mode {m}"))),
    }
}

pub fn save_labels(labels: &LabelFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_labels(labels)).map_err(|e| Error::io(path, e))
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_labels(&bytes)
}
