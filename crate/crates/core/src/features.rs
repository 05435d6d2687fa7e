//! Feature sequences: log-mel extraction from 16 kHz audio, frame stacking,
//! per-utterance standardization, a seeded synthetic corpus with planted
//! cluster structure, and the `FEATS` binary file format.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;

pub const SAMPLE_RATE: u32 = 16_000;
/// 25 ms analysis window.
pub const WINDOW_LEN: usize = 400;
/// 10 ms hop.
pub const HOP_LEN: usize = 160;
pub const FFT_LEN: usize = 512;
pub const NUM_MELS: usize = 80;
pub const LOG_FLOOR: f64 = 1e-10;
pub const FRAME_SHIFT_SECS: f64 = 0.01;

const FEATS_MAGIC: &[u8; 8] = b"BIRQFEAT";
const FEATS_VERSION: u32 = 1;

/// Mono waveform at 16 kHz.
#[derive(Clone, Debug)]
pub struct Waveform {
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Input(format!(
                "sample rate {sample_rate} Hz, expected {SAMPLE_RATE} Hz"
            )));
        }
        if samples.len() < WINDOW_LEN {
            return Err(Error::Length(format!(
                "{} samples is shorter than one {WINDOW_LEN}-sample window",
                samples.len()
            )));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Input("waveform contains non-finite samples".into()));
        }
        Ok(Waveform { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }
}

/// `T x d` features, one frame per row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    data: Matrix,
    frame_shift: f64,
    normalized: bool,
}

impl FeatureSequence {
    pub fn new(data: Matrix, frame_shift: f64) -> Result<Self> {
        if data.rows() == 0 {
            return Err(Error::Length("feature sequence needs at least one frame".into()));
        }
        if data.cols() == 0 {
            return Err(Error::Shape("feature dimension must be positive".into()));
        }
        if !data.is_finite() {
            return Err(Error::Input("feature sequence contains non-finite values".into()));
        }
        Ok(FeatureSequence {
            data,
            frame_shift,
            normalized: false,
        })
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn into_data(self) -> Matrix {
        self.data
    }

    pub fn num_frames(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn frame_shift(&self) -> f64 {
        self.frame_shift
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the 80 HTK-mel triangular filters.
pub fn mel_center_frequencies() -> Vec<f64> {
    mel_edges()[1..=NUM_MELS].to_vec()
}

fn mel_edges() -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(f64::from(SAMPLE_RATE) / 2.0));
    (0..NUM_MELS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (NUM_MELS + 1) as f64))
        .collect()
}

/// `NUM_MELS x (FFT_LEN/2 + 1)` triangular filter weights, peak 1.
pub fn mel_filterbank() -> Matrix {
    let edges = mel_edges();
    let bins = FFT_LEN / 2 + 1;
    Matrix::from_fn(NUM_MELS, bins, |m, k| {
        let f = k as f64 * f64::from(SAMPLE_RATE) / FFT_LEN as f64;
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let rising = (f - left) / (center - left);
        let falling = (right - f) / (right - center);
        rising.min(falling).max(0.0)
    })
}

/// Periodic Hann window of [`WINDOW_LEN`] samples.
pub fn hann_window() -> Vec<f64> {
    (0..WINDOW_LEN)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW_LEN as f64).cos())
        .collect()
}

/// Number of 25 ms / 10 ms frames in `len` samples.
pub fn num_frames(len: usize) -> usize {
    if len < WINDOW_LEN {
        0
    } else {
        1 + (len - WINDOW_LEN) / HOP_LEN
    }
}

/// 80-dim log-mel filterbank energies, `log(energy + 1e-10)`, unnormalized.
pub fn compute_logmel(wave: &Waveform) -> Result<FeatureSequence> {
    let samples = wave.samples();
    let frames = num_frames(samples.len());
    if frames == 0 {
        return Err(Error::Length("waveform shorter than one window".into()));
    }
    let window = hann_window();
    let fbank = mel_filterbank();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(FFT_LEN);
    let bins = FFT_LEN / 2 + 1;

    let mut out = Matrix::zeros(frames, NUM_MELS);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_LEN];
    let mut power = vec![0.0; bins];
    for t in 0..frames {
        let start = t * HOP_LEN;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < WINDOW_LEN {
                Complex::new(samples[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for m in 0..NUM_MELS {
            let energy: f64 = fbank.row(m).iter().zip(&power).map(|(w, p)| w * p).sum();
            out.set(t, m, (energy + LOG_FLOOR).ln());
        }
    }
    FeatureSequence::new(out, FRAME_SHIFT_SECS)
}

/// Concatenates every `factor` consecutive frames; a trailing remainder is
/// dropped.
pub fn stack_frames(f: &FeatureSequence, factor: usize) -> Result<FeatureSequence> {
    if factor == 0 {
        return Err(Error::Parameter("stacking factor must be at least 1".into()));
    }
    let rows = f.num_frames() / factor;
    if rows == 0 {
        return Err(Error::Length(format!(
            "{} frames cannot be stacked by {factor}",
            f.num_frames()
        )));
    }
    let d = f.dim();
    let src = f.data().as_slice();
    let data = src[..rows * factor * d].to_vec();
    Ok(FeatureSequence {
        data: Matrix::from_vec(rows, d * factor, data)?,
        frame_shift: f.frame_shift * factor as f64,
        normalized: false,
    })
}

/// Per-utterance, per-dimension standardization with population variance.
/// Constant dimensions map to zero.
pub fn normalize(f: &FeatureSequence) -> Result<FeatureSequence> {
    let (t, d) = f.data().shape();
    if t < 2 {
        return Err(Error::Length("normalization needs at least two frames".into()));
    }
    let mut out = f.data().clone();
    for j in 0..d {
        let mean = (0..t).map(|i| f.data().get(i, j)).sum::<f64>() / t as f64;
        let var = (0..t)
            .map(|i| (f.data().get(i, j) - mean).powi(2))
            .sum::<f64>()
            / t as f64;
        let std = var.sqrt();
        // relative threshold so float noise on a constant column counts as constant
        let constant = std <= 1e-12 * mean.abs().max(1.0);
        for i in 0..t {
            let v = if constant {
                0.0
            } else {
                (f.data().get(i, j) - mean) / std
            };
            out.set(i, j, v);
        }
    }
    Ok(FeatureSequence {
        data: out,
        frame_shift: f.frame_shift,
        normalized: true,
    })
}

/// Parameters of the synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub num_sequences: usize,
    pub frames: usize,
    pub dim: usize,
    pub num_clusters: usize,
    pub cluster_spread: f64,
}

/// Probability that the planted Markov chain stays in its current cluster.
pub const SYNTH_SELF_TRANSITION: f64 = 0.8;

/// A synthetic corpus together with the planted cluster of every frame.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub sequences: Vec<FeatureSequence>,
    pub clusters: Vec<Vec<usize>>,
    pub centroids: Matrix,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clusters < 2 {
            return Err(Error::Parameter("synthetic corpus needs at least 2 clusters".into()));
        }
        if !(self.cluster_spread >= 0.0) || !self.cluster_spread.is_finite() {
            return Err(Error::Parameter("cluster_spread must be finite and >= 0".into()));
        }
        if self.num_sequences == 0 || self.frames == 0 || self.dim == 0 {
            return Err(Error::Parameter(
                "synthetic corpus sizes must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Deterministic synthetic corpus: Markov-chain cluster paths with
/// self-transition 0.8, frames = centroid + spread·N(0, I).
pub fn synth_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = rng::rng_from(rng::mix(&[spec.seed, rng::Role::Data as u64]));
    let centroids = Matrix::from_fn(spec.num_clusters, spec.dim, |_, _| {
        rng.sample::<f64, _>(StandardNormal)
    });
    let mut sequences = Vec::with_capacity(spec.num_sequences);
    let mut clusters = Vec::with_capacity(spec.num_sequences);
    for _ in 0..spec.num_sequences {
        let mut state = rng.random_range(0..spec.num_clusters);
        let mut path = Vec::with_capacity(spec.frames);
        let mut data = Matrix::zeros(spec.frames, spec.dim);
        for t in 0..spec.frames {
            if t > 0 && rng.random::<f64>() >= SYNTH_SELF_TRANSITION {
                // uniform over the other clusters
                let jump = rng.random_range(1..spec.num_clusters);
                state = (state + jump) % spec.num_clusters;
            }
            path.push(state);
            for j in 0..spec.dim {
                let noise: f64 = rng.sample(StandardNormal);
                data.set(t, j, centroids.get(state, j) + spec.cluster_spread * noise);
            }
        }
        sequences.push(FeatureSequence::new(data, FRAME_SHIFT_SECS)?);
        clusters.push(path);
    }
    Ok(SynthCorpus {
        sequences,
        clusters,
        centroids,
    })
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<Vec<FeatureSequence>> {
    Ok(synth_corpus(spec)?.sequences)
}

/// Encodes a sequence in the `FEATS` format (values stored as `f32`).
pub fn encode_features(f: &FeatureSequence) -> Vec<u8> {
    let (t, d) = f.data().shape();
    let mut out = Vec::with_capacity(28 + t * d * 4);
    out.extend_from_slice(FEATS_MAGIC);
    out.extend_from_slice(&FEATS_VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    for &v in f.data().as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub(crate) fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
}

pub(crate) fn read_u64(bytes: &[u8], at: usize) -> Option<u64> {
    bytes.get(at..at + 8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSequence> {
    let bad = |m: &str| Error::Format(format!("FEATS: {m}"));
    if bytes.len() < 28 || &bytes[..8] != FEATS_MAGIC {
        return Err(bad("bad magic or truncated header"));
    }
    let version = read_u32(bytes, 8).unwrap();
    if version != FEATS_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let t = read_u64(bytes, 12).unwrap();
    let d = read_u64(bytes, 20).unwrap();
    if t == 0 || d == 0 {
        return Err(bad(&format!("invalid shape {t}x{d}")));
    }
    let count = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| bad("shape overflow"))?;
    if (bytes.len() - 28) as u64 != count {
        return Err(bad(&format!(
            "payload is {} bytes, header says {count}",
            bytes.len() - 28
        )));
    }
    let data: Vec<f64> = bytes[28..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    let m = Matrix::from_vec(t as usize, d as usize, data)?;
    FeatureSequence::new(m, FRAME_SHIFT_SECS).map_err(|e| bad(&e.to_string()))
}

pub fn save_features(f: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_features(f)).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(rows: &[Vec<f64>]) -> FeatureSequence {
        FeatureSequence::new(Matrix::from_rows(rows).unwrap(), 0.01).unwrap()
    }

    #[test]
    fn one_second_gives_98_frames() {
        // 1 + floor((16000 - 400) / 160)
        assert_eq!(num_frames(16_000), 98);
        let w = Waveform::new(vec![0.0; 16_000], SAMPLE_RATE).unwrap();
        let f = compute_logmel(&w).unwrap();
        assert_eq!(f.data().shape(), (98, 80));
    }

    #[test]
    fn silence_is_the_log_floor() {
        let w = Waveform::new(vec![0.0; 1000], SAMPLE_RATE).unwrap();
        let f = compute_logmel(&w).unwrap();
        assert!(f.data().as_slice().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn waveform_errors() {
        assert!(matches!(
            Waveform::new(vec![0.0; 399], SAMPLE_RATE),
            Err(Error::Length(_))
        ));
        let mut s = vec![0.0; 500];
        s[3] = f64::NAN;
        assert!(matches!(Waveform::new(s, SAMPLE_RATE), Err(Error::Input(_))));
        assert!(Waveform::new(vec![0.0; 500], 8000).is_err());
    }

    #[test]
    fn filterbank_shape_and_peaks() {
        let fb = mel_filterbank();
        assert_eq!(fb.shape(), (80, 257));
        for m in 0..80 {
            let peak = fb.row(m).iter().copied().fold(0.0, f64::max);
            assert!(peak > 0.0 && peak <= 1.0, "filter {m} peak {peak}");
        }
    }

    #[test]
    fn stacking_shapes_and_remainder() {
        let f = FeatureSequence::new(Matrix::zeros(98, 80), 0.01).unwrap();
        assert_eq!(stack_frames(&f, 2).unwrap().data().shape(), (49, 160));
        let five = seq(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0], vec![5.0]]);
        let s = stack_frames(&five, 2).unwrap();
        assert_eq!(s.data().as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(stack_frames(&five, 1).unwrap().data(), five.data());
        assert!(matches!(stack_frames(&five, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn normalize_examples() {
        let f = seq(&[vec![3.0, -1.0], vec![3.0, 1.0]]);
        let n = normalize(&f).unwrap();
        assert!(n.is_normalized());
        assert_eq!(n.data().as_slice(), &[0.0, -1.0, 0.0, 1.0]);
        assert!(matches!(normalize(&seq(&[vec![1.0]])), Err(Error::Length(_))));
    }

    #[test]
    fn synth_is_deterministic_and_exact_without_noise() {
        let spec = SynthSpec {
            seed: 9,
            num_sequences: 3,
            frames: 40,
            dim: 5,
            num_clusters: 3,
            cluster_spread: 0.0,
        };
        let a = synth_corpus(&spec).unwrap();
        let b = synth_corpus(&spec).unwrap();
        assert_eq!(a.sequences, b.sequences);
        for (s, path) in a.sequences.iter().zip(&a.clusters) {
            for (t, &c) in path.iter().enumerate() {
                assert_eq!(s.data().row(t), a.centroids.row(c));
            }
        }
        let bad = SynthSpec {
            num_clusters: 1,
            ..spec
        };
        assert!(synth_corpus(&bad).is_err());
    }

    #[test]
    fn feats_format_errors() {
        let f = seq(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let bytes = encode_features(&f);
        assert!(matches!(decode_features(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut zero_d = bytes.clone();
        zero_d[20..28].copy_from_slice(&0u64.to_le_bytes());
        assert!(matches!(decode_features(&zero_d), Err(Error::Format(_))));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode_features(&magic), Err(Error::Format(_))));
        let mut version = bytes;
        version[8] = 2;
        assert!(matches!(decode_features(&version), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn stacking_is_a_pure_reshape(t in 1usize..30, d in 1usize..5, factor in 1usize..4) {
            prop_assume!(t >= factor);
            let m = Matrix::from_fn(t, d, |i, j| (i * 10 + j) as f64);
            let f = FeatureSequence::new(m, 0.01).unwrap();
            let s = stack_frames(&f, factor).unwrap();
            let kept = (t / factor) * factor * d;
            prop_assert_eq!(s.data().as_slice(), &f.data().as_slice()[..kept]);
        }

        #[test]
        fn normalize_moments_and_idempotence(
            vals in proptest::collection::vec(-50.0f64..50.0, 12..60),
            d in 1usize..4,
        ) {
            let t = vals.len() / d;
            prop_assume!(t >= 2);
            let m = Matrix::from_vec(t, d, vals[..t * d].to_vec()).unwrap();
            let f = FeatureSequence::new(m, 0.01).unwrap();
            let n = normalize(&f).unwrap();
            for j in 0..d {
                let col: Vec<f64> = (0..t).map(|i| n.data().get(i, j)).collect();
                let mean = col.iter().sum::<f64>() / t as f64;
                let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64).sqrt();
                prop_assert!(mean.abs() <= 1e-6);
                prop_assert!(std == 0.0 || (std - 1.0).abs() <= 1e-6);
            }
            let nn = normalize(&n).unwrap();
            prop_assert!(nn.data().max_abs_diff(n.data()) <= 1e-6);
        }

        #[test]
        fn feats_roundtrip_is_bit_exact(vals in proptest::collection::vec(-1e6f32..1e6, 1..64)) {
            let m = Matrix::from_vec(vals.len(), 1, vals.iter().map(|&v| f64::from(v)).collect()).unwrap();
            let f = FeatureSequence::new(m, 0.01).unwrap();
            let bytes = encode_features(&f);
            let g = decode_features(&bytes).unwrap();
            prop_assert_eq!(g.data(), f.data());
            prop_assert_eq!(encode_features(&g), bytes);
        }
    }
}
