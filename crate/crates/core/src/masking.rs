//! Span masking with Gaussian-noise fill.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;

/// Retries before falling back to a single forced span.
pub const MASK_RETRIES: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPolicy {
    /// Per-frame probability of starting a span.
    pub start_prob: f64,
    /// Span length in unstacked frames.
    pub span: usize,
    /// Stacking factor of the frames being masked.
    pub stack_factor: usize,
    pub noise_mean: f64,
    /// Standard deviation of the fill noise.
    pub noise_std: f64,
    /// Pick exactly `round(start_prob * T)` starts instead of Bernoulli starts.
    pub exact_count: bool,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy {
            start_prob: 0.02,
            span: 20,
            stack_factor: 2,
            noise_mean: 0.0,
            noise_std: 0.1,
            exact_count: false,
        }
    }
}

impl MaskPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.start_prob) {
            return Err(Error::Parameter(format!("mask start_prob {} not in [0, 1]", self.start_prob)));
        }
        if self.span == 0 || self.stack_factor == 0 {
            return Err(Error::Parameter("mask span and stack factor must be >= 1".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Parameter("mask noise_std must be >= 0".into()));
        }
        Ok(())
    }

    /// Span length in stacked frames, at least 1.
    pub fn effective_span(&self) -> usize {
        (self.span / self.stack_factor).max(1)
    }
}

/// Sorted set of masked frame indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    masked: Vec<usize>,
    frames: usize,
}

impl MaskSpec {
    pub fn new(masked: impl IntoIterator<Item = usize>, frames: usize) -> Result<Self> {
        let set: BTreeSet<usize> = masked.into_iter().collect();
        if let Some(&bad) = set.iter().find(|&&i| i >= frames) {
            return Err(Error::Parameter(format!("mask index {bad} >= {frames} frames")));
        }
        Ok(MaskSpec {
            masked: set.into_iter().collect(),
            frames,
        })
    }

    pub fn indices(&self) -> &[usize] {
        &self.masked
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn contains(&self, t: usize) -> bool {
        self.masked.binary_search(&t).is_ok()
    }

    pub fn fraction(&self) -> f64 {
        self.masked.len() as f64 / self.frames as f64
    }
}

fn spans_from_starts(starts: impl IntoIterator<Item = usize>, span: usize, frames: usize) -> BTreeSet<usize> {
    let mut set = BTreeSet::new();
    for s in starts {
        set.extend(s..(s + span).min(frames));
    }
    set
}

/// Samples a non-empty span mask over `frames` frames.
pub fn sample_mask(policy: &MaskPolicy, frames: usize, seed: u64) -> Result<MaskSpec> {
    policy.validate()?;
    if frames == 0 {
        return Err(Error::Length("cannot mask an empty sequence".into()));
    }
    let span = policy.effective_span();
    let mut rng = rng::rng_from(seed);
    for _ in 0..MASK_RETRIES {
        let set = if policy.exact_count {
            let count = ((policy.start_prob * frames as f64).round() as usize).min(frames);
            spans_from_starts(sample(&mut rng, frames, count), span, frames)
        } else {
            let starts: Vec<usize> = (0..frames)
                .filter(|_| rng.random::<f64>() < policy.start_prob)
                .collect();
            spans_from_starts(starts, span, frames)
        };
        if !set.is_empty() {
            return MaskSpec::new(set, frames);
        }
    }
    let start = rng.random_range(0..frames);
    MaskSpec::new(spans_from_starts([start], span, frames), frames)
}

/// Replaces masked frames (rows) with i.i.d. `N(noise_mean, noise_std²)`.
pub fn apply_mask(x: &Matrix, mask: &MaskSpec, policy: &MaskPolicy, seed: u64) -> Result<Matrix> {
    if mask.frames() != x.rows() {
        return Err(Error::Shape(format!(
            "mask covers {} frames, input has {}",
            mask.frames(),
            x.rows()
        )));
    }
    let mut out = x.clone();
    let mut rng = rng::rng_from(seed);
    if policy.noise_std == 0.0 {
        for &t in mask.indices() {
            out.row_mut(t).fill(policy.noise_mean);
        }
        return Ok(out);
    }
    let normal = Normal::new(policy.noise_mean, policy.noise_std)
        .map_err(|e| Error::Parameter(e.to_string()))?;
    for &t in mask.indices() {
        for v in out.row_mut(t) {
            *v = normal.sample(&mut rng);
        }
    }
    Ok(out)
}
