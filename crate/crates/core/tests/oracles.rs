//! Library outputs checked against independent, deliberately naive
//! reimplementations.

use birq::features::{self, Waveform, SAMPLE_RATE};
use birq::masking::{self, MaskPolicy};
use birq::matrix::Matrix;
use birq::quantizer::{self, Codebook};
use rand::{Rng, SeedableRng};

fn naive_mel_filter(m: usize, freq: f64) -> f64 {
    let mel = |hz: f64| 2595.0 * (1.0 + hz / 700.0).log10();
    let hz = |mel: f64| 700.0 * (10f64.powf(mel / 2595.0) - 1.0);
    let top = mel(8000.0);
    let edge = |i: usize| hz(top * i as f64 / 81.0);
    let (l, c, r) = (edge(m), edge(m + 1), edge(m + 2));
    if freq <= l || freq >= r {
        0.0
    } else if freq <= c {
        (freq - l) / (c - l)
    } else {
        (r - freq) / (r - c)
    }
}

/// Direct O(N²) DFT of one Hann-windowed, zero-padded frame.
fn naive_logmel_frame(samples: &[f64]) -> Vec<f64> {
    use std::f64::consts::PI;
    let n_fft = 512;
    let frame: Vec<f64> = (0..400)
        .map(|n| samples[n] * (0.5 - 0.5 * (2.0 * PI * n as f64 / 400.0).cos()))
        .collect();
    let power: Vec<f64> = (0..=n_fft / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &x) in frame.iter().enumerate() {
                let a = -2.0 * PI * (k * n) as f64 / n_fft as f64;
                re += x * a.cos();
                im += x * a.sin();
            }
            re * re + im * im
        })
        .collect();
    (0..80)
        .map(|m| {
            let e: f64 = power
                .iter()
                .enumerate()
                .map(|(k, p)| naive_mel_filter(m, k as f64 * 16000.0 / n_fft as f64) * p)
                .sum();
            (e + 1e-10).ln()
        })
        .collect()
}

#[test]
fn logmel_matches_naive_dft_for_a_1khz_tone() {
    let samples: Vec<f64> = (0..4000)
        .map(|n| (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / f64::from(SAMPLE_RATE)).sin())
        .collect();
    let got = features::compute_logmel(&Waveform::new(samples.clone(), SAMPLE_RATE).unwrap()).unwrap();
    assert_eq!(got.num_frames(), 1 + (4000 - 400) / 160);
    for t in [0, 7, got.num_frames() - 1] {
        let want = naive_logmel_frame(&samples[t * 160..]);
        let row = got.data().row(t);
        for m in 0..80 {
            // compare energies where they carry signal, log values elsewhere
            if want[m] > -10.0 {
                assert!((row[m] - want[m]).abs() < 1e-8, "frame {t} bin {m}: {} vs {}", row[m], want[m]);
            } else {
                assert!((row[m].exp() - want[m].exp()).abs() < 1e-9, "frame {t} bin {m}");
            }
        }
        let peak = (0..80).max_by(|&a, &b| want[a].total_cmp(&want[b])).unwrap();
        let argmax = (0..80).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(peak, argmax);
        let centers = features::mel_center_frequencies();
        assert!((centers[argmax] - 1000.0).abs() < 60.0, "peak at {} Hz", centers[argmax]);
    }
}

/// Masked fraction of Bernoulli span starts, simulated independently.
fn monte_carlo_fraction(p: f64, span: usize, frames: usize, draws: usize, seed: u64) -> f64 {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut covered = 0usize;
    for _ in 0..draws {
        let mut hit = vec![false; frames];
        for s in 0..frames {
            if rng.random::<f64>() < p {
                for h in hit.iter_mut().skip(s).take(span) {
                    *h = true;
                }
            }
        }
        covered += hit.iter().filter(|&&h| h).count();
    }
    covered as f64 / (draws * frames) as f64
}

fn closed_form_fraction(p: f64, span: usize, frames: usize) -> f64 {
    (0..frames)
        .map(|t| 1.0 - (1.0 - p).powi((t + 1).min(span) as i32))
        .sum::<f64>()
        / frames as f64
}

#[test]
fn masked_fraction_matches_union_of_spans_oracle() {
    let policy = MaskPolicy::default();
    let frames = 500;
    let draws = 10_000;
    let empirical = (0..draws)
        .map(|s| masking::sample_mask(&policy, frames, s as u64).unwrap().fraction())
        .sum::<f64>()
        / draws as f64;
    let span = policy.effective_span();
    let oracle = monte_carlo_fraction(policy.start_prob, span, frames, 4000, 99);
    let exact = closed_form_fraction(policy.start_prob, span, frames);
    assert!((oracle - exact).abs() / exact < 0.02, "oracle {oracle} vs closed form {exact}");
    assert!((empirical - oracle).abs() / oracle < 0.1, "{empirical} vs {oracle}");
    assert!((empirical - exact).abs() / exact < 0.02, "{empirical} vs {exact}");
}

#[test]
fn masked_fraction_tracks_oracle_across_policies() {
    for (p, span, stack, frames) in [(0.05, 10, 1, 200), (0.01, 40, 2, 300), (0.2, 4, 2, 100)] {
        let policy = MaskPolicy {
            start_prob: p,
            span,
            stack_factor: stack,
            ..MaskPolicy::default()
        };
        let draws = 3000;
        let empirical = (0..draws)
            .map(|s| masking::sample_mask(&policy, frames, 1000 + s).unwrap().fraction())
            .sum::<f64>()
            / draws as f64;
        let exact = closed_form_fraction(p, policy.effective_span(), frames);
        assert!((empirical - exact).abs() / exact < 0.1, "p {p} span {span}: {empirical} vs {exact}");
    }
}

pub fn brute_force_nn(u: &Matrix, entries: &Matrix) -> Vec<usize> {
    (0..u.rows())
        .map(|t| {
            let mut best = (f64::INFINITY, 0);
            for n in 0..entries.rows() {
                let d: f64 = (0..u.cols()).map(|j| (u.get(t, j) - entries.get(n, j)).powi(2)).sum();
                if d < best.0 {
                    best = (d, n);
                }
            }
            best.1
        })
        .collect()
}

#[test]
fn hard_assignment_matches_brute_force_with_ties() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(4);
    let u = Matrix::from_fn(1000, 5, |_, _| rng.random_range(-2.0..2.0));
    let cb = quantizer::init_codebook(8, 16, 5).unwrap();
    assert_eq!(quantizer::assign_hard(&u, &cb).unwrap().indices(), brute_force_nn(&u, cb.entries()));

    // duplicated entries and exact midpoints resolve to the smaller index
    let entries = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![1.0, 0.0], vec![0.0, 3.0]]).unwrap();
    let cb = Codebook::from_entries(entries.clone(), 0).unwrap();
    let u = Matrix::from_rows(&[vec![0.0, 0.5], vec![2.0, 0.0], vec![-0.5, 0.0], vec![0.0, 1.5]]).unwrap();
    let got = quantizer::assign_hard(&u, &cb).unwrap();
    assert_eq!(got.indices(), brute_force_nn(&u, &entries));
    assert_eq!(got.indices(), &[0, 0, 1, 3]);
}
