//! Independent oracles: finite-difference gradient checks, a straight-line
//! reimplementation of the losses, and a constrained-bilevel oracle for the
//! penalty reformulation on quadratic problems.
//!
//! Nothing here reuses the tape or the objectives' arithmetic. The gradient
//! check drives the module code only through loss values, the loss check
//! only compares outputs, and the quadratic oracle has its own solver.

use rayon::prelude::*;

use crate::autodiff::Precision;
use crate::encoder::{self, EncoderConfig, EncoderParams, TAP_EPS};
use crate::error::{Error, Result};
use crate::masking::{self, MaskPolicy, MaskSpec};
use crate::matrix::Matrix;
use crate::objectives::{self, GradRequest, ObjectiveConfig, PenaltyWeights, PreparedSequence};
use crate::quantizer::{self, QuantizerSpec, QuantizerState};

pub const FD_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL_F64: f64 = 1e-4;
pub const GRADCHECK_TOL_F32: f64 = 1e-2;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central differences `(f(θ + h·e_i) − f(θ − h·e_i)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(f: F, theta: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if !(step > 0.0) {
        return Err(Error::Parameter(format!("finite-difference step {step} must be > 0")));
    }
    (0..theta.len())
        .into_par_iter()
        .map(|i| {
            let mut p = theta.to_vec();
            p[i] = theta[i] + step;
            let up = f(&p)?;
            p[i] = theta[i] - step;
            let down = f(&p)?;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at coordinate {i}")));
            }
            Ok((up - down) / (2.0 * step))
        })
        .collect()
}

/// Tiny instance for [`gradcheck_birq`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub codebook_size: usize,
    pub codebook_dim: usize,
    pub input_dim: usize,
    pub frames: usize,
    pub k: usize,
    pub temperature: f64,
    pub weights: PenaltyWeights,
    pub gumbel_noise: bool,
    pub stop_label_grad: bool,
    pub seed: u64,
    pub step: f64,
    /// Precision of the analytic gradient; differences stay in f64.
    pub precision: Precision,
    /// Test hook: corrupt the analytic gradient of this tensor.
    pub sabotage: Option<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            layers: 2,
            hidden_dim: 8,
            heads: 2,
            ff_dim: 16,
            codebook_size: 4,
            codebook_dim: 3,
            input_dim: 6,
            frames: 6,
            k: encoder::default_k(2),
            temperature: quantizer::DEFAULT_TEMPERATURE,
            weights: PenaltyWeights::default(),
            gumbel_noise: true,
            stop_label_grad: false,
            seed: 11,
            step: FD_STEP,
            precision: Precision::F64,
            sabotage: None,
        }
    }
}

impl GradCheckConfig {
    pub fn threshold(&self) -> f64 {
        match self.precision {
            Precision::F64 => GRADCHECK_TOL_F64,
            Precision::F32 => GRADCHECK_TOL_F32,
        }
    }

    fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            heads: self.heads,
            ff_dim: self.ff_dim,
            codebook_size: self.codebook_size,
            num_codebooks: 1,
            seed: self.seed,
            positional_encoding: true,
        }
    }

    fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            stop_label_grad: self.stop_label_grad,
            precision: self.precision,
            ..ObjectiveConfig::new(self.weights, self.k, self.temperature)
        }
    }

    /// Encoder, quantizer and one masked sequence, all seeded.
    pub fn instance(&self) -> Result<(EncoderParams, QuantizerState, PreparedSequence)> {
        let params = encoder::init_encoder(&self.encoder_config())?;
        let quant = QuantizerState::new(&QuantizerSpec {
            seed: crate::rng::mix(&[self.seed, 1]),
            num_codebooks: 1,
            codebook_size: self.codebook_size,
            codebook_dim: self.codebook_dim,
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            l2_normalize: false,
        })?;
        let mut r = crate::rng::rng_from(crate::rng::mix(&[self.seed, 2]));
        let input = Matrix::from_fn(self.frames, self.input_dim, |_, _| {
            rand::Rng::sample::<f64, _>(&mut r, rand_distr::StandardNormal)
        });
        // every other frame, so both masked and visible frames exist
        let mask = MaskSpec::new((0..self.frames).filter(|t| t % 2 == 1), self.frames)?;
        let masked_input = masking::apply_mask(&input, &mask, &MaskPolicy::default(), crate::rng::mix(&[self.seed, 3]))?;
        let anchors = vec![quant.anchor_labels(0, &input)?];
        let gumbel = vec![self.gumbel_noise.then(|| {
            quantizer::sample_gumbel(crate::rng::mix(&[self.seed, 4]), self.frames, self.codebook_size)
        })];
        let seq = PreparedSequence {
            input,
            masked_input,
            mask,
            anchors,
            gumbel,
        };
        Ok((params, quant, seq))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorError {
    /// `F`, `G` or `combined`.
    pub objective: &'static str,
    pub tensor: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorError>,
    pub global_max: f64,
    pub step: f64,
    pub precision: Precision,
    pub threshold: f64,
    pub num_params: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.global_max <= self.threshold
    }

    pub fn worst(&self) -> &TensorError {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .expect("report has entries")
    }

    /// Max relative error over the tensors of one objective.
    pub fn objective_max(&self, objective: &str) -> f64 {
        self.tensors
            .iter()
            .filter(|t| t.objective == objective)
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("objective,tensor,max_rel_error,max_abs_error\n");
        for t in &self.tensors {
            s.push_str(&format!("{},{},{:e},{:e}\n", t.objective, t.tensor, t.max_rel_error, t.max_abs_error));
        }
        s
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<9} {:<28} {:>12} {:>12}\n", "objective", "tensor", "max_rel", "max_abs");
        for t in &self.tensors {
            s.push_str(&format!(
                "{:<9} {:<28} {:>12.3e} {:>12.3e}\n",
                t.objective, t.tensor, t.max_rel_error, t.max_abs_error
            ));
        }
        let w = self.worst();
        s.push_str(&format!(
            "params {}  step {:e}  precision {:?}  global max {:.3e} ({} / {})  threshold {:e}\n",
            self.num_params, self.step, self.precision, self.global_max, w.objective, w.tensor, self.threshold
        ));
        s
    }
}

fn with_flat(params: &EncoderParams, flat: &[f64]) -> EncoderParams {
    let mut p = params.clone();
    let mut it = flat.iter();
    for t in p.tensors_mut() {
        for v in &mut t.data {
            *v = *it.next().expect("flat length");
        }
    }
    p
}

/// Compares analytic gradients of `F`, `G` and `w1·F + w2·G` against central
/// differences on the tiny instance.
pub fn gradcheck_birq(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (params, quant, seq) = cfg.instance()?;
    let ocfg = cfg.objective();
    let batch = [seq];
    let ev = objectives::evaluate(&params, &quant, &batch, &ocfg, GradRequest::BOTH)?;
    let mut analytic = [
        ("F", ev.grad_upper.clone().expect("requested")),
        ("G", ev.grad_lower.clone().expect("requested")),
        ("combined", ev.combined_grad(&ocfg)?),
    ];
    if let Some(name) = &cfg.sabotage {
        for (_, grads) in &mut analytic {
            let g = grads
                .iter_mut()
                .find(|g| &g.name == name)
                .ok_or_else(|| Error::Parameter(format!("no tensor named '{name}'")))?;
            g.data[0] += 1.0;
        }
    }

    let fd_cfg = ObjectiveConfig {
        precision: Precision::F64,
        ..ocfg.clone()
    };
    let flat: Vec<f64> = params.tensors().iter().flat_map(|t| t.data.iter().copied()).collect();
    let eval = |theta: &[f64]| -> Result<[f64; 3]> {
        let p = with_flat(&params, theta);
        let b = objectives::evaluate(&p, &quant, &batch, &fd_cfg, GradRequest::NONE)?.breakdown;
        Ok([b.f_value, b.g_value, b.combined])
    };
    let numeric: Vec<[f64; 3]> = (0..flat.len())
        .into_par_iter()
        .map(|i| {
            let mut p = flat.clone();
            p[i] = flat[i] + cfg.step;
            let up = eval(&p)?;
            p[i] = flat[i] - cfg.step;
            let down = eval(&p)?;
            let mut out = [0.0; 3];
            for j in 0..3 {
                if !up[j].is_finite() || !down[j].is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss at coordinate {i}")));
                }
                out[j] = (up[j] - down[j]) / (2.0 * cfg.step);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut tensors = Vec::new();
    for (j, (objective, grads)) in analytic.iter().enumerate() {
        let mut offset = 0;
        for g in grads {
            let (mut rel, mut abs) = (0.0f64, 0.0f64);
            for (i, &a) in g.data.iter().enumerate() {
                let n = numeric[offset + i][j];
                rel = rel.max(relative_error(a, n));
                abs = abs.max((a - n).abs());
            }
            offset += g.len();
            tensors.push(TensorError {
                objective,
                tensor: g.name.clone(),
                max_rel_error: rel,
                max_abs_error: abs,
            });
        }
    }
    let global_max = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        tensors,
        global_max,
        step: cfg.step,
        precision: cfg.precision,
        threshold: cfg.threshold(),
        num_params: flat.len(),
    })
}

// ---------------------------------------------------------------------------
// Straight-line loss reference

/// Seeded two-sequence instance for [`dual_impl_loss_check`].
#[derive(Clone, Debug)]
pub struct DualCheckInstance {
    pub params: EncoderParams,
    pub quant: QuantizerState,
    pub batch: Vec<PreparedSequence>,
    pub cfg: ObjectiveConfig,
}

impl DualCheckInstance {
    pub fn fixture() -> Result<Self> {
        let base = GradCheckConfig {
            frames: 8,
            layers: 3,
            k: 2,
            seed: 23,
            ..GradCheckConfig::default()
        };
        let (params, quant, first) = base.instance()?;
        let (_, _, second) = GradCheckConfig { seed: 24, ..base.clone() }.instance()?;
        Ok(DualCheckInstance {
            params,
            quant,
            batch: vec![first, second],
            cfg: base.objective(),
        })
    }
}

/// `-Σ_{t∈rows} Σ_n y[t][n] · log softmax(o[t])[n]` with plain loops.
pub fn reference_masked_ce(logits: &Matrix, labels: &Matrix, rows: &[usize]) -> f64 {
    let n = logits.cols();
    let mut total = 0.0;
    for &t in rows {
        let o = logits.row(t);
        let mut max = f64::NEG_INFINITY;
        for &v in o {
            if v > max {
                max = v;
            }
        }
        let mut z = 0.0;
        for &v in o {
            z += (v - max).exp();
        }
        let lse = max + z.ln();
        for c in 0..n {
            total -= labels.get(t, c) * (o[c] - lse);
        }
    }
    total
}

/// Enhanced labels from a raw layer output, with plain loops.
fn reference_soft_labels(
    layer: &Matrix,
    proj: &Matrix,
    codebook: &Matrix,
    tau: f64,
    noise: Option<&Matrix>,
) -> Matrix {
    let (t_len, dh) = layer.shape();
    let (codes, dc) = codebook.shape();
    let mut out = Matrix::zeros(t_len, codes);
    let mut z = vec![0.0; dh];
    let mut u = vec![0.0; dc];
    let mut s = vec![0.0; codes];
    for t in 0..t_len {
        let row = layer.row(t);
        let mean = row.iter().sum::<f64>() / dh as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / dh as f64;
        for i in 0..dh {
            z[i] = (row[i] - mean) / (var + TAP_EPS).sqrt();
        }
        for j in 0..dc {
            u[j] = (0..dh).map(|i| z[i] * proj.get(i, j)).sum();
        }
        let mut max = f64::NEG_INFINITY;
        for n in 0..codes {
            let d: f64 = (0..dc).map(|j| (u[j] - codebook.get(n, j)).powi(2)).sum();
            s[n] = -(d + noise.map_or(0.0, |v| v.get(t, n))) / tau;
            max = max.max(s[n]);
        }
        let zsum: f64 = s.iter().map(|v| (v - max).exp()).sum();
        for n in 0..codes {
            out.set(t, n, (s[n] - max).exp() / zsum);
        }
    }
    out
}

/// Max absolute deviation between the module's `F`, `G`, `w1·F + w2·G`
/// and the straight-line reference.
pub fn dual_impl_loss_check(inst: &DualCheckInstance) -> Result<f64> {
    if inst.quant.num_codebooks() != 1 || inst.quant.l2_normalize() {
        return Err(Error::Parameter("reference covers one raw-space codebook".into()));
    }
    let module = objectives::combined_loss(&inst.params, &inst.quant, &inst.batch, &inst.cfg)?;
    let (mut f, mut g) = (0.0, 0.0);
    for s in &inst.batch {
        let logits = encoder::forward(&inst.params, &s.masked_input)?.logits;
        let hidden = encoder::forward(&inst.params, &s.input)?;
        let mut anchor = Matrix::zeros(s.input.rows(), inst.quant.codebook_size());
        for (t, &i) in s.anchors[0].indices().iter().enumerate() {
            anchor.set(t, i, 1.0);
        }
        g += reference_masked_ce(&logits, &anchor, s.mask.indices());
        let y = reference_soft_labels(
            &hidden.layers[inst.cfg.k - 1],
            inst.quant.enhance_projection(0).matrix(),
            inst.quant.codebook(0).entries(),
            inst.cfg.temperature,
            s.gumbel[0].as_ref().map(|v| v.values()),
        );
        f += reference_masked_ce(&logits, &y, s.mask.indices());
    }
    let b = inst.batch.len() as f64;
    let (f, g) = (f / b, g / b);
    let c = inst.cfg.weights.w1() * f + inst.cfg.weights.w2() * g;
    Ok((module.f_value - f)
        .abs()
        .max((module.g_value - g).abs())
        .max((module.combined - c).abs()))
}

// ---------------------------------------------------------------------------
// Quadratic bilevel oracle

/// Square matrix as rows; tiny dimensions only.
pub type Dense = Vec<Vec<f64>>;

/// `Q(θ) = (θ − b)ᵀ A (θ − b)`.
fn quad(a: &Dense, b: &[f64], theta: &[f64]) -> f64 {
    let d: Vec<f64> = theta.iter().zip(b).map(|(x, y)| x - y).collect();
    (0..d.len())
        .map(|i| (0..d.len()).map(|j| d[i] * a[i][j] * d[j]).sum::<f64>())
        .sum()
}

/// `∇Q = (A + Aᵀ)(θ − b)`.
fn quad_grad(a: &Dense, b: &[f64], theta: &[f64]) -> Vec<f64> {
    let n = theta.len();
    let d: Vec<f64> = theta.iter().zip(b).map(|(x, y)| x - y).collect();
    (0..n)
        .map(|i| (0..n).map(|j| (a[i][j] + a[j][i]) * d[j]).sum())
        .collect()
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Dense, mut rhs: Vec<f64>) -> Result<Vec<f64>> {
    let n = rhs.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty");
        if a[piv][col].abs() < 1e-300 {
            return Err(Error::Construction("singular linear system in quadratic oracle".into()));
        }
        a.swap(col, piv);
        rhs.swap(col, piv);
        for r in col + 1..n {
            let m = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= m * a[col][c];
            }
            rhs[r] -= m * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (rhs[r] - s) / a[r][r];
    }
    Ok(x)
}

/// Cholesky success on a symmetric matrix shifted by `shift·I`.
fn is_positive_definite(a: &Dense, shift: f64) -> bool {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let v = a[i][i] + shift - s;
                if !(v > 0.0) {
                    return false;
                }
                l[i][j] = v.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    true
}

/// Quadratic bilevel fixture: minimize `F` over `{θ : G(θ) − min G ≤ δ}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyBilevelProblem {
    a_f: Dense,
    b_f: Vec<f64>,
    a_g: Dense,
    b_g: Vec<f64>,
    delta: f64,
}

pub const TOY_MAX_DIM: usize = 4;

impl ToyBilevelProblem {
    /// `A_F` must be symmetric positive definite, `A_G` symmetric positive
    /// semidefinite, `δ ≥ 0` and `d ≤ 4`.
    pub fn new(a_f: Dense, b_f: Vec<f64>, a_g: Dense, b_g: Vec<f64>, delta: f64) -> Result<Self> {
        let d = b_f.len();
        let square = |m: &Dense| m.len() == d && m.iter().all(|r| r.len() == d);
        if d == 0 || d > TOY_MAX_DIM || b_g.len() != d || !square(&a_f) || !square(&a_g) {
            return Err(Error::Construction(format!("quadratic fixture must be d x d with 1 <= d <= {TOY_MAX_DIM}")));
        }
        let symmetric = |m: &Dense| (0..d).all(|i| (0..d).all(|j| (m[i][j] - m[j][i]).abs() <= 1e-12));
        if !symmetric(&a_f) || !symmetric(&a_g) {
            return Err(Error::Construction("quadratic forms must be symmetric".into()));
        }
        if !is_positive_definite(&a_f, 0.0) {
            return Err(Error::Construction("A_F must be positive definite".into()));
        }
        if !is_positive_definite(&a_g, 1e-12) {
            return Err(Error::Construction("A_G must be positive semidefinite".into()));
        }
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(Error::Construction(format!("delta {delta} must be finite and >= 0")));
        }
        Ok(ToyBilevelProblem {
            a_f,
            b_f,
            a_g,
            b_g,
            delta,
        })
    }

    /// `A_F = A_G = I`, `b_F = (2, 0)`, `b_G = 0`, `δ = 1`; optimum `(1, 0)`.
    pub fn fixture() -> Self {
        let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        ToyBilevelProblem::new(eye.clone(), vec![2.0, 0.0], eye, vec![0.0, 0.0], 1.0).expect("valid fixture")
    }

    pub fn dim(&self) -> usize {
        self.b_f.len()
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn with_delta(&self, delta: f64) -> Result<Self> {
        ToyBilevelProblem::new(self.a_f.clone(), self.b_f.clone(), self.a_g.clone(), self.b_g.clone(), delta)
    }

    pub fn upper(&self, theta: &[f64]) -> f64 {
        quad(&self.a_f, &self.b_f, theta)
    }

    /// `G(θ)`; its minimum is 0, attained at `b_G`.
    pub fn lower(&self, theta: &[f64]) -> f64 {
        quad(&self.a_g, &self.b_g, theta)
    }

    /// `argmin F + μG = (A_F + μA_G)⁻¹(A_F b_F + μA_G b_G)`.
    fn kkt_point(&self, mu: f64) -> Result<Vec<f64>> {
        let d = self.dim();
        let a: Dense = (0..d)
            .map(|i| (0..d).map(|j| self.a_f[i][j] + mu * self.a_g[i][j]).collect())
            .collect();
        let rhs = (0..d)
            .map(|i| (0..d).map(|j| self.a_f[i][j] * self.b_f[j] + mu * self.a_g[i][j] * self.b_g[j]).sum())
            .collect();
        solve(a, rhs)
    }
}

/// Constrained optimum by KKT with a bisected scalar multiplier.
pub fn solve_toy_oracle(p: &ToyBilevelProblem) -> Result<Vec<f64>> {
    let free = p.kkt_point(0.0)?;
    if p.lower(&free) <= p.delta {
        return Ok(free);
    }
    // G(θ(μ)) decreases in μ; bracket then bisect
    let mut hi = 1.0;
    while p.lower(&p.kkt_point(hi)?) > p.delta {
        hi *= 2.0;
        if hi > 1e15 {
            // δ below reach of the multiplier: the feasible set is G's minimizer set
            return p.kkt_point(hi);
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if p.lower(&p.kkt_point(mid)?) > p.delta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    p.kkt_point(hi)
}

/// Penalty weights for `γ`: `(1, γ) / (1 + γ)`; `γ = ∞` gives `(0, 1)`.
pub fn gamma_weights(gamma: f64) -> Result<(f64, f64)> {
    if gamma.is_nan() || gamma < 0.0 {
        return Err(Error::Parameter(format!("gamma {gamma} must be >= 0")));
    }
    if gamma.is_infinite() {
        return Ok((0.0, 1.0));
    }
    Ok((1.0 / (1.0 + gamma), gamma / (1.0 + gamma)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BilevelRow {
    pub gamma: f64,
    pub w1: f64,
    pub w2: f64,
    pub theta_pen: Vec<f64>,
    /// `G(θ_pen) − min G`.
    pub delta: f64,
    /// Constrained optimum at that `δ`.
    pub theta_star: Vec<f64>,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BilevelReport {
    pub rows: Vec<BilevelRow>,
    pub eta: f64,
    pub steps: usize,
}

pub const DEMO_GAMMAS: [f64; 4] = [1.0, 10.0, 100.0, 1000.0];
pub const DEMO_ETA: f64 = 0.1;
pub const DEMO_STEPS: usize = 500;
pub const DEMO_TOL: f64 = 1e-2;

impl BilevelReport {
    pub fn row(&self, gamma: f64) -> Option<&BilevelRow> {
        self.rows.iter().find(|r| r.gamma == gamma)
    }

    /// Measured `δ` never increases along increasing `γ`.
    pub fn delta_non_increasing(&self) -> bool {
        let mut rows: Vec<&BilevelRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| a.gamma.total_cmp(&b.gamma));
        rows.windows(2).all(|w| w[1].delta <= w[0].delta)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("gamma,w1,w2,delta,distance,theta_pen,theta_star\n");
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:e},{:e},{:e},{:e},{},{}\n",
                r.gamma,
                r.w1,
                r.w2,
                r.delta,
                r.distance,
                join(&r.theta_pen),
                join(&r.theta_star)
            ));
        }
        s
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:>10} {:>10} {:>10} {:>12} {:>12}\n", "gamma", "w1", "w2", "delta", "distance");
        for r in &self.rows {
            s.push_str(&format!(
                "{:>10} {:>10.4} {:>10.4} {:>12.4e} {:>12.4e}\n",
                r.gamma, r.w1, r.w2, r.delta, r.distance
            ));
        }
        s
    }
}

/// Gradient descent on `w1·F + w2·G` from the origin for each `γ`, compared
/// with the constrained optimum at the lower-level gap it reaches.
pub fn run_penalty_demo(p: &ToyBilevelProblem, gammas: &[f64], eta: f64, steps: usize) -> Result<BilevelReport> {
    if !(eta > 0.0) {
        return Err(Error::StepSize(format!("step size {eta} must be > 0")));
    }
    let d = p.dim();
    let mut rows = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        let (w1, w2) = gamma_weights(gamma)?;
        let loss = |t: &[f64]| w1 * p.upper(t) + w2 * p.lower(t);
        let mut theta = vec![0.0; d];
        let start = loss(&theta).abs().max(1.0);
        for _ in 0..steps {
            let gf = quad_grad(&p.a_f, &p.b_f, &theta);
            let gg = quad_grad(&p.a_g, &p.b_g, &theta);
            for i in 0..d {
                theta[i] -= eta * (w1 * gf[i] + w2 * gg[i]);
            }
            let l = loss(&theta);
            if !l.is_finite() || l > 1e6 * start {
                return Err(Error::StepSize(format!("penalty descent diverged at gamma {gamma} with step {eta}")));
            }
        }
        let delta = p.lower(&theta);
        let theta_star = if w1 == 0.0 {
            // pure lower level: nearest minimizer of G under F
            solve_toy_oracle(&p.with_delta(0.0)?)?
        } else {
            solve_toy_oracle(&p.with_delta(delta)?)?
        };
        let distance = theta
            .iter()
            .zip(&theta_star)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        rows.push(BilevelRow {
            gamma,
            w1,
            w2,
            theta_pen: theta,
            delta,
            theta_star,
            distance,
        });
    }
    Ok(BilevelReport { rows, eta, steps })
}
