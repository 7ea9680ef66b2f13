//! Exact Gaussian process regression with Matérn 3/2 kernels.
//!
//! Inputs are standardized per dimension and targets are centred and scaled
//! before fitting, so the zero prior mean applies in normalized space.
//! Hyperparameters `(σ_f, σ_l…, σ_n)` are chosen by maximizing the log
//! marginal likelihood with a bounded quasi-Newton ascent in log space.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView2};
use ndarray_linalg::{FactorizeC, InverseC, SolveC, UPLO};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const SQRT3: f64 = 1.732_050_807_568_877_2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GprError {
    #[error("no training data")]
    Empty,
    #[error("{inputs} input rows but {targets} targets")]
    LengthMismatch { inputs: usize, targets: usize },
    #[error("kernel expects {expected} input dimensions, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite training value at row {0}")]
    NonFinite(usize),
    #[error("Gram matrix not positive definite even with diagonal jitter {jitter:e}")]
    Factorization { jitter: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// Isotropic Matérn 3/2.
    Matern32,
    /// Matérn 3/2 with one length scale per input dimension.
    Matern32Ard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub signal_std: f64,
    /// One entry for `Matern32`, one per input dimension for `Matern32Ard`.
    pub length_scales: Vec<f64>,
}

impl KernelSpec {
    pub fn matern32(signal_std: f64, length_scale: f64) -> Self {
        Self {
            kind: KernelKind::Matern32,
            signal_std,
            length_scales: vec![length_scale],
        }
    }

    pub fn matern32_ard(signal_std: f64, length_scales: Vec<f64>) -> Self {
        Self {
            kind: KernelKind::Matern32Ard,
            signal_std,
            length_scales,
        }
    }

    /// Scaled distance `s` such that `k = σ_f² (1 + s) e^{-s}`.
    fn scaled_distance(&self, x: &[f64], y: &[f64]) -> f64 {
        match self.kind {
            KernelKind::Matern32 => {
                let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                SQRT3 * r2.sqrt() / self.length_scales[0]
            }
            KernelKind::Matern32Ard => {
                let q: f64 = x
                    .iter()
                    .zip(y)
                    .zip(&self.length_scales)
                    .map(|((a, b), l)| {
                        let t = (a - b) / l;
                        t * t
                    })
                    .sum();
                (3.0 * q).sqrt()
            }
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let s = self.scaled_distance(x, y);
        self.signal_std * self.signal_std * (1.0 + s) * (-s).exp()
    }

    fn check_dim(&self, dim: usize) -> Result<(), GprError> {
        if self.kind == KernelKind::Matern32Ard && self.length_scales.len() != dim {
            return Err(GprError::Dimension {
                expected: self.length_scales.len(),
                got: dim,
            });
        }
        Ok(())
    }
}

pub fn kernel_eval(spec: &KernelSpec, x: &[f64], y: &[f64]) -> f64 {
    spec.eval(x, y)
}

/// Kernel and noise level, expressed in the model's normalized coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub kernel: KernelSpec,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GprConfig {
    /// Number of optimizer starts when no warm start is supplied.
    pub restarts: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    /// An iteration gaining fewer log-likelihood nats than this ends the
    /// search; such gains do not move predictions.
    pub ll_tol: f64,
    /// Lower bound on `σ_n`, in units of the target standard deviation.
    pub noise_floor: f64,
}

impl Default for GprConfig {
    fn default() -> Self {
        Self {
            restarts: 3,
            max_iters: 60,
            grad_tol: 1e-5,
            ll_tol: 1e-2,
            noise_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Log marginal likelihood at the first start point.
    pub initial_log_likelihood: f64,
    pub log_likelihood: f64,
    pub evaluations: usize,
    pub jitter: f64,
    /// Training rows after duplicate inputs were merged.
    pub unique_points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Affine {
    shift: f64,
    scale: f64,
}

impl Affine {
    fn fit(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count() as f64;
        let mean = values.clone().sum::<f64>() / n;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        let scale = if sd > 1e-12 * mean.abs().max(1.0) { sd } else { 1.0 };
        Self { shift: mean, scale }
    }

    fn identity() -> Self {
        Self {
            shift: 0.0,
            scale: 1.0,
        }
    }
}

/// A fitted regressor. Immutable after construction and safe to share.
#[derive(Debug, Clone)]
pub struct GprModel {
    dim: usize,
    /// Normalized inputs, row-major `n × dim`.
    inputs: Vec<f64>,
    /// Normalized inputs pre-multiplied by `√3 / σ_l`, for fast prediction.
    scaled_inputs: Vec<f64>,
    hyper: Hyperparameters,
    lower: Array2<f64>,
    alpha: Array1<f64>,
    input_maps: Vec<Affine>,
    target_map: Affine,
    diagnostics: FitDiagnostics,
}

impl GprModel {
    /// Normalizes the data and fits hyperparameters by likelihood maximization.
    ///
    /// With `warm` given, the optimizer runs a single start from it instead of
    /// the configured multi-start.
    pub fn fit(
        x: ArrayView2<f64>,
        y: &[f64],
        kind: KernelKind,
        cfg: &GprConfig,
        warm: Option<&Hyperparameters>,
    ) -> Result<Self, GprError> {
        let data = TrainingData::prepare(x, y, true)?;
        let p = data.len();
        let dim = data.dim;
        let n_scales = match kind {
            KernelKind::Matern32 => 1,
            KernelKind::Matern32Ard => dim,
        };

        let init = initial_theta(&data, kind);
        let mut starts: Vec<Vec<f64>> = Vec::new();
        match warm {
            Some(h) if h.kernel.kind == kind && h.kernel.length_scales.len() == n_scales => {
                starts.push(encode(h));
            }
            _ => {
                for factor in [1.0, 0.25, 4.0].iter().take(cfg.restarts.max(1)) {
                    let mut t = init.clone();
                    for v in &mut t[1..=n_scales] {
                        *v += f64::ln(*factor);
                    }
                    starts.push(t);
                }
            }
        }

        let (lo, hi) = theta_bounds(n_scales, cfg.noise_floor);
        for s in &mut starts {
            for ((v, l), h) in s.iter_mut().zip(&lo).zip(&hi) {
                *v = v.clamp(*l, *h);
            }
        }

        let mut evaluations = 0usize;
        let targets_flat = data.targets.iter().all(|v| *v == 0.0);
        let initial_ll = likelihood(&data, kind, &starts[0], false)
            .map(|(v, _)| v)
            .unwrap_or(f64::NEG_INFINITY);

        let mut best_theta = starts[0].clone();
        let mut best_ll = initial_ll;
        if p >= 2 && !targets_flat {
            for start in &starts {
                let (theta, ll, evals) = ascend(
                    |t, grad| likelihood(&data, kind, t, grad).ok(),
                    start.clone(),
                    &lo,
                    &hi,
                    cfg.max_iters,
                    cfg.grad_tol,
                    cfg.ll_tol,
                );
                evaluations += evals;
                if ll > best_ll {
                    best_ll = ll;
                    best_theta = theta;
                }
            }
        }

        let hyper = decode(&best_theta, kind);
        let mut model = Self::assemble(data, hyper)?;
        model.diagnostics.initial_log_likelihood = initial_ll;
        model.diagnostics.evaluations = evaluations;
        Ok(model)
    }

    /// Conditions on the data with fixed hyperparameters; no optimization.
    ///
    /// With `normalize == false` the kernel acts on raw inputs and targets.
    pub fn with_hyperparameters(
        x: ArrayView2<f64>,
        y: &[f64],
        hyper: Hyperparameters,
        normalize: bool,
    ) -> Result<Self, GprError> {
        let data = TrainingData::prepare(x, y, normalize)?;
        Self::assemble(data, hyper)
    }

    fn assemble(data: TrainingData, hyper: Hyperparameters) -> Result<Self, GprError> {
        hyper.kernel.check_dim(data.dim)?;
        let p = data.len();
        let gram = gram_matrix(&data, &hyper.kernel);
        let noise = hyper.noise_std * hyper.noise_std;
        let (factor, jitter) = factorize_with_jitter(&gram, noise)?;
        let alpha = factor
            .solvec(&data.targets)
            .map_err(|_| GprError::Factorization { jitter })?;
        let lower = factor.into_lower();
        let log_likelihood = -0.5 * data.targets.dot(&alpha)
            - (0..p).map(|i| lower[[i, i]].ln()).sum::<f64>()
            - 0.5 * p as f64 * (2.0 * PI).ln();

        let scaled_inputs = scale_rows(&data.inputs, data.dim, &hyper.kernel);
        Ok(Self {
            dim: data.dim,
            inputs: data.inputs,
            scaled_inputs,
            hyper,
            lower,
            alpha,
            input_maps: data.input_maps,
            target_map: data.target_map,
            diagnostics: FitDiagnostics {
                initial_log_likelihood: log_likelihood,
                log_likelihood,
                evaluations: 0,
                jitter,
                unique_points: p,
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn hyperparameters(&self) -> &Hyperparameters {
        &self.hyper
    }

    pub fn diagnostics(&self) -> &FitDiagnostics {
        &self.diagnostics
    }

    fn normalize_input(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.input_maps)
            .map(|(v, m)| (v - m.shift) / m.scale)
            .collect()
    }

    fn cross_covariance(&self, xn: &[f64]) -> Array1<f64> {
        let k = &self.hyper.kernel;
        (0..self.len())
            .map(|i| k.eval(xn, &self.inputs[i * self.dim..(i + 1) * self.dim]))
            .collect()
    }

    /// Posterior mean `K(x*, X) [K + σ_n² I]⁻¹ Y`, in target units.
    pub fn predict_mean(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim, "prediction input has wrong dimension");
        let d = self.dim;
        let mut xs = [0.0f64; 16];
        let xs: &mut [f64] = if d <= xs.len() {
            &mut xs[..d]
        } else {
            return self.predict_mean_slow(x);
        };
        let scales = &self.hyper.kernel.length_scales;
        for j in 0..d {
            let m = self.input_maps[j];
            let l = match self.hyper.kernel.kind {
                KernelKind::Matern32 => scales[0],
                KernelKind::Matern32Ard => scales[j],
            };
            xs[j] = (x[j] - m.shift) / m.scale * SQRT3 / l;
        }
        let mut acc = 0.0;
        for (row, a) in self.scaled_inputs.chunks_exact(d).zip(self.alpha.iter()) {
            let mut r2 = 0.0;
            for (u, v) in row.iter().zip(xs.iter()) {
                let t = u - v;
                r2 += t * t;
            }
            let s = r2.sqrt();
            acc += a * (1.0 + s) * (-s).exp();
        }
        let sf2 = self.hyper.kernel.signal_std * self.hyper.kernel.signal_std;
        self.target_map.shift + self.target_map.scale * sf2 * acc
    }

    fn predict_mean_slow(&self, x: &[f64]) -> f64 {
        let kx = self.cross_covariance(&self.normalize_input(x));
        self.target_map.shift + self.target_map.scale * kx.dot(&self.alpha)
    }

    /// Posterior variance, clamped at zero, in squared target units.
    pub fn predict_var(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim, "prediction input has wrong dimension");
        let xn = self.normalize_input(x);
        let mut v = self.cross_covariance(&xn);
        // Forward substitution with the lower factor: v ← L⁻¹ k*.
        let n = v.len();
        for i in 0..n {
            let mut s = v[i];
            for k in 0..i {
                s -= self.lower[[i, k]] * v[k];
            }
            v[i] = s / self.lower[[i, i]];
        }
        let prior = self.hyper.kernel.eval(&xn, &xn);
        let var = (prior - v.dot(&v)).max(0.0);
        var * self.target_map.scale * self.target_map.scale
    }
}

struct TrainingData {
    dim: usize,
    inputs: Vec<f64>,
    targets: Array1<f64>,
    input_maps: Vec<Affine>,
    target_map: Affine,
}

impl TrainingData {
    fn len(&self) -> usize {
        self.targets.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    fn prepare(x: ArrayView2<f64>, y: &[f64], normalize: bool) -> Result<Self, GprError> {
        let (p, dim) = x.dim();
        if p == 0 {
            return Err(GprError::Empty);
        }
        if p != y.len() {
            return Err(GprError::LengthMismatch {
                inputs: p,
                targets: y.len(),
            });
        }
        for i in 0..p {
            if !y[i].is_finite() || x.row(i).iter().any(|v| !v.is_finite()) {
                return Err(GprError::NonFinite(i));
            }
        }

        // Merge duplicate input rows by averaging their targets.
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| {
            x.row(a)
                .iter()
                .zip(x.row(b).iter())
                .map(|(u, v)| u.total_cmp(v))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut rows: Vec<f64> = Vec::with_capacity(p * dim);
        let mut targets: Vec<f64> = Vec::with_capacity(p);
        let mut count = 0usize;
        for (k, &i) in order.iter().enumerate() {
            let dup = k > 0 && x.row(order[k - 1]) == x.row(i);
            if dup {
                *targets.last_mut().unwrap() += y[i];
                count += 1;
            } else {
                if count > 1 {
                    *targets.last_mut().unwrap() /= count as f64;
                }
                rows.extend(x.row(i).iter());
                targets.push(y[i]);
                count = 1;
            }
        }
        if count > 1 {
            *targets.last_mut().unwrap() /= count as f64;
        }
        let n = targets.len();

        let (input_maps, target_map) = if normalize {
            let maps: Vec<Affine> = (0..dim)
                .map(|j| Affine::fit((0..n).map(|i| rows[i * dim + j])))
                .collect();
            (maps, Affine::fit(targets.iter().copied()))
        } else {
            (vec![Affine::identity(); dim], Affine::identity())
        };
        for i in 0..n {
            for j in 0..dim {
                let m = input_maps[j];
                rows[i * dim + j] = (rows[i * dim + j] - m.shift) / m.scale;
            }
        }
        let targets: Array1<f64> = targets
            .iter()
            .map(|v| (v - target_map.shift) / target_map.scale)
            .collect();
        Ok(Self {
            dim,
            inputs: rows,
            targets,
            input_maps,
            target_map,
        })
    }
}

fn scale_rows(inputs: &[f64], dim: usize, kernel: &KernelSpec) -> Vec<f64> {
    let mut out = inputs.to_vec();
    if dim == 0 {
        return out;
    }
    for row in out.chunks_exact_mut(dim) {
        for (j, v) in row.iter_mut().enumerate() {
            let l = match kernel.kind {
                KernelKind::Matern32 => kernel.length_scales[0],
                KernelKind::Matern32Ard => kernel.length_scales[j],
            };
            *v *= SQRT3 / l;
        }
    }
    out
}

fn gram_matrix(data: &TrainingData, kernel: &KernelSpec) -> Array2<f64> {
    let p = data.len();
    let mut k = Array2::zeros((p, p));
    let sf2 = kernel.signal_std * kernel.signal_std;
    for i in 0..p {
        k[[i, i]] = sf2;
        for j in 0..i {
            let v = kernel.eval(data.row(i), data.row(j));
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    k
}

type Factor = ndarray_linalg::cholesky::CholeskyFactorized<ndarray::OwnedRepr<f64>>;

/// Cholesky of `gram + noise·I`, adding diagonal jitter from 1e-10 up to 1e-4
/// when the plain factorization fails.
fn factorize_with_jitter(gram: &Array2<f64>, noise: f64) -> Result<(Factor, f64), GprError> {
    let p = gram.nrows();
    let mut jitter = 0.0;
    loop {
        let mut a = gram.clone();
        for i in 0..p {
            a[[i, i]] += noise + jitter;
        }
        if let Ok(f) = a.factorizec(UPLO::Lower) {
            if f.factor.diag().iter().all(|v| v.is_finite() && *v > 0.0) {
                return Ok((f, jitter));
            }
        }
        jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
        if jitter > 1e-4 * (1.0 + 1e-9) {
            return Err(GprError::Factorization { jitter: 1e-4 });
        }
    }
}

// θ layout: [ln σ_f, ln σ_l (one or per dimension)…, ln σ_n]
fn encode(h: &Hyperparameters) -> Vec<f64> {
    let mut t = vec![h.kernel.signal_std.ln()];
    t.extend(h.kernel.length_scales.iter().map(|l| l.ln()));
    t.push(h.noise_std.ln());
    t
}

fn decode(theta: &[f64], kind: KernelKind) -> Hyperparameters {
    let n = theta.len();
    Hyperparameters {
        kernel: KernelSpec {
            kind,
            signal_std: theta[0].exp(),
            length_scales: theta[1..n - 1].iter().map(|v| v.exp()).collect(),
        },
        noise_std: theta[n - 1].exp(),
    }
}

fn theta_bounds(n_scales: usize, noise_floor: f64) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![(1e-3f64).ln()];
    let mut hi = vec![(1e3f64).ln()];
    lo.extend(std::iter::repeat((1e-3f64).ln()).take(n_scales));
    hi.extend(std::iter::repeat((1e3f64).ln()).take(n_scales));
    lo.push(noise_floor.ln());
    hi.push(0.0);
    (lo, hi)
}

fn initial_theta(data: &TrainingData, kind: KernelKind) -> Vec<f64> {
    let p = data.len();
    let dim = data.dim;
    // Median pairwise distances over at most ~200 rows.
    let stride = (p / 200).max(1);
    let idx: Vec<usize> = (0..p).step_by(stride).collect();
    let median = |mut v: Vec<f64>| -> f64 {
        v.retain(|x| *x > 0.0);
        if v.is_empty() {
            return 1.0;
        }
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let mut theta = vec![0.0];
    match kind {
        KernelKind::Matern32 => {
            let mut d = Vec::new();
            for (a, &i) in idx.iter().enumerate() {
                for &j in &idx[..a] {
                    let r2: f64 = data
                        .row(i)
                        .iter()
                        .zip(data.row(j))
                        .map(|(u, v)| (u - v) * (u - v))
                        .sum();
                    d.push(r2.sqrt());
                }
            }
            theta.push(median(d).ln());
        }
        KernelKind::Matern32Ard => {
            for k in 0..dim {
                let mut d = Vec::new();
                for (a, &i) in idx.iter().enumerate() {
                    for &j in &idx[..a] {
                        d.push((data.row(i)[k] - data.row(j)[k]).abs());
                    }
                }
                theta.push((median(d) * (dim as f64).sqrt()).ln());
            }
        }
    }
    theta.push((1e-3f64).ln());
    theta
}

/// Log marginal likelihood and, optionally, its gradient with respect to θ.
fn likelihood(
    data: &TrainingData,
    kind: KernelKind,
    theta: &[f64],
    with_grad: bool,
) -> Result<(f64, Vec<f64>), GprError> {
    let hyper = decode(theta, kind);
    let p = data.len();
    let gram = gram_matrix(data, &hyper.kernel);
    let noise = hyper.noise_std * hyper.noise_std;
    let (factor, _) = factorize_with_jitter(&gram, noise)?;
    let alpha = factor
        .solvec(&data.targets)
        .map_err(|_| GprError::Factorization { jitter: 0.0 })?;
    let log_det: f64 = factor.factor.diag().iter().map(|v| 2.0 * v.ln()).sum();
    let ll = -0.5 * data.targets.dot(&alpha) - 0.5 * log_det - 0.5 * p as f64 * (2.0 * PI).ln();
    if !with_grad {
        return Ok((ll, Vec::new()));
    }

    let inv = factor
        .invc()
        .map_err(|_| GprError::Factorization { jitter: 0.0 })?;
    // ∂ll/∂θ = ½ Σ_ab (αα′ − K⁻¹)_ab ∂K_ab/∂θ
    let n_theta = theta.len();
    let mut grad = vec![0.0; n_theta];
    let sf2 = hyper.kernel.signal_std * hyper.kernel.signal_std;
    let scales = &hyper.kernel.length_scales;
    let dim = data.dim;
    let mut trace_w = 0.0;
    for a in 0..p {
        let w_aa = alpha[a] * alpha[a] - inv[[a, a]];
        trace_w += w_aa;
        grad[0] += w_aa * 2.0 * sf2;
        for b in 0..a {
            let w = 2.0 * (alpha[a] * alpha[b] - inv[[a, b]]);
            let (ra, rb) = (data.row(a), data.row(b));
            match kind {
                KernelKind::Matern32 => {
                    let r2: f64 = ra.iter().zip(rb).map(|(u, v)| (u - v) * (u - v)).sum();
                    let s = SQRT3 * r2.sqrt() / scales[0];
                    let e = (-s).exp();
                    grad[0] += w * 2.0 * sf2 * (1.0 + s) * e;
                    grad[1] += w * sf2 * s * s * e;
                }
                KernelKind::Matern32Ard => {
                    let mut q = 0.0;
                    for k in 0..dim {
                        let t = (ra[k] - rb[k]) / scales[k];
                        q += t * t;
                    }
                    let s = (3.0 * q).sqrt();
                    let e = (-s).exp();
                    grad[0] += w * 2.0 * sf2 * (1.0 + s) * e;
                    for k in 0..dim {
                        let t = (ra[k] - rb[k]) / scales[k];
                        grad[1 + k] += w * sf2 * e * 3.0 * t * t;
                    }
                }
            }
        }
    }
    grad[n_theta - 1] = trace_w * 2.0 * noise;
    for g in &mut grad {
        *g *= 0.5;
    }
    Ok((ll, grad))
}

/// Bounded BFGS ascent. Returns the final point, its value, and the number
/// of function evaluations.
///
/// `f(θ, true)` must return the gradient; line-search trials call
/// `f(θ, false)` and only an accepted trial is re-evaluated with it.
fn ascend<F>(
    mut f: F,
    x0: Vec<f64>,
    lo: &[f64],
    hi: &[f64],
    max_iters: usize,
    grad_tol: f64,
    ll_tol: f64,
) -> (Vec<f64>, f64, usize)
where
    F: FnMut(&[f64], bool) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut evals = 1usize;
    let (mut fx, mut gx) = match f(&x0, true) {
        Some(v) => v,
        None => return (x0, f64::NEG_INFINITY, evals),
    };
    let mut x = x0;
    let identity = |scale: f64| {
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            h[i * n + i] = scale;
        }
        h
    };
    let gnorm = gx.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut h = identity(1.0 / gnorm.max(1.0));

    for _ in 0..max_iters {
        // Variables pinned at a bound with the gradient pushing outward are frozen.
        let free: Vec<bool> = (0..n)
            .map(|i| !((x[i] <= lo[i] && gx[i] < 0.0) || (x[i] >= hi[i] && gx[i] > 0.0)))
            .collect();
        let pg: f64 = (0..n)
            .filter(|&i| free[i])
            .map(|i| gx[i] * gx[i])
            .sum::<f64>()
            .sqrt();
        if pg < grad_tol {
            break;
        }
        let mut dir: Vec<f64> = (0..n)
            .map(|i| {
                if !free[i] {
                    return 0.0;
                }
                (0..n).filter(|&j| free[j]).map(|j| h[i * n + j] * gx[j]).sum()
            })
            .collect();
        let mut slope: f64 = dir.iter().zip(&gx).map(|(d, g)| d * g).sum();
        if slope <= 0.0 {
            h = identity(1.0 / pg.max(1.0));
            dir = (0..n).map(|i| if free[i] { h[i * n + i] * gx[i] } else { 0.0 }).collect();
            slope = dir.iter().zip(&gx).map(|(d, g)| d * g).sum();
        }
        let _ = slope;

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let trial: Vec<f64> = (0..n)
                .map(|i| (x[i] + step * dir[i]).clamp(lo[i], hi[i]))
                .collect();
            let gain: f64 = (0..n).map(|i| gx[i] * (trial[i] - x[i])).sum();
            evals += 1;
            if let Some((ft, _)) = f(&trial, false) {
                if ft.is_finite() && ft >= fx + 1e-4 * gain.max(0.0) && ft >= fx {
                    if let Some((ft, gt)) = f(&trial, true) {
                        accepted = Some((trial, ft, gt));
                        break;
                    }
                }
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            break;
        };
        let s: Vec<f64> = (0..n).map(|i| xn[i] - x[i]).collect();
        // Minimization convention for the curvature pair.
        let y: Vec<f64> = (0..n).map(|i| gx[i] - gnew[i]).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..n)
                .map(|i| (0..n).map(|j| h[i * n + j] * y[j]).sum())
                .collect();
            let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j])
                        + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
        }
        let improvement = fnew - fx;
        let step_norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        x = xn;
        fx = fnew;
        gx = gnew;
        if improvement < ll_tol || step_norm < 1e-9 {
            break;
        }
    }
    (x, fx, evals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn kernel_at_zero_distance_is_signal_variance() {
        let k = KernelSpec::matern32(1.7, 0.4);
        assert!((k.eval(&[1.0, 2.0], &[1.0, 2.0]) - 1.7 * 1.7).abs() < 1e-14);
    }

    #[test]
    fn kernel_unit_distance() {
        let k = KernelSpec::matern32(1.0, 1.0);
        let expected = (1.0 + SQRT3) * (-SQRT3).exp();
        assert!((k.eval(&[0.0], &[1.0]) - expected).abs() < 1e-15);
        assert!((expected - 0.483_357_7).abs() < 1e-6);
    }

    #[test]
    fn ard_with_equal_scales_matches_isotropic() {
        let iso = KernelSpec::matern32(0.8, 0.6);
        let ard = KernelSpec::matern32_ard(0.8, vec![0.6; 3]);
        let pairs = [
            ([0.1, 0.2, 0.3], [0.5, -0.2, 1.0]),
            ([1.0, 1.0, 1.0], [1.0, 1.0, 1.0]),
            ([-2.0, 0.0, 3.0], [0.0, 0.7, 0.1]),
        ];
        for (a, b) in pairs {
            assert!((iso.eval(&a, &b) - ard.eval(&a, &b)).abs() < 1e-15);
        }
    }

    #[test]
    fn single_point_closed_forms() {
        let (sf, sn, y1) = (1.3, 0.4, 2.5);
        let hyper = Hyperparameters {
            kernel: KernelSpec::matern32(sf, 0.7),
            noise_std: sn,
        };
        let x = array![[0.3, -0.2]];
        let m = GprModel::with_hyperparameters(x.view(), &[y1], hyper, false).unwrap();
        let sf2 = sf * sf;
        let sn2 = sn * sn;
        assert!((m.predict_mean(&[0.3, -0.2]) - sf2 / (sf2 + sn2) * y1).abs() < 1e-12);
        assert!((m.predict_var(&[0.3, -0.2]) - (sf2 - sf2 * sf2 / (sf2 + sn2))).abs() < 1e-12);
    }

    #[test]
    fn far_field_reverts_to_prior() {
        let hyper = Hyperparameters {
            kernel: KernelSpec::matern32(1.1, 0.5),
            noise_std: 1e-4,
        };
        let x = array![[0.0], [0.5], [1.0]];
        let m = GprModel::with_hyperparameters(x.view(), &[1.0, 3.0, -2.0], hyper, false).unwrap();
        assert!(m.predict_mean(&[200.0]).abs() < 1e-6);
        assert!((m.predict_var(&[200.0]) - 1.21).abs() < 1e-6);
    }

    #[test]
    fn duplicates_are_merged() {
        let x = array![[1.0], [2.0], [1.0], [3.0]];
        let m = GprModel::fit(
            x.view(),
            &[1.0, 2.0, 3.0, 4.0],
            KernelKind::Matern32,
            &GprConfig::default(),
            None,
        )
        .unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.diagnostics().unique_points, 3);
    }

    #[test]
    fn constant_targets_predict_the_constant() {
        let x = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let m = GprModel::fit(
            x.view(),
            &[4.2; 4],
            KernelKind::Matern32,
            &GprConfig::default(),
            None,
        )
        .unwrap();
        for q in [[0.5, 0.5], [0.1, 0.9], [1.0, 0.0]] {
            assert!((m.predict_mean(&q) - 4.2).abs() < 1e-6);
        }
    }

    #[test]
    fn error_paths() {
        let empty = Array2::<f64>::zeros((0, 1));
        assert_eq!(
            GprModel::fit(empty.view(), &[], KernelKind::Matern32, &GprConfig::default(), None)
                .unwrap_err(),
            GprError::Empty
        );
        let x = array![[0.0], [1.0]];
        assert!(matches!(
            GprModel::fit(x.view(), &[1.0], KernelKind::Matern32, &GprConfig::default(), None),
            Err(GprError::LengthMismatch { .. })
        ));
        assert!(matches!(
            GprModel::fit(x.view(), &[1.0, f64::NAN], KernelKind::Matern32, &GprConfig::default(), None),
            Err(GprError::NonFinite(1))
        ));
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let x = Array2::from_shape_fn((12, 2), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 3.0);
        let y: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        for kind in [KernelKind::Matern32, KernelKind::Matern32Ard] {
            let data = TrainingData::prepare(x.view(), &y, true).unwrap();
            let theta = match kind {
                KernelKind::Matern32 => vec![0.1, -0.3, -2.0],
                KernelKind::Matern32Ard => vec![0.1, -0.3, 0.2, -2.0],
            };
            let (_, g) = likelihood(&data, kind, &theta, true).unwrap();
            for k in 0..theta.len() {
                let h = 1e-6;
                let mut tp = theta.clone();
                tp[k] += h;
                let mut tm = theta.clone();
                tm[k] -= h;
                let fd = (likelihood(&data, kind, &tp, false).unwrap().0
                    - likelihood(&data, kind, &tm, false).unwrap().0)
                    / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-5 * (1.0 + fd.abs()), "{kind:?} θ{k}: {fd} vs {}", g[k]);
            }
        }
    }
}
