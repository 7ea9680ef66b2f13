//! Backward induction with per-point worst-case optimization and GPR
//! regression of each time slice.
//!
//! At every step `n = N−1, …, 1` the engine places `P` states, solves the
//! worst-case one-step problem at each of them, and fits a regressor to the
//! resulting values. The regressor for slice `n+1` is the continuation used
//! at slice `n`; at `n = N−1` the exact payoff is used instead.

use std::sync::Once;
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correlation::{gamma_from_slice, pair_count, CorrelationError};
use crate::gpr::{GprConfig, GprError, GprModel, Hyperparameters, KernelKind};
use crate::lowdisc::{inv_norm_cdf, Halton};
use crate::sqp::{maximize_screened, standard_starts, vertex_candidates, ParamBox, SqpConfig, UvmPoint};
use crate::treestep::{branch_seed, make_branches, step_expectation, BranchSet, TreeError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("invalid model: {0}")]
    Model(String),
    #[error("invalid payoff: {0}")]
    Payoff(String),
    #[error("invalid algorithm parameters: {0}")]
    Algo(String),
    #[error(transparent)]
    Correlation(#[from] CorrelationError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("regression failed at time step {n}: {source}")]
    Regression { n: usize, source: GprError },
    #[error("optimization failed at time step {n}, grid point {p}: {message}")]
    Point { n: usize, p: usize, message: String },
}

/// Market model with interval bounds on volatilities and correlations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub spot: Vec<f64>,
    pub rate: f64,
    pub dividends: Vec<f64>,
    pub sigma_min: Vec<f64>,
    pub sigma_max: Vec<f64>,
    /// Pairwise bounds in the flattened order of [`crate::correlation::pairs`].
    pub rho_min: Vec<f64>,
    pub rho_max: Vec<f64>,
    pub maturity: f64,
}

impl ModelSpec {
    /// `d` assets at 100 with `σ ∈ [0.1, 0.2]`, `ρ ∈ [−0.5, 0.5]`, zero rate
    /// and dividends, one-year maturity.
    pub fn reference(d: usize) -> Self {
        let np = pair_count(d);
        Self {
            spot: vec![100.0; d],
            rate: 0.0,
            dividends: vec![0.0; d],
            sigma_min: vec![0.1; d],
            sigma_max: vec![0.2; d],
            rho_min: vec![-0.5; np],
            rho_max: vec![0.5; np],
            maturity: 1.0,
        }
    }

    /// Pins every correlation to `rho`.
    pub fn with_fixed_correlation(mut self, rho: f64) -> Self {
        let np = pair_count(self.dim());
        self.rho_min = vec![rho; np];
        self.rho_max = vec![rho; np];
        self
    }

    /// Pins the correlations to the given vector.
    pub fn with_correlations(mut self, rho: Vec<f64>) -> Self {
        self.rho_min = rho.clone();
        self.rho_max = rho;
        self
    }

    pub fn dim(&self) -> usize {
        self.spot.len()
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let d = self.dim();
        let bad = |m: String| Err(EngineError::Model(m));
        if d == 0 {
            return bad("at least one asset is required".into());
        }
        let np = pair_count(d);
        if self.dividends.len() != d || self.sigma_min.len() != d || self.sigma_max.len() != d {
            return bad(format!("spot, dividends and sigma bounds must all have length {d}"));
        }
        if self.rho_min.len() != np || self.rho_max.len() != np {
            return bad(format!("correlation bounds must have length {np} for {d} assets"));
        }
        if !(self.maturity > 0.0 && self.maturity.is_finite()) {
            return bad(format!("maturity must be positive, got {}", self.maturity));
        }
        if !self.rate.is_finite() || self.dividends.iter().any(|v| !v.is_finite()) {
            return bad("rate and dividends must be finite".into());
        }
        for i in 0..d {
            if !(self.spot[i] > 0.0 && self.spot[i].is_finite()) {
                return bad(format!("spot[{i}] must be positive, got {}", self.spot[i]));
            }
            let (a, b) = (self.sigma_min[i], self.sigma_max[i]);
            if !(a > 0.0 && a <= b && b.is_finite()) {
                return bad(format!("sigma bounds for asset {i} need 0 < min <= max, got [{a}, {b}]"));
            }
        }
        for k in 0..np {
            let (a, b) = (self.rho_min[k], self.rho_max[k]);
            if !(-1.0 <= a && a <= b && b <= 1.0) {
                return bad(format!("rho bounds for pair {k} need -1 <= min <= max <= 1, got [{a}, {b}]"));
            }
        }
        Ok(())
    }

    pub fn bounds(&self) -> ParamBox {
        ParamBox {
            sigma_min: self.sigma_min.clone(),
            sigma_max: self.sigma_max.clone(),
            rho_min: self.rho_min.clone(),
            rho_max: self.rho_max.clone(),
        }
    }

    pub fn sigma_avg(&self) -> Vec<f64> {
        self.sigma_min
            .iter()
            .zip(&self.sigma_max)
            .map(|(a, b)| 0.5 * (a + b))
            .collect()
    }

    pub fn rho_avg(&self) -> Vec<f64> {
        self.rho_min
            .iter()
            .zip(&self.rho_max)
            .map(|(a, b)| 0.5 * (a + b))
            .collect()
    }

    /// Square root of the average correlation matrix, repaired to PSD first.
    pub fn avg_correlation_root(&self) -> Result<Array2<f64>, EngineError> {
        let g = gamma_from_slice(self.dim(), &self.rho_avg()).nearest_psd()?;
        Ok(g.sqrt()?)
    }
}

/// Terminal payoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PayoffSpec {
    /// `(S² − S¹)⁺`.
    Outperformer,
    /// `(S² − lo·S¹)⁺ − (S² − hi·S¹)⁺`.
    OutperformerSpread { lo: f64, hi: f64 },
    /// `(G − K1)⁺ − (G − K2)⁺` on the geometric mean `G` of all assets.
    GeoCallSpread { k1: f64, k2: f64 },
    /// `(geomean(S², …, S^d) − S¹)⁺`.
    GeoOutperformer,
    /// `(S − K)⁺ / √V_T` with `V_T` the annualized sum of squared monthly log-returns.
    CallSharpe { strike: f64, months: usize },
    /// Single-asset `(S − K)⁺`.
    Call { strike: f64 },
}

impl PayoffSpec {
    pub fn outperformer_spread() -> Self {
        PayoffSpec::OutperformerSpread { lo: 0.9, hi: 1.1 }
    }

    pub fn is_path_dependent(&self) -> bool {
        matches!(self, PayoffSpec::CallSharpe { .. })
    }

    pub fn validate(&self, model: &ModelSpec) -> Result<(), EngineError> {
        let d = model.dim();
        let bad = |m: String| Err(EngineError::Payoff(m));
        match *self {
            PayoffSpec::Outperformer if d != 2 => bad(format!("outperformer needs 2 assets, got {d}")),
            PayoffSpec::OutperformerSpread { lo, hi } => {
                if d != 2 {
                    bad(format!("outperformer spread needs 2 assets, got {d}"))
                } else if !(lo > 0.0 && lo < hi) {
                    bad(format!("outperformer spread needs 0 < lo < hi, got {lo}, {hi}"))
                } else {
                    Ok(())
                }
            }
            PayoffSpec::GeoCallSpread { k1, k2 } if !(k1 > 0.0 && k1 < k2) => {
                bad(format!("geometric call spread needs 0 < k1 < k2, got {k1}, {k2}"))
            }
            PayoffSpec::GeoOutperformer if d < 2 => {
                bad(format!("geometric outperformer needs at least 2 assets, got {d}"))
            }
            PayoffSpec::CallSharpe { strike, months } => {
                if d != 1 {
                    bad(format!("call Sharpe is single-asset, got {d} assets"))
                } else if !(strike > 0.0) {
                    bad(format!("strike must be positive, got {strike}"))
                } else if months == 0 || (12.0 * model.maturity - months as f64).abs() > 1e-9 {
                    bad(format!(
                        "months must equal 12·maturity = {}, got {months}",
                        12.0 * model.maturity
                    ))
                } else {
                    Ok(())
                }
            }
            PayoffSpec::Call { strike } => {
                if d != 1 {
                    bad(format!("vanilla call is single-asset, got {d} assets"))
                } else if !(strike > 0.0) {
                    bad(format!("strike must be positive, got {strike}"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Dimension of the terminal state vector.
    fn terminal_dim(&self, assets: usize) -> usize {
        match self {
            PayoffSpec::CallSharpe { .. } => 2,
            _ => assets,
        }
    }
}

fn geo_mean(s: &[f64]) -> f64 {
    (s.iter().map(|v| v.ln()).sum::<f64>() / s.len() as f64).exp()
}

/// Payoff at a state of the right dimension; no checks.
fn payoff_value(spec: &PayoffSpec, x: &[f64], maturity: f64) -> f64 {
    match *spec {
        PayoffSpec::Outperformer => (x[1] - x[0]).max(0.0),
        PayoffSpec::OutperformerSpread { lo, hi } => {
            (x[1] - lo * x[0]).max(0.0) - (x[1] - hi * x[0]).max(0.0)
        }
        PayoffSpec::GeoCallSpread { k1, k2 } => {
            let g = geo_mean(x);
            (g - k1).max(0.0) - (g - k2).max(0.0)
        }
        PayoffSpec::GeoOutperformer => (geo_mean(&x[1..]) - x[0]).max(0.0),
        PayoffSpec::CallSharpe { strike, .. } => {
            let v = (x[1] / maturity).max(1e-12);
            (x[0] - strike).max(0.0) / v.sqrt()
        }
        PayoffSpec::Call { strike } => (x[0] - strike).max(0.0),
    }
}

/// Exact payoff at a terminal state. For the Call Sharpe the state is
/// `(S_T, A1_T)` with `A1_T` already including the final month.
pub fn payoff_eval(spec: &PayoffSpec, state: &[f64], maturity: f64) -> Result<f64, EngineError> {
    let expected = match spec {
        PayoffSpec::Outperformer | PayoffSpec::OutperformerSpread { .. } => Some(2),
        PayoffSpec::CallSharpe { .. } => Some(2),
        PayoffSpec::Call { .. } => Some(1),
        PayoffSpec::GeoCallSpread { .. } => None,
        PayoffSpec::GeoOutperformer => None,
    };
    let ok = match expected {
        Some(e) => state.len() == e,
        None => match spec {
            PayoffSpec::GeoOutperformer => state.len() >= 2,
            _ => !state.is_empty(),
        },
    };
    if !ok {
        return Err(EngineError::Payoff(format!(
            "state of dimension {} does not fit this payoff",
            state.len()
        )));
    }
    if state.iter().any(|v| !v.is_finite()) {
        return Err(EngineError::Payoff("state has non-finite entries".into()));
    }
    Ok(payoff_value(spec, state, maturity))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgoParams {
    /// Number of time steps `N`.
    pub steps: usize,
    /// Grid points per time step `P`.
    pub points: usize,
    /// Tree branches `M`; `None` enumerates all `2^d`.
    pub branches: Option<usize>,
    pub seed: u64,
    /// Defaults to ARD for the Call Sharpe and isotropic otherwise.
    pub kernel: Option<KernelKind>,
    pub sqp: SqpConfig,
    pub gpr: GprConfig,
    /// Start each slice's hyperparameter search from the previous slice's optimum.
    pub warm_start: bool,
    /// Box vertices screened before each local SQP solve; 0 disables screening.
    pub screen_vertices: usize,
}

impl Default for AlgoParams {
    fn default() -> Self {
        Self {
            steps: 16,
            points: 125,
            branches: None,
            seed: 0,
            kernel: None,
            sqp: SqpConfig::default(),
            gpr: GprConfig::default(),
            warm_start: true,
            screen_vertices: 64,
        }
    }
}

impl AlgoParams {
    pub fn new(steps: usize, points: usize) -> Self {
        Self {
            steps,
            points,
            ..Self::default()
        }
    }

    fn validate(&self, model: &ModelSpec, payoff: &PayoffSpec) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::Algo(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.points == 0 {
            return bad("points must be at least 1".into());
        }
        if let PayoffSpec::CallSharpe { months, .. } = payoff {
            if self.steps % months != 0 {
                return bad(format!(
                    "steps ({}) must be a multiple of the number of months ({months})",
                    self.steps
                ));
            }
        } else if let Some(m) = self.branches {
            let d = model.dim();
            let full = if d < 63 { 1u64 << d } else { u64::MAX };
            if m < 2 || m % 2 == 1 || m as u64 > full {
                return bad(format!("branches must be even with 2 <= M <= 2^{d}, got {m}"));
            }
        }
        Ok(())
    }

    fn kernel_for(&self, payoff: &PayoffSpec) -> KernelKind {
        self.kernel.unwrap_or(if payoff.is_path_dependent() {
            KernelKind::Matern32Ard
        } else {
            KernelKind::Matern32
        })
    }
}

/// Value function used one step ahead of the slice being solved.
#[derive(Debug, Clone, Copy)]
pub enum Continuation<'a> {
    Payoff(&'a PayoffSpec, f64),
    Model(&'a GprModel),
}

impl Continuation<'_> {
    /// Regression undershoot is floored at zero; every payoff in scope is nonnegative.
    pub fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            Continuation::Payoff(p, maturity) => payoff_value(p, x, maturity),
            Continuation::Model(m) => m.predict_mean(x).max(0.0),
        }
    }
}

/// `P` quasi-random states at time `t` under the average parameters.
///
/// Each row is `S0_i exp((r − η_i − σ̄_i²/2)t + σ̄_i √t (Σ̄ Φ⁻¹(h^p))_i)` for
/// the Halton points `h^first, …, h^(first+P−1)`.
pub fn build_grid(model: &ModelSpec, t: f64, first: u64, points: usize) -> Result<Array2<f64>, EngineError> {
    model.validate()?;
    let d = model.dim();
    let root = model.avg_correlation_root()?;
    let sig = model.sigma_avg();
    let halton = Halton::starting_at(d, first).map_err(|e| EngineError::Model(e.to_string()))?;
    let sq = t.max(0.0).sqrt();
    let mut out = Array2::zeros((points, d));
    let mut z = vec![0.0; d];
    for (p, h) in halton.take(points).enumerate() {
        for i in 0..d {
            z[i] = inv_norm_cdf(h[i]).map_err(|e| EngineError::Model(e.to_string()))?;
        }
        for i in 0..d {
            let y: f64 = (0..d).map(|k| root[[i, k]] * z[k]).sum();
            let drift = (model.rate - model.dividends[i] - 0.5 * sig[i] * sig[i]) * t;
            out[[p, i]] = model.spot[i] * (drift + sig[i] * sq * y).exp();
        }
    }
    Ok(out)
}

fn steps_per_month(steps: usize, months: usize) -> usize {
    steps / months
}

fn is_monitoring(n: usize, spm: usize) -> bool {
    n % spm == 0
}

/// Simulated path states for the Call Sharpe, one matrix per time index
/// `n = 0, …, N`.
///
/// Rows are `(S, A1)` at monitoring dates and `(S, A1, A2)` in between, where
/// `A1` sums squared monthly log-returns so far and `A2` is the spot at the
/// last monitoring date.
pub fn mc_grid(
    model: &ModelSpec,
    steps: usize,
    paths: usize,
    months: usize,
    seed: u64,
) -> Result<Vec<Array2<f64>>, EngineError> {
    model.validate()?;
    if model.dim() != 1 {
        return Err(EngineError::Model("path grids are single-asset".into()));
    }
    if months == 0 || steps == 0 || steps % months != 0 {
        return Err(EngineError::Algo(format!(
            "steps ({steps}) must be a positive multiple of months ({months})"
        )));
    }
    let spm = steps_per_month(steps, months);
    let dt = model.maturity / steps as f64;
    let sig = model.sigma_avg()[0];
    let drift = (model.rate - model.dividends[0] - 0.5 * sig * sig) * dt;
    let vol = sig * dt.sqrt();
    let mut grids: Vec<Array2<f64>> = (0..=steps)
        .map(|n| Array2::zeros((paths, if is_monitoring(n, spm) { 2 } else { 3 })))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in 0..paths {
        let mut s = model.spot[0];
        let mut a1 = 0.0;
        let mut last = s;
        grids[0][[p, 0]] = s;
        for (n, grid) in grids.iter_mut().enumerate().skip(1) {
            let z: f64 = StandardNormal.sample(&mut rng);
            s *= (drift + vol * z).exp();
            if is_monitoring(n, spm) {
                let lr = (s / last).ln();
                a1 += lr * lr;
                last = s;
                grid[[p, 0]] = s;
                grid[[p, 1]] = a1;
            } else {
                grid[[p, 0]] = s;
                grid[[p, 1]] = a1;
                grid[[p, 2]] = last;
            }
        }
    }
    Ok(grids)
}

/// State at `n + 1` reached from `x` (state at `n`) when the spot moves to `s_next`.
fn sharpe_transition(x: &[f64], s_next: f64, n: usize, spm: usize, out: &mut [f64; 3]) -> usize {
    let last = if x.len() == 2 { x[0] } else { x[2] };
    if is_monitoring(n + 1, spm) {
        let lr = (s_next / last).ln();
        out[0] = s_next;
        out[1] = x[1] + lr * lr;
        2
    } else {
        out[0] = s_next;
        out[1] = x[1];
        out[2] = last;
        3
    }
}

struct StepContext<'a> {
    model: &'a ModelSpec,
    payoff: &'a PayoffSpec,
    algo: &'a AlgoParams,
    bounds: ParamBox,
    starts: Vec<UvmPoint>,
    candidates: Vec<UvmPoint>,
    dt: f64,
    full_branches: Option<BranchSet>,
}

impl<'a> StepContext<'a> {
    fn new(model: &'a ModelSpec, payoff: &'a PayoffSpec, algo: &'a AlgoParams) -> Result<Self, EngineError> {
        let bounds = model.bounds();
        let starts = standard_starts(&bounds, algo.sqp.tol_constraint).map_err(EngineError::Model)?;
        let candidates =
            vertex_candidates(&bounds, algo.sqp.tol_constraint, algo.screen_vertices).map_err(EngineError::Model)?;
        let d = model.dim();
        let full_branches = if payoff.is_path_dependent() {
            None
        } else {
            let full = 1usize << d.min(20);
            match algo.branches {
                None => Some(make_branches(d, full, 0)?),
                Some(m) if m == full => Some(make_branches(d, full, 0)?),
                Some(_) => None,
            }
        };
        Ok(Self {
            model,
            payoff,
            algo,
            bounds,
            starts,
            candidates,
            dt: model.maturity / algo.steps as f64,
            full_branches,
        })
    }

    fn solve(&self, x: &[f64], n: usize, p: usize, next: &Continuation) -> Result<PointSolution, EngineError> {
        let point_err = |message: String| EngineError::Point { n, p, message };
        let outcome = if let PayoffSpec::CallSharpe { months, .. } = *self.payoff {
            let spm = steps_per_month(self.algo.steps, months);
            let (r, eta, dt) = (self.model.rate, self.model.dividends[0], self.dt);
            let disc = (-r * dt).exp();
            let objective = |c: &UvmPoint| -> Result<f64, TreeError> {
                let s = c.sigma[0];
                let drift = (r - eta - 0.5 * s * s) * dt;
                let v = s * dt.sqrt();
                let mut buf = [0.0; 3];
                let mut acc = 0.0;
                for sign in [1.0, -1.0] {
                    let len = sharpe_transition(x, x[0] * (drift + sign * v).exp(), n, spm, &mut buf);
                    acc += next.eval(&buf[..len]);
                }
                Ok(disc * 0.5 * acc)
            };
            maximize_screened(objective, &self.bounds, &self.starts, &self.candidates, &self.algo.sqp)
        } else {
            let owned;
            let branches = match &self.full_branches {
                Some(b) => b,
                None => {
                    let m = self.algo.branches.unwrap_or(2);
                    owned = make_branches(self.model.dim(), m, branch_seed(self.algo.seed, n, p))?;
                    &owned
                }
            };
            let objective = |c: &UvmPoint| step_expectation(x, c, self.dt, self.model, branches, |y| next.eval(y));
            maximize_screened(objective, &self.bounds, &self.starts, &self.candidates, &self.algo.sqp)
        }
        .map_err(|e| point_err(e.to_string()))?;
        if !outcome.value.is_finite() {
            return Err(point_err(format!("non-finite value {}", outcome.value)));
        }
        Ok(PointSolution {
            value: outcome.value,
            argmax: outcome.point,
            iterations: outcome.iterations,
            evaluations: outcome.evaluations,
        })
    }
}

struct PointSolution {
    value: f64,
    argmax: UvmPoint,
    iterations: usize,
    evaluations: usize,
}

/// Worst-case discounted one-step value at `state` (time index `n`) and the
/// maximizing parameters. `p` only selects the branch subsample.
pub fn point_value(
    state: &[f64],
    n: usize,
    p: usize,
    model: &ModelSpec,
    payoff: &PayoffSpec,
    next: &Continuation,
    algo: &AlgoParams,
) -> Result<(f64, UvmPoint), EngineError> {
    model.validate()?;
    payoff.validate(model)?;
    algo.validate(model, payoff)?;
    let ctx = StepContext::new(model, payoff, algo)?;
    let sol = ctx.solve(state, n, p, next)?;
    Ok((sol.value, sol.argmax))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub n: usize,
    pub seconds: f64,
    /// Distinct training states after duplicate merging; 1 at `n = 0`.
    pub points: usize,
    pub sqp_iterations: usize,
    pub sqp_evaluations: usize,
    pub mean_value: f64,
    pub hyperparameters: Option<Hyperparameters>,
    pub log_likelihood: Option<f64>,
    /// Likelihood evaluations spent fitting this slice's regression.
    pub gpr_evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceReport {
    pub value: f64,
    /// Maximizing parameters at `t = 0`.
    pub argmax: UvmPoint,
    /// Ordered from `n = N−1` down to `0`.
    pub steps: Vec<StepReport>,
    pub total_seconds: f64,
}

static BLAS_THREADS: Once = Once::new();

extern "C" {
    fn openblas_set_num_threads(n: std::os::raw::c_int);
}

/// Grid points are already solved in parallel; BLAS threads on top would
/// oversubscribe and make factorizations depend on the machine's thread count.
fn single_threaded_blas() {
    // SAFETY: plain setter in the linked OpenBLAS; called once before any factorization.
    BLAS_THREADS.call_once(|| unsafe { openblas_set_num_threads(1) });
}

/// Worst-case price by backward induction.
pub fn price(model: &ModelSpec, payoff: &PayoffSpec, algo: &AlgoParams) -> Result<PriceReport, EngineError> {
    model.validate()?;
    payoff.validate(model)?;
    algo.validate(model, payoff)?;
    single_threaded_blas();
    let started = Instant::now();
    let ctx = StepContext::new(model, payoff, algo)?;
    let kernel = algo.kernel_for(payoff);
    let n_steps = algo.steps;

    let paths = match payoff {
        PayoffSpec::CallSharpe { months, .. } => {
            Some(mc_grid(model, n_steps, algo.points, *months, algo.seed)?)
        }
        _ => None,
    };

    let mut reports = Vec::with_capacity(n_steps);
    let mut next_model: Option<GprModel> = None;
    // Warm starts are kept per state dimension.
    let mut warm: Vec<Option<Hyperparameters>> = vec![None; 4];

    for n in (0..n_steps).rev() {
        let step_start = Instant::now();
        let states: Array2<f64> = if n == 0 {
            let x0 = if paths.is_some() {
                vec![model.spot[0], 0.0]
            } else {
                model.spot.clone()
            };
            Array2::from_shape_vec((1, x0.len()), x0).expect("row shape")
        } else if let Some(grids) = &paths {
            grids[n].clone()
        } else {
            // Slices take consecutive blocks of the sequence, so step n uses
            // indices (n−1)P+1 … nP.
            build_grid(model, n as f64 * ctx.dt, 1 + ((n - 1) * algo.points) as u64, algo.points)?
        };
        let next = match &next_model {
            Some(m) => Continuation::Model(m),
            None => Continuation::Payoff(payoff, model.maturity),
        };
        debug_assert!(next_model.is_some() || n + 1 == n_steps);
        debug_assert_eq!(
            payoff.terminal_dim(model.dim()),
            if paths.is_some() { 2 } else { model.dim() }
        );

        let rows: Vec<Vec<f64>> = states.outer_iter().map(|r| r.to_vec()).collect();
        let solutions: Vec<PointSolution> = rows
            .par_iter()
            .enumerate()
            .map(|(p, x)| ctx.solve(x, n, p, &next))
            .collect::<Result<_, _>>()?;
        let values: Vec<f64> = solutions.iter().map(|s| s.value).collect();
        let sqp_iterations = solutions.iter().map(|s| s.iterations).sum();
        let sqp_evaluations = solutions.iter().map(|s| s.evaluations).sum();
        let mean_value = values.iter().sum::<f64>() / values.len() as f64;

        if n == 0 {
            let sol = &solutions[0];
            reports.push(StepReport {
                n,
                seconds: step_start.elapsed().as_secs_f64(),
                points: 1,
                sqp_iterations,
                sqp_evaluations,
                mean_value,
                hyperparameters: None,
                log_likelihood: None,
                gpr_evaluations: 0,
            });
            return Ok(PriceReport {
                value: sol.value,
                argmax: sol.argmax.clone(),
                steps: reports,
                total_seconds: started.elapsed().as_secs_f64(),
            });
        }

        let dim = states.ncols();
        let warm_hyper = if algo.warm_start { warm[dim.min(3)].as_ref() } else { None };
        let fitted = GprModel::fit(states.view(), &values, kernel, &algo.gpr, warm_hyper)
            .map_err(|source| EngineError::Regression { n, source })?;
        warm[dim.min(3)] = Some(fitted.hyperparameters().clone());
        reports.push(StepReport {
            n,
            seconds: step_start.elapsed().as_secs_f64(),
            points: fitted.len(),
            sqp_iterations,
            sqp_evaluations,
            mean_value,
            hyperparameters: Some(fitted.hyperparameters().clone()),
            log_likelihood: Some(fitted.diagnostics().log_likelihood),
            gpr_evaluations: fitted.diagnostics().evaluations,
        });
        next_model = Some(fitted);
    }
    unreachable!("the loop returns at n = 0")
}
