//! Property checks shared by the proptest suite and the acceptance run.
#![allow(dead_code)]

use ndarray::Array2;
use ndarray_linalg::{Eigh, UPLO};
use uvm_core::bench::{bs_price, OptionKind};
use uvm_core::correlation::{build_gamma, pair_count, CorrMatrix, CorrParams, PSD_TOL};
use uvm_core::engine::{price, AlgoParams, ModelSpec, PayoffSpec};
use uvm_core::gpr::{kernel_eval, GprConfig, GprModel, KernelKind, KernelSpec};
use uvm_core::sqp::{maximize, ParamBox, SqpConfig};
use uvm_core::treestep::{make_branches, step_expectation};
use uvm_core::UvmPoint;

pub type Check = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn min_eigenvalue(m: &Array2<f64>) -> f64 {
    let (w, _) = m.eigh(UPLO::Lower).unwrap();
    w.iter().copied().fold(f64::INFINITY, f64::min)
}

pub fn gram_is_psd(xs: &[Vec<f64>], sf: f64, ell: f64, ard: bool) -> Check {
    let spec = if ard {
        KernelSpec::matern32_ard(sf, vec![ell, 2.0 * ell, 0.5 * ell])
    } else {
        KernelSpec::matern32(sf, ell)
    };
    let n = xs.len();
    let k = Array2::from_shape_fn((n, n), |(a, b)| kernel_eval(&spec, &xs[a], &xs[b]));
    let l = min_eigenvalue(&k);
    ensure(l >= -1e-9 * sf * sf * n as f64, || format!("Gram minimum eigenvalue {l:e}"))
}

/// Fitted means reproduce the training targets, variances are nonnegative,
/// and the predictor does not depend on the training order.
pub fn regression_interpolates(xs: &[Vec<f64>], shift: f64) -> Check {
    let n = xs.len();
    let x = Array2::from_shape_fn((n, 2), |(a, k)| xs[a][k]);
    let y: Vec<f64> = xs.iter().map(|p| shift + p[0].sin() + 0.3 * p[1] * p[1]).collect();
    let gp = GprModel::fit(x.view(), &y, KernelKind::Matern32, &GprConfig::default(), None).map_err(|e| e.to_string())?;
    let scale = y.iter().map(|v| (v - shift).abs()).fold(1.0, f64::max);
    for (p, v) in xs.iter().zip(&y) {
        let m = gp.predict_mean(p);
        ensure((m - v).abs() < 0.05 * scale, || format!("mean {m} at a training point with target {v}"))?;
        ensure(gp.predict_var(p) >= 0.0, || "negative predictive variance".into())?;
    }
    let order: Vec<usize> = (0..n).rev().collect();
    let xr = Array2::from_shape_fn((n, 2), |(a, k)| xs[order[a]][k]);
    let yr: Vec<f64> = order.iter().map(|&a| y[a]).collect();
    let gr = GprModel::with_hyperparameters(xr.view(), &yr, gp.hyperparameters().clone(), true)
        .map_err(|e| e.to_string())?;
    let probe = [0.1, -0.2];
    let (a, b) = (gr.predict_mean(&probe), gp.predict_mean(&probe));
    ensure((a - b).abs() < 1e-8 * scale, || format!("order changed the prediction: {a} vs {b}"))
}

pub fn nearest_psd_idempotent(raw: &[f64], dim: usize) -> Check {
    let g = build_gamma(&CorrParams::new(dim, raw.to_vec()).map_err(|e| e.to_string())?);
    let once: CorrMatrix = g.nearest_psd().map_err(|e| e.to_string())?;
    let twice = once.nearest_psd().map_err(|e| e.to_string())?;
    ensure(once.is_psd(PSD_TOL), || "projection is not PSD".into())?;
    let gap = once
        .entries()
        .iter()
        .zip(twice.entries())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure(gap < 1e-9, || format!("second projection moved entries by {gap:e}"))?;
    ensure((0..dim).all(|i| (once.entries()[[i, i]] - 1.0).abs() < 1e-12), || "unit diagonal lost".into())
}

/// Largest absolute deviation of the one-step mean from the forward.
pub fn martingale_error(dt: f64) -> f64 {
    let m = ModelSpec::reference(3);
    let c = UvmPoint {
        sigma: vec![0.2, 0.15, 0.1],
        rho: vec![0.3, -0.2, 0.1],
    };
    let br = make_branches(3, 8, 0).unwrap();
    let x = [100.0, 90.0, 110.0];
    (0..3)
        .map(|i| {
            let mean = step_expectation(&x, &c, dt, &m, &br, |y| y[i]).unwrap();
            (mean - x[i]).abs()
        })
        .fold(0.0, f64::max)
}

/// Error ratio between `Δt = 1/16` and `Δt = 1/64`; 16 for a second-order error.
pub fn martingale_ratio() -> f64 {
    martingale_error(1.0 / 16.0) / martingale_error(1.0 / 64.0)
}

/// A concave quadratic `−(z − c)ᵀ A (z − c)` with `A = BᵀB + εI` over the
/// volatility-and-correlation vector.
#[derive(Debug)]
pub struct Quadratic {
    center: Vec<f64>,
    a: Array2<f64>,
}

impl Quadratic {
    /// `u` and `b` hold uniforms on `[−1, 1]` of lengths `n` and `n²`.
    pub fn new(dim: usize, u: &[f64], b: &[f64]) -> Self {
        let n = dim + pair_count(dim);
        // Centers reach outside the box so bounds and the PSD cone bind.
        let center = u
            .iter()
            .enumerate()
            .map(|(k, v)| if k < dim { 0.15 + 0.1 * v } else { 0.9 * v })
            .collect();
        let b = Array2::from_shape_vec((n, n), b.to_vec()).unwrap();
        let a = b.t().dot(&b) + Array2::<f64>::eye(n) * 0.05;
        Self { center, a }
    }

    pub fn eval(&self, p: &UvmPoint) -> f64 {
        let z: Vec<f64> = p.sigma.iter().chain(&p.rho).copied().collect();
        let d: Vec<f64> = z.iter().zip(&self.center).map(|(u, v)| u - v).collect();
        let n = d.len();
        let mut q = 0.0;
        for i in 0..n {
            for j in 0..n {
                q += d[i] * self.a[[i, j]] * d[j];
            }
        }
        -q
    }
}

fn feasible(p: &UvmPoint, bounds: &ParamBox) -> bool {
    let inside = |v: &[f64], lo: &[f64], hi: &[f64]| {
        v.iter()
            .zip(lo.iter().zip(hi))
            .all(|(x, (a, b))| *x >= *a - 1e-12 && *x <= *b + 1e-12)
    };
    let d = p.sigma.len();
    inside(&p.sigma, &bounds.sigma_min, &bounds.sigma_max)
        && inside(&p.rho, &bounds.rho_min, &bounds.rho_max)
        && (d < 3 || build_gamma(&CorrParams::new(d, p.rho.clone()).unwrap()).is_psd(1e-9))
}

fn axis(lo: f64, hi: f64, h: f64) -> Vec<f64> {
    let n = ((hi - lo) / h).round() as usize;
    (0..=n).map(|k| lo + (hi - lo) * k as f64 / n as f64).collect()
}

/// Best value over the feasible points of a lattice with spacing `h`.
fn lattice_best(q: &Quadratic, bounds: &ParamBox, h: f64) -> f64 {
    let d = bounds.dim();
    let axes: Vec<Vec<f64>> = bounds
        .sigma_min
        .iter()
        .zip(&bounds.sigma_max)
        .chain(bounds.rho_min.iter().zip(&bounds.rho_max))
        .map(|(a, b)| axis(*a, *b, h))
        .collect();
    let mut idx = vec![0usize; axes.len()];
    let mut best = f64::NEG_INFINITY;
    loop {
        let z: Vec<f64> = idx.iter().zip(&axes).map(|(&i, ax)| ax[i]).collect();
        let p = UvmPoint {
            sigma: z[..d].to_vec(),
            rho: z[d..].to_vec(),
        };
        if feasible(&p, bounds) {
            best = best.max(q.eval(&p));
        }
        let mut k = 0;
        loop {
            if k == idx.len() {
                return best;
            }
            idx[k] += 1;
            if idx[k] < axes[k].len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Feasible result, no worse than the start, no worse than lattice search
/// with spacing `h`.
pub fn check_sqp(q: &Quadratic, dim: usize, h: f64) -> Check {
    let bounds = ModelSpec::reference(dim).bounds();
    let start = bounds.midpoint();
    let f0 = q.eval(&start);
    let out = maximize(|p: &UvmPoint| Ok::<_, ()>(q.eval(p)), &bounds, &start, &SqpConfig::default())
        .map_err(|e| format!("{e:?}"))?;
    ensure(feasible(&out.point, &bounds), || format!("infeasible result {:?}", out.point))?;
    ensure(out.value >= f0, || format!("value {} below the start value {f0}", out.value))?;
    ensure((out.value - q.eval(&out.point)).abs() < 1e-12, || "reported value does not match its point".into())?;
    let best = lattice_best(q, &bounds, h);
    ensure(out.value >= best - 1e-6, || format!("sqp {} < lattice {best}", out.value))
}

/// Lattice spacing for the dominance check: 0.01 up to two assets; six
/// coordinates at 0.01 are out of reach, 0.05 still resolves the PSD boundary.
pub fn sqp_spacing(dim: usize) -> f64 {
    match dim {
        1 => 0.001,
        2 => 0.01,
        _ => 0.05,
    }
}

/// The worst-case price is at least every price with parameters pinned
/// inside the box, up to regression error.
pub fn engine_dominance() -> Check {
    let model = ModelSpec::reference(2);
    let payoff = PayoffSpec::outperformer_spread();
    let algo = AlgoParams::new(8, 125);
    let worst = price(&model, &payoff, &algo).map_err(|e| e.to_string())?.value;
    for (s1, s2, rho) in [(0.1, 0.1, 0.0), (0.2, 0.2, -0.5), (0.15, 0.15, 0.5), (0.2, 0.1, 0.0)] {
        let mut fixed = model.clone().with_fixed_correlation(rho);
        fixed.sigma_min = vec![s1, s2];
        fixed.sigma_max = vec![s1, s2];
        let v = price(&fixed, &payoff, &algo).map_err(|e| e.to_string())?.value;
        ensure(worst >= v - 0.02, || format!("worst {worst} < fixed {v} at ({s1}, {s2}, {rho})"))?;
    }
    Ok(())
}

/// Relative gap to Black–Scholes for a call with `σ^min = σ^max = 0.2`.
pub fn degenerate_call_gap() -> f64 {
    let mut model = ModelSpec::reference(1);
    model.sigma_min = vec![0.2];
    let v = price(&model, &PayoffSpec::Call { strike: 100.0 }, &AlgoParams::new(64, 125))
        .unwrap()
        .value;
    let bs = bs_price(100.0, 100.0, 0.0, 0.0, 0.2, 1.0, OptionKind::Call);
    (v - bs).abs() / bs
}

/// Bitwise-identical prices with one and three worker threads.
pub fn thread_determinism() -> Check {
    let model = ModelSpec::reference(3);
    let payoff = PayoffSpec::GeoOutperformer;
    let mut algo = AlgoParams::new(4, 40);
    algo.branches = Some(4);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| price(&model, &payoff, &algo).unwrap())
    };
    let (a, b) = (run(1), run(3));
    ensure(a.value.to_bits() == b.value.to_bits() && a.argmax == b.argmax, || {
        format!("1 thread {} vs 3 threads {}", a.value, b.value)
    })
}
