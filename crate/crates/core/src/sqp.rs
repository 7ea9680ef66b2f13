//! Feasible-iterate SQP maximizer over volatilities and correlations.
//!
//! The feasible set is the parameter box intersected with
//! `λ_min(Γ(ρ)) ≥ −tol`. Every accepted iterate stays feasible, so the
//! objective itself serves as the merit function.

use ndarray::{Array1, Array2};
use ndarray_linalg::Solve;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correlation::{gamma_from_slice, pair_count, pairs, CorrMatrix};

/// Volatility and correlation parameters for one optimization problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UvmPoint {
    pub sigma: Vec<f64>,
    /// Pairwise coefficients in the flattened order of [`crate::correlation::pairs`].
    pub rho: Vec<f64>,
}

impl UvmPoint {
    pub fn dim(&self) -> usize {
        self.sigma.len()
    }

    fn to_vec(&self) -> Vec<f64> {
        self.sigma.iter().chain(&self.rho).copied().collect()
    }

    fn from_slice(dim: usize, z: &[f64]) -> Self {
        Self {
            sigma: z[..dim].to_vec(),
            rho: z[dim..].to_vec(),
        }
    }
}

/// Box bounds on every parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    pub sigma_min: Vec<f64>,
    pub sigma_max: Vec<f64>,
    pub rho_min: Vec<f64>,
    pub rho_max: Vec<f64>,
}

impl ParamBox {
    pub fn dim(&self) -> usize {
        self.sigma_min.len()
    }

    fn lower(&self) -> Vec<f64> {
        self.sigma_min.iter().chain(&self.rho_min).copied().collect()
    }

    fn upper(&self) -> Vec<f64> {
        self.sigma_max.iter().chain(&self.rho_max).copied().collect()
    }

    pub fn midpoint(&self) -> UvmPoint {
        let mid = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
        UvmPoint {
            sigma: mid(&self.sigma_min, &self.sigma_max),
            rho: mid(&self.rho_min, &self.rho_max),
        }
    }

    fn validate(&self) -> Result<(), String> {
        let d = self.dim();
        let np = pair_count(d);
        if self.sigma_max.len() != d || self.rho_min.len() != np || self.rho_max.len() != np {
            return Err(format!(
                "bounds have inconsistent lengths for dimension {d} ({np} pairs expected)"
            ));
        }
        for (i, (a, b)) in self.sigma_min.iter().zip(&self.sigma_max).enumerate() {
            if !(a.is_finite() && b.is_finite() && *a <= *b) {
                return Err(format!("sigma bounds for asset {i} are not ordered: [{a}, {b}]"));
            }
        }
        for (k, (a, b)) in self.rho_min.iter().zip(&self.rho_max).enumerate() {
            if !(*a >= -1.0 && *b <= 1.0 && *a <= *b) {
                return Err(format!("rho bounds for pair {k} are invalid: [{a}, {b}]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqpConfig {
    pub tol_step: f64,
    /// Admissible violation of `λ_min(Γ) ≥ 0`.
    pub tol_constraint: f64,
    pub max_iters: usize,
    /// Finite-difference step relative to `max(|z|, 1)`.
    pub fd_step: f64,
}

impl Default for SqpConfig {
    fn default() -> Self {
        Self {
            tol_step: 1e-6,
            tol_constraint: 1e-10,
            max_iters: 100,
            fd_step: 1e-5,
        }
    }
}

impl SqpConfig {
    fn validate(&self) -> Result<(), String> {
        if !(self.tol_step > 0.0 && self.tol_constraint > 0.0 && self.fd_step > 0.0) {
            return Err("SQP tolerances must be positive".into());
        }
        if self.max_iters == 0 {
            return Err("SQP max_iters must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqpOutcome {
    pub point: UvmPoint,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SqpError<E> {
    #[error("invalid SQP input: {0}")]
    Invalid(String),
    #[error("infeasible start: {0}")]
    InfeasibleStart(String),
    #[error("objective evaluation failed: {0}")]
    Objective(E),
}

struct Problem {
    dim: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
    free: Vec<usize>,
    /// The PSD constraint can bind only when some correlation with d ≥ 3 is free.
    psd: bool,
}

impl Problem {
    fn new(bounds: &ParamBox) -> Self {
        let dim = bounds.dim();
        let lo = bounds.lower();
        let hi = bounds.upper();
        let free: Vec<usize> = (0..lo.len()).filter(|&k| hi[k] > lo[k]).collect();
        let psd = dim >= 3 && free.iter().any(|&k| k >= dim);
        Self {
            dim,
            lo,
            hi,
            free,
            psd,
        }
    }

    fn point(&self, z: &[f64]) -> UvmPoint {
        UvmPoint::from_slice(self.dim, z)
    }

    fn lambda_min(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let g = gamma_from_slice(self.dim, &z[self.dim..]);
        match g.min_eigen() {
            Ok((l, v)) => (l, v.to_vec()),
            Err(_) => (f64::NEG_INFINITY, vec![0.0; self.dim]),
        }
    }

    /// ∂λ_min/∂z over the free coordinates; zero on volatility entries.
    fn lambda_grad(&self, v: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.lo.len()];
        for (k, (i, j)) in pairs(self.dim).enumerate() {
            full[self.dim + k] = 2.0 * v[i] * v[j];
        }
        self.free.iter().map(|&k| full[k]).collect()
    }

    fn feasible(&self, z: &[f64], tol: f64) -> bool {
        !self.psd || self.lambda_min(z).0 >= -tol
    }
}

/// Maximizes `objective` from a feasible `start`.
///
/// The returned value is never below `objective(start)`.
pub fn maximize<F, E>(
    mut objective: F,
    bounds: &ParamBox,
    start: &UvmPoint,
    cfg: &SqpConfig,
) -> Result<SqpOutcome, SqpError<E>>
where
    F: FnMut(&UvmPoint) -> Result<f64, E>,
{
    cfg.validate().map_err(SqpError::Invalid)?;
    bounds.validate().map_err(SqpError::Invalid)?;
    let prob = Problem::new(bounds);
    if start.sigma.len() != prob.dim || start.rho.len() != pair_count(prob.dim) {
        return Err(SqpError::Invalid("start point has the wrong dimension".into()));
    }
    let mut z = start.to_vec();
    for k in 0..z.len() {
        let slack = 1e-12 * z[k].abs().max(1.0);
        if !(z[k] >= prob.lo[k] - slack && z[k] <= prob.hi[k] + slack) {
            return Err(SqpError::InfeasibleStart(format!(
                "coordinate {k} = {} outside [{}, {}]",
                z[k], prob.lo[k], prob.hi[k]
            )));
        }
        z[k] = z[k].clamp(prob.lo[k], prob.hi[k]);
    }
    if prob.dim >= 3 {
        let (l, _) = prob.lambda_min(&z);
        if l < -cfg.tol_constraint {
            return Err(SqpError::InfeasibleStart(format!(
                "correlation matrix has minimum eigenvalue {l:e}"
            )));
        }
    }

    let mut evaluations = 0usize;
    let mut eval = |z: &[f64]| -> Result<f64, SqpError<E>> {
        evaluations += 1;
        objective(&prob.point(z)).map_err(SqpError::Objective)
    };

    let mut fz = eval(&z)?;
    let nf = prob.free.len();
    let mut iterations = 0usize;
    if nf > 0 {
        let mut g = gradient(&z, fz, &prob, cfg, &mut eval)?;
        let diag: f64 = prob
            .free
            .iter()
            .map(|&k| (prob.hi[k] - prob.lo[k]).powi(2))
            .sum::<f64>()
            .sqrt();
        let gn = norm(&g);
        let beta = if gn > 0.0 { gn / (0.5 * diag) } else { 1.0 };
        let mut hess = Array2::<f64>::eye(nf) * beta;

        while iterations < cfg.max_iters {
            iterations += 1;
            let (lam, v) = if prob.psd {
                prob.lambda_min(&z)
            } else {
                (0.0, Vec::new())
            };
            let psd_grad = if prob.psd {
                Some(prob.lambda_grad(&v))
            } else {
                None
            };

            // Linear constraints A p ≤ b on the free step.
            let mut rows: Vec<Vec<f64>> = Vec::with_capacity(2 * nf + 1);
            let mut rhs: Vec<f64> = Vec::with_capacity(2 * nf + 1);
            for (a, &k) in prob.free.iter().enumerate() {
                let mut up = vec![0.0; nf];
                up[a] = 1.0;
                rows.push(up);
                rhs.push((prob.hi[k] - z[k]).max(0.0));
                let mut dn = vec![0.0; nf];
                dn[a] = -1.0;
                rows.push(dn);
                rhs.push((z[k] - prob.lo[k]).max(0.0));
            }
            if let Some(gl) = &psd_grad {
                rows.push(gl.iter().map(|v| -v).collect());
                rhs.push((lam + cfg.tol_constraint).max(0.0));
            }
            let neg_g: Vec<f64> = g.iter().map(|v| -v).collect();
            let (p, mult) = solve_qp(&hess, &neg_g, &rows, &rhs);
            let mu_new = if psd_grad.is_some() {
                *mult.last().unwrap_or(&0.0)
            } else {
                0.0
            };
            if norm(&p) < cfg.tol_step {
                break;
            }

            let slope: f64 = g.iter().zip(&p).map(|(a, b)| a * b).sum();
            let mut alpha = 1.0;
            let mut accepted: Option<(Vec<f64>, f64)> = None;
            while alpha > 1e-10 {
                let mut trial = z.clone();
                for (a, &k) in prob.free.iter().enumerate() {
                    trial[k] = (z[k] + alpha * p[a]).clamp(prob.lo[k], prob.hi[k]);
                }
                if prob.feasible(&trial, cfg.tol_constraint) {
                    let ft = eval(&trial)?;
                    if ft.is_finite() && ft >= fz + 1e-4 * alpha * slope.max(0.0) {
                        accepted = Some((trial, ft));
                        break;
                    }
                }
                alpha *= 0.5;
            }
            let Some((zn, fnew)) = accepted else {
                break;
            };
            let gn = gradient(&zn, fnew, &prob, cfg, &mut eval)?;
            let s: Vec<f64> = prob.free.iter().map(|&k| zn[k] - z[k]).collect();
            let step = norm(&s);

            // Curvature pair for the Lagrangian −f − μ λ_min of the minimization form.
            let mut y: Vec<f64> = (0..nf).map(|a| -(gn[a] - g[a])).collect();
            if let Some(gl_old) = &psd_grad {
                if mu_new > 0.0 {
                    let (_, vn) = prob.lambda_min(&zn);
                    let gl_new = prob.lambda_grad(&vn);
                    for a in 0..nf {
                        y[a] -= mu_new * (gl_new[a] - gl_old[a]);
                    }
                }
            }
            damped_bfgs(&mut hess, &s, &y);

            z = zn;
            fz = fnew;
            g = gn;
            if step < cfg.tol_step {
                break;
            }
        }
    }

    Ok(SqpOutcome {
        point: prob.point(&z),
        value: fz,
        iterations,
        evaluations,
    })
}

/// Runs [`maximize`] from each start and keeps the best result; earlier
/// starts win ties.
pub fn maximize_from_starts<F, E>(
    mut objective: F,
    bounds: &ParamBox,
    starts: &[UvmPoint],
    cfg: &SqpConfig,
) -> Result<SqpOutcome, SqpError<E>>
where
    F: FnMut(&UvmPoint) -> Result<f64, E>,
{
    let mut best: Option<SqpOutcome> = None;
    let mut iterations = 0;
    let mut evaluations = 0;
    for s in starts {
        let out = maximize(&mut objective, bounds, s, cfg)?;
        iterations += out.iterations;
        evaluations += out.evaluations;
        if best.as_ref().is_none_or(|b| out.value > b.value) {
            best = Some(out);
        }
    }
    let mut best = best.ok_or_else(|| SqpError::Invalid("no start points".into()))?;
    best.iterations = iterations;
    best.evaluations = evaluations;
    Ok(best)
}

/// Runs [`maximize_from_starts`] after screening `candidates`: the best
/// candidate becomes an extra start when it beats every start outright.
///
/// Local ascent stalls where the step expectation is flat (all branches out
/// of the money) or on a non-global vertex; a cheap vertex screen covers both.
pub fn maximize_screened<F, E>(
    mut objective: F,
    bounds: &ParamBox,
    starts: &[UvmPoint],
    candidates: &[UvmPoint],
    cfg: &SqpConfig,
) -> Result<SqpOutcome, SqpError<E>>
where
    F: FnMut(&UvmPoint) -> Result<f64, E>,
{
    if candidates.is_empty() {
        return maximize_from_starts(objective, bounds, starts, cfg);
    }
    let mut floor = f64::NEG_INFINITY;
    for s in starts {
        floor = floor.max(objective(s).map_err(SqpError::Objective)?);
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let v = objective(c).map_err(SqpError::Objective)?;
        if v > floor && best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    let screened = starts.len() + candidates.len();
    let mut out = match best {
        Some((i, _)) => {
            let mut all = starts.to_vec();
            all.push(candidates[i].clone());
            maximize_from_starts(&mut objective, bounds, &all, cfg)?
        }
        None => maximize_from_starts(&mut objective, bounds, starts, cfg)?,
    };
    out.evaluations += screened;
    Ok(out)
}

/// Feasible vertices of the box over its free coordinates: all of them when
/// there are at most `max`, otherwise the two extreme vertices plus a fixed
/// pseudo-random sample. Vertices whose correlation matrix is not PSD are
/// dropped.
pub fn vertex_candidates(bounds: &ParamBox, tol: f64, max: usize) -> Result<Vec<UvmPoint>, String> {
    bounds.validate()?;
    let prob = Problem::new(bounds);
    let nf = prob.free.len();
    if nf == 0 || max == 0 {
        return Ok(Vec::new());
    }
    let vertex = |bit: &dyn Fn(usize) -> bool| {
        let mut z = prob.lo.clone();
        for (a, &k) in prob.free.iter().enumerate() {
            if bit(a) {
                z[k] = prob.hi[k];
            }
        }
        z
    };
    let mut zs: Vec<Vec<f64>> = Vec::new();
    if nf < 63 && (1u64 << nf) <= max as u64 {
        for code in 0..(1u64 << nf) {
            zs.push(vertex(&|a| code >> a & 1 == 1));
        }
    } else {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        zs.push(vertex(&|_| false));
        zs.push(vertex(&|_| true));
        while zs.len() < max {
            let bits: Vec<bool> = (0..nf).map(|_| rng.random::<bool>()).collect();
            zs.push(vertex(&|a| bits[a]));
        }
    }
    Ok(zs
        .into_iter()
        .filter(|z| prob.feasible(z, tol))
        .map(|z| prob.point(&z))
        .collect())
}

/// Box midpoint with the correlation part repaired to be PSD, plus a
/// restart at `(σ^max, ρ^avg)` when `d(d+1)/2 ≤ 6`.
pub fn standard_starts(bounds: &ParamBox, tol: f64) -> Result<Vec<UvmPoint>, String> {
    bounds.validate()?;
    let d = bounds.dim();
    let mut mid = bounds.midpoint();
    mid.rho = feasible_correlation(d, &mid.rho, &bounds.rho_min, &bounds.rho_max, tol)?;
    let mut starts = vec![mid.clone()];
    if d * (d + 1) / 2 <= 6 && bounds.sigma_max != mid.sigma {
        starts.push(UvmPoint {
            sigma: bounds.sigma_max.clone(),
            rho: mid.rho,
        });
    }
    Ok(starts)
}

/// Alternates nearest-PSD projection and box clipping until the matrix is
/// within `tol` of PSD.
fn feasible_correlation(
    d: usize,
    rho: &[f64],
    lo: &[f64],
    hi: &[f64],
    tol: f64,
) -> Result<Vec<f64>, String> {
    let mut r = rho.to_vec();
    if d < 3 {
        return Ok(r);
    }
    for _ in 0..200 {
        let g = gamma_from_slice(d, &r);
        let (l, _) = g.min_eigen().map_err(|e| e.to_string())?;
        if l >= -tol {
            return Ok(r);
        }
        let fixed: CorrMatrix = g.nearest_psd().map_err(|e| e.to_string())?;
        r = fixed
            .params()
            .as_slice()
            .iter()
            .zip(lo.iter().zip(hi))
            .map(|(v, (a, b))| v.clamp(*a, *b))
            .collect();
    }
    Err("no PSD correlation matrix found inside the correlation box".into())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Central differences, falling back to one-sided ones where a central
/// probe would leave the feasible set.
fn gradient<E>(
    z: &[f64],
    fz: f64,
    prob: &Problem,
    cfg: &SqpConfig,
    eval: &mut impl FnMut(&[f64]) -> Result<f64, SqpError<E>>,
) -> Result<Vec<f64>, SqpError<E>> {
    let mut g = Vec::with_capacity(prob.free.len());
    let mut probe = z.to_vec();
    for &k in &prob.free {
        let h = cfg.fd_step * z[k].abs().max(1.0);
        let check = |probe: &[f64]| k < prob.dim || prob.feasible(probe, cfg.tol_constraint);
        probe[k] = z[k] + h;
        let up = probe[k] <= prob.hi[k] && check(&probe);
        probe[k] = z[k] - h;
        let dn = probe[k] >= prob.lo[k] && check(&probe);
        let est = match (up, dn) {
            (true, true) => {
                probe[k] = z[k] + h;
                let fp = eval(&probe)?;
                probe[k] = z[k] - h;
                let fm = eval(&probe)?;
                (fp - fm) / (2.0 * h)
            }
            (true, false) => {
                probe[k] = z[k] + h;
                (eval(&probe)? - fz) / h
            }
            (false, true) => {
                probe[k] = z[k] - h;
                (fz - eval(&probe)?) / h
            }
            (false, false) => {
                // Box narrower than 2h: difference across the whole interval.
                let (a, b) = (prob.lo[k], prob.hi[k]);
                probe[k] = b;
                let fb = if check(&probe) { Some(eval(&probe)?) } else { None };
                probe[k] = a;
                let fa = if check(&probe) { Some(eval(&probe)?) } else { None };
                match (fa, fb) {
                    (Some(fa), Some(fb)) if b > a => (fb - fa) / (b - a),
                    _ => 0.0,
                }
            }
        };
        probe[k] = z[k];
        g.push(est);
    }
    Ok(g)
}

/// Powell-damped BFGS update keeping `hess` positive definite.
fn damped_bfgs(hess: &mut Array2<f64>, s: &[f64], y: &[f64]) {
    let n = s.len();
    let sv = Array1::from(s.to_vec());
    let bs = hess.dot(&sv);
    let sbs = sv.dot(&bs);
    if !(sbs > 1e-300) {
        return;
    }
    let sy: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
    let theta = if sy >= 0.2 * sbs {
        1.0
    } else {
        0.8 * sbs / (sbs - sy)
    };
    let r: Vec<f64> = (0..n).map(|i| theta * y[i] + (1.0 - theta) * bs[i]).collect();
    let sr: f64 = s.iter().zip(&r).map(|(a, b)| a * b).sum();
    if !(sr > 1e-300) {
        return;
    }
    for i in 0..n {
        for j in 0..n {
            hess[[i, j]] += -bs[i] * bs[j] / sbs + r[i] * r[j] / sr;
        }
    }
}

/// Primal active-set solve of `min ½pᵀBp + cᵀp` s.t. `A p ≤ b`, from the
/// feasible point `p = 0` (requires `b ≥ 0`). Returns the step and one
/// multiplier per constraint row.
fn solve_qp(
    b_mat: &Array2<f64>,
    c: &[f64],
    rows: &[Vec<f64>],
    rhs: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = c.len();
    let m = rows.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut p = vec![0.0; n];
    let mut multipliers = vec![0.0; m];
    // Tight variable bounds start in the working set; the nonlinear row joins
    // only when it blocks.
    let mut work: Vec<usize> = (0..m.min(2 * n)).filter(|&i| rhs[i] <= 0.0).collect();
    // A variable pinned on both sides would make the working set dependent.
    work.dedup_by(|a, b| *a / 2 == *b / 2);

    for _ in 0..(10 * (n + m) + 10) {
        let k = work.len();
        let size = n + k;
        let mut kkt = Array2::<f64>::zeros((size, size));
        let mut r = Array1::<f64>::zeros(size);
        for i in 0..n {
            for j in 0..n {
                kkt[[i, j]] = b_mat[[i, j]];
            }
            r[i] = -(c[i] + (0..n).map(|j| b_mat[[i, j]] * p[j]).sum::<f64>());
        }
        for (w, &ci) in work.iter().enumerate() {
            for j in 0..n {
                kkt[[n + w, j]] = rows[ci][j];
                kkt[[j, n + w]] = rows[ci][j];
            }
        }
        let Ok(sol) = kkt.solve_into(r) else {
            break;
        };
        let s: Vec<f64> = sol.iter().take(n).copied().collect();
        let lambdas: Vec<f64> = sol.iter().skip(n).copied().collect();
        let pscale = 1.0 + p.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if s.iter().fold(0.0f64, |a, v| a.max(v.abs())) <= 1e-13 * pscale {
            let (imin, lmin) = lambdas
                .iter()
                .enumerate()
                .fold((usize::MAX, 0.0), |acc, (i, &l)| if l < acc.1 { (i, l) } else { acc });
            if imin == usize::MAX || lmin >= -1e-12 {
                multipliers.iter_mut().for_each(|v| *v = 0.0);
                for (w, &ci) in work.iter().enumerate() {
                    multipliers[ci] = lambdas[w].max(0.0);
                }
                return (p, multipliers);
            }
            work.remove(imin);
            continue;
        }
        let mut alpha = 1.0;
        let mut blocking = None;
        for i in 0..m {
            if work.contains(&i) {
                continue;
            }
            let as_ = dot(&rows[i], &s);
            if as_ > 1e-14 {
                let t = ((rhs[i] - dot(&rows[i], &p)) / as_).max(0.0);
                if t < alpha {
                    alpha = t;
                    blocking = Some(i);
                }
            }
        }
        for j in 0..n {
            p[j] += alpha * s[j];
        }
        if let Some(i) = blocking {
            work.push(i);
        }
    }
    (p, multipliers)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn box1(lo: f64, hi: f64) -> ParamBox {
        ParamBox {
            sigma_min: vec![lo],
            sigma_max: vec![hi],
            rho_min: vec![],
            rho_max: vec![],
        }
    }

    type NoErr = std::convert::Infallible;

    #[test]
    fn degenerate_box_returns_start() {
        let b = ParamBox {
            sigma_min: vec![0.2, 0.1],
            sigma_max: vec![0.2, 0.1],
            rho_min: vec![-0.5],
            rho_max: vec![-0.5],
        };
        let start = b.midpoint();
        let out = maximize(
            |c: &UvmPoint| Ok::<_, NoErr>(c.sigma[0] + c.sigma[1] + c.rho[0]),
            &b,
            &start,
            &SqpConfig::default(),
        )
        .unwrap();
        assert_eq!(out.point, start);
        assert!((out.value - (0.3 - 0.5)).abs() < 1e-15);
        assert_eq!(out.evaluations, 1);
    }

    #[test]
    fn interior_quadratic_maximum() {
        let b = box1(0.1, 0.2);
        let out = maximize(
            |c: &UvmPoint| Ok::<_, NoErr>(-(c.sigma[0] - 0.17).powi(2)),
            &b,
            &b.midpoint(),
            &SqpConfig::default(),
        )
        .unwrap();
        assert!((out.point.sigma[0] - 0.17).abs() < 1e-4, "{:?}", out.point);
    }

    #[test]
    fn monotone_objective_hits_upper_bound() {
        let b = box1(0.1, 0.2);
        let out = maximize(
            |c: &UvmPoint| Ok::<_, NoErr>(c.sigma[0].powi(3) + c.sigma[0]),
            &b,
            &b.midpoint(),
            &SqpConfig::default(),
        )
        .unwrap();
        assert!((out.point.sigma[0] - 0.2).abs() < 1e-6);
    }

    #[test]
    fn psd_boundary_is_respected() {
        // Pushing all correlations down: the optimum sits on λ_min = 0.
        let b = ParamBox {
            sigma_min: vec![0.2; 3],
            sigma_max: vec![0.2; 3],
            rho_min: vec![-1.0; 3],
            rho_max: vec![1.0; 3],
        };
        let start = b.midpoint();
        let out = maximize(
            |c: &UvmPoint| Ok::<_, NoErr>(-c.rho.iter().sum::<f64>()),
            &b,
            &start,
            &SqpConfig::default(),
        )
        .unwrap();
        let (l, _) = gamma_from_slice(3, &out.point.rho).min_eigen().unwrap();
        assert!(l >= -1e-8);
        // Sum of correlations is bounded below by −d/2 on the PSD cone.
        assert!(out.value > 1.5 - 1e-3, "value {}", out.value);
    }

    #[test]
    fn infeasible_start_is_rejected() {
        let b = ParamBox {
            sigma_min: vec![0.1; 3],
            sigma_max: vec![0.2; 3],
            rho_min: vec![-1.0; 3],
            rho_max: vec![1.0; 3],
        };
        let start = UvmPoint {
            sigma: vec![0.15; 3],
            rho: vec![-0.9; 3],
        };
        assert!(matches!(
            maximize(|_: &UvmPoint| Ok::<_, NoErr>(0.0), &b, &start, &SqpConfig::default()),
            Err(SqpError::InfeasibleStart(_))
        ));
        let outside = UvmPoint {
            sigma: vec![0.3, 0.15, 0.15],
            rho: vec![0.0; 3],
        };
        assert!(matches!(
            maximize(|_: &UvmPoint| Ok::<_, NoErr>(0.0), &b, &outside, &SqpConfig::default()),
            Err(SqpError::InfeasibleStart(_))
        ));
    }

    #[test]
    fn objective_errors_propagate() {
        let b = box1(0.1, 0.2);
        let r = maximize(|_: &UvmPoint| Err::<f64, _>("boom"), &b, &b.midpoint(), &SqpConfig::default());
        assert_eq!(r.unwrap_err(), SqpError::Objective("boom"));
    }

    #[test]
    fn starts_repair_indefinite_midpoint() {
        let b = ParamBox {
            sigma_min: vec![0.1; 3],
            sigma_max: vec![0.2; 3],
            // Midpoint (−0.8, −0.8, 0) is indefinite; (−0.6, −0.6, 0.5) is not.
            rho_min: vec![-1.0, -1.0, -1.0],
            rho_max: vec![-0.6, -0.6, 1.0],
        };
        let starts = standard_starts(&b, 1e-10).unwrap();
        assert_eq!(starts.len(), 2);
        let (l, _) = gamma_from_slice(3, &starts[0].rho).min_eigen().unwrap();
        assert!(l >= -1e-10);
    }

    #[test]
    fn qp_respects_box() {
        let b = Array2::eye(2);
        let rows = vec![
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, -1.0],
        ];
        let (p, mult) = solve_qp(&b, &[-3.0, 0.5], &rows, &[1.0, 1.0, 1.0, 0.0]);
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert!(p[1].abs() < 1e-12);
        assert!((mult[0] - 2.0).abs() < 1e-12);
        assert!((mult[3] - 0.5).abs() < 1e-12);
    }
}
