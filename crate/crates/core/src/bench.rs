//! Independent reference prices: Black–Scholes, a one-dimensional
//! uncertain-volatility lattice, and the reductions that map some of the
//! multi-asset payoffs onto it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correlation::{gamma_from_slice, pairs, PSD_TOL};
use crate::engine::{price, AlgoParams, EngineError, ModelSpec, PayoffSpec, PriceReport};
use crate::lowdisc::norm_cdf;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BenchError {
    #[error("unsupported reduction: {0}")]
    Unsupported(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptionKind {
    Call,
    Put,
}

/// Black–Scholes price with continuous dividend yield `q`.
pub fn bs_price(s0: f64, k: f64, r: f64, q: f64, sigma: f64, t: f64, kind: OptionKind) -> f64 {
    let fwd_s = s0 * (-q * t).exp();
    let disc_k = k * (-r * t).exp();
    let vol = sigma * t.sqrt();
    let d1 = ((s0 / k).ln() + (r - q + 0.5 * sigma * sigma) * t) / vol;
    let d2 = d1 - vol;
    match kind {
        OptionKind::Call => fwd_s * norm_cdf(d1) - disc_k * norm_cdf(d2),
        OptionKind::Put => disc_k * norm_cdf(-d2) - fwd_s * norm_cdf(-d1),
    }
}

/// Dividend yield of the reduced asset as a function of its volatility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DividendRule {
    Constant { eta: f64 },
    /// `η̂(σ̂) = base + coef·σ̂²`.
    VolLinked { base: f64, coef: f64 },
}

impl DividendRule {
    pub fn eval(&self, vol: f64) -> f64 {
        match *self {
            DividendRule::Constant { eta } => eta,
            DividendRule::VolLinked { base, coef } => base + coef * vol * vol,
        }
    }

    /// `(η̂(0), dη̂/d(σ̂²))`.
    fn coefficients(&self) -> (f64, f64) {
        match *self {
            DividendRule::Constant { eta } => (eta, 0.0),
            DividendRule::VolLinked { base, coef } => (base, coef),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payoff1d {
    Call { strike: f64 },
    /// Long a call at `long`, short a call at `short`.
    CallSpread { long: f64, short: f64 },
}

impl Payoff1d {
    pub fn eval(&self, y: f64) -> f64 {
        match *self {
            Payoff1d::Call { strike } => (y - strike).max(0.0),
            Payoff1d::CallSpread { long, short } => (y - long).max(0.0) - (y - short).max(0.0),
        }
    }
}

/// A one-asset uncertain-volatility problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reduced1D {
    pub y0: f64,
    pub vol_min: f64,
    pub vol_max: f64,
    pub dividend: DividendRule,
    pub payoff: Payoff1d,
    /// Multiplies the lattice value, e.g. the numéraire's initial spot.
    pub scale: f64,
    pub rate: f64,
    pub maturity: f64,
}

impl Reduced1D {
    fn validate(&self) -> Result<(), BenchError> {
        if !(self.y0 > 0.0 && self.vol_min > 0.0 && self.vol_min <= self.vol_max && self.maturity > 0.0) {
            return Err(BenchError::Invalid(format!(
                "need y0 > 0, 0 < vol_min <= vol_max and maturity > 0 (got y0={}, vol=[{}, {}], T={})",
                self.y0, self.vol_min, self.vol_max, self.maturity
            )));
        }
        Ok(())
    }
}

/// Worst-case price on a recombining trinomial lattice.
///
/// Node spacing is `h = σ^max √(1.5Δt)`; branch probabilities match the
/// first two moments of the log-increment for the chosen `σ̂`. The node
/// value is a quadratic in `σ̂²`, so with a constant dividend the maximum is
/// taken over the two endpoints and with a volatility-linked dividend over
/// the endpoints and the interior vertex.
pub fn uvm_tree_1d(red: &Reduced1D, steps: usize) -> Result<f64, BenchError> {
    red.validate()?;
    if steps == 0 {
        return Err(BenchError::Invalid("steps must be at least 1".into()));
    }
    let dt = red.maturity / steps as f64;
    let h = red.vol_max * (1.5 * dt).sqrt();
    let (eta0, eta1) = red.dividend.coefficients();
    // μ(s) = m0 + m1 s with s = σ̂².
    let m0 = red.rate - eta0;
    let m1 = -(eta1 + 0.5);
    let h2 = h * h;
    let a0 = m0 * m0 * dt * dt / h2;
    let a1 = (dt + 2.0 * m0 * m1 * dt * dt) / h2;
    let a2 = m1 * m1 * dt * dt / h2;
    let b0 = m0 * dt / h;
    let b1 = m1 * dt / h;
    let (s_lo, s_hi) = (red.vol_min * red.vol_min, red.vol_max * red.vol_max);

    for k in 0..=64 {
        let s = s_lo + (s_hi - s_lo) * k as f64 / 64.0;
        let a = a0 + a1 * s + a2 * s * s;
        let b = b0 + b1 * s;
        if a > 1.0 || a < b.abs() {
            return Err(BenchError::Invalid(format!(
                "{steps} steps give negative lattice probabilities; use more steps"
            )));
        }
    }

    let disc = (-red.rate * dt).exp();
    let variable = eta1 != 0.0;
    let mut v: Vec<f64> = (0..=2 * steps)
        .map(|i| red.payoff.eval(red.y0 * ((i as f64 - steps as f64) * h).exp()))
        .collect();
    for n in (0..steps).rev() {
        // Entry i of level n is node j = i − n; its children sit at i, i+1, i+2 of level n+1.
        for i in 0..=2 * n {
            let (vd, vm, vu) = (v[i], v[i + 1], v[i + 2]);
            let g = 0.5 * (vu + vd) - vm;
            let dd = 0.5 * (vu - vd);
            let val = |s: f64| vm + g * (a0 + a1 * s + a2 * s * s) + dd * (b0 + b1 * s);
            let mut best = val(s_lo).max(val(s_hi));
            if variable {
                let c2 = g * a2;
                let c1 = g * a1 + dd * b1;
                if c2 < 0.0 {
                    let s_star = -c1 / (2.0 * c2);
                    if s_star > s_lo && s_star < s_hi {
                        best = best.max(val(s_star));
                    }
                }
            }
            v[i] = disc * best;
        }
    }
    Ok(red.scale * v[0])
}

fn reduced_vol(s1: f64, s2: f64, rho: f64) -> f64 {
    (s1 * s1 + s2 * s2 - 2.0 * rho * s1 * s2).sqrt()
}

/// Values the two-asset exchange payoffs in units of the first asset, which
/// leaves one driftless asset `Y = S²/S¹`.
pub fn numeraire_reduce(model: &ModelSpec, payoff: &PayoffSpec) -> Result<Reduced1D, BenchError> {
    model.validate()?;
    if model.dim() != 2 {
        return Err(BenchError::Unsupported("the numeraire reduction needs two assets".into()));
    }
    if model.rate != 0.0 || model.dividends.iter().any(|q| *q != 0.0) {
        return Err(BenchError::Unsupported("the numeraire reduction assumes zero rate and dividends".into()));
    }
    if model.rho_min[0] != model.rho_max[0] {
        return Err(BenchError::Unsupported("the numeraire reduction needs a fixed correlation".into()));
    }
    let rho = model.rho_min[0];
    if rho > 0.0 {
        return Err(BenchError::Unsupported(format!(
            "the numeraire reduction needs rho <= 0, got {rho}"
        )));
    }
    let pay = match *payoff {
        PayoffSpec::Outperformer => Payoff1d::Call { strike: 1.0 },
        PayoffSpec::OutperformerSpread { lo, hi } => Payoff1d::CallSpread { long: lo, short: hi },
        _ => {
            return Err(BenchError::Unsupported(
                "the numeraire reduction covers the outperformer and its spread".into(),
            ))
        }
    };
    let (a1, b1) = (model.sigma_min[0], model.sigma_max[0]);
    let (a2, b2) = (model.sigma_min[1], model.sigma_max[1]);
    let corners = [
        reduced_vol(a1, a2, rho),
        reduced_vol(a1, b2, rho),
        reduced_vol(b1, a2, rho),
        reduced_vol(b1, b2, rho),
    ];
    Ok(Reduced1D {
        y0: model.spot[1] / model.spot[0],
        vol_min: corners.iter().copied().fold(f64::INFINITY, f64::min),
        vol_max: corners.iter().copied().fold(0.0, f64::max),
        dividend: DividendRule::Constant { eta: 0.0 },
        payoff: pay,
        scale: model.spot[0],
        rate: 0.0,
        maturity: model.maturity,
    })
}

/// Geometric mean of independent assets as a single asset with a
/// volatility-dependent dividend.
pub fn geo_reduce(model: &ModelSpec, k1: f64, k2: f64) -> Result<Reduced1D, BenchError> {
    model.validate()?;
    if model.rho_min.iter().chain(&model.rho_max).any(|r| *r != 0.0) {
        return Err(BenchError::Unsupported("the geometric reduction needs all correlations fixed at 0".into()));
    }
    if !(k1 > 0.0 && k1 < k2) {
        return Err(BenchError::Invalid(format!("need 0 < k1 < k2, got {k1}, {k2}")));
    }
    let d = model.dim() as f64;
    let vol = |s: &[f64]| s.iter().map(|v| v * v).sum::<f64>().sqrt() / d;
    let y0 = (model.spot.iter().map(|s| s.ln()).sum::<f64>() / d).exp();
    Ok(Reduced1D {
        y0,
        vol_min: vol(&model.sigma_min),
        vol_max: vol(&model.sigma_max),
        dividend: DividendRule::VolLinked {
            base: model.dividends.iter().sum::<f64>() / d,
            coef: 0.5 * (d - 1.0),
        },
        payoff: Payoff1d::CallSpread { long: k1, short: k2 },
        scale: 1.0,
        rate: model.rate,
        maturity: model.maturity,
    })
}

/// Correlations that maximize the geometric outperformer's spread variance:
/// `−ρ` between the first asset and each other one, `+ρ` among the others.
pub fn geo_outperformer_correlations(dim: usize, rho: f64) -> Vec<f64> {
    pairs(dim).map(|(i, _)| if i == 0 { -rho } else { rho }).collect()
}

/// Engine price of the geometric outperformer with correlations fixed at
/// the extremal pattern and only the volatilities uncertain.
pub fn geo_outperformer_benchmark(model: &ModelSpec, algo: &AlgoParams) -> Result<PriceReport, BenchError> {
    model.validate()?;
    let d = model.dim();
    if d < 2 {
        return Err(BenchError::Invalid("the geometric outperformer needs at least 2 assets".into()));
    }
    let bound = model.rho_max.iter().copied().fold(f64::INFINITY, f64::min);
    let rho = geo_outperformer_correlations(d, bound);
    let (l, _) = gamma_from_slice(d, &rho)
        .min_eigen()
        .map_err(|e| BenchError::Invalid(e.to_string()))?;
    if l < -PSD_TOL {
        return Err(BenchError::Unsupported(format!(
            "extremal correlation pattern is not PSD for d = {d} (minimum eigenvalue {l:e})"
        )));
    }
    let fixed = model.clone().with_correlations(rho);
    Ok(price(&fixed, &PayoffSpec::GeoOutperformer, algo)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn black_scholes_at_the_money() {
        let c = bs_price(100.0, 100.0, 0.0, 0.0, 0.2, 1.0, OptionKind::Call);
        assert!((c - 7.965_567).abs() < 1e-5);
    }

    #[test]
    fn put_call_parity() {
        for &(k, r, q, s) in &[(90.0, 0.03, 0.01, 0.25), (120.0, 0.0, 0.02, 0.1), (100.0, 0.05, 0.0, 0.4)] {
            let c = bs_price(100.0, k, r, q, s, 0.7, OptionKind::Call);
            let p = bs_price(100.0, k, r, q, s, 0.7, OptionKind::Put);
            let parity = 100.0 * (-q * 0.7f64).exp() - k * (-r * 0.7f64).exp();
            assert!((c - p - parity).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_strike_call_is_discounted_spot() {
        let c = bs_price(100.0, 1e-300, 0.01, 0.03, 0.2, 2.0, OptionKind::Call);
        assert!((c - 100.0 * (-0.06f64).exp()).abs() < 1e-10);
    }

    fn call_problem(vmin: f64, vmax: f64) -> Reduced1D {
        Reduced1D {
            y0: 100.0,
            vol_min: vmin,
            vol_max: vmax,
            dividend: DividendRule::Constant { eta: 0.0 },
            payoff: Payoff1d::Call { strike: 100.0 },
            scale: 1.0,
            rate: 0.0,
            maturity: 1.0,
        }
    }

    #[test]
    fn degenerate_lattice_converges_to_black_scholes() {
        let bs = bs_price(100.0, 100.0, 0.0, 0.0, 0.2, 1.0, OptionKind::Call);
        let v = uvm_tree_1d(&call_problem(0.2, 0.2), 500).unwrap();
        assert!((v / bs - 1.0).abs() < 3e-3);
    }

    #[test]
    fn convex_payoff_uses_the_upper_volatility() {
        for steps in [10, 57, 200] {
            let wide = uvm_tree_1d(&call_problem(0.1, 0.2), steps).unwrap();
            let mut fixed = call_problem(0.2, 0.2);
            fixed.vol_min = 0.2;
            let top = uvm_tree_1d(&fixed, steps).unwrap();
            assert!((wide - top).abs() < 1e-10, "{steps}: {wide} vs {top}");
        }
    }

    #[test]
    fn outperformer_reduced_volatility() {
        let m = ModelSpec::reference(2).with_fixed_correlation(-0.5);
        let r = numeraire_reduce(&m, &PayoffSpec::Outperformer).unwrap();
        assert!((r.vol_max - 0.2 * 3f64.sqrt()).abs() < 1e-12);
        assert!((r.vol_min - 0.1 * 3f64.sqrt()).abs() < 1e-12);
        let pos = ModelSpec::reference(2).with_fixed_correlation(0.5);
        assert!(matches!(
            numeraire_reduce(&pos, &PayoffSpec::Outperformer),
            Err(BenchError::Unsupported(_))
        ));
    }

    #[test]
    fn geometric_reduction_bounds() {
        let m = ModelSpec::reference(5).with_fixed_correlation(0.0);
        let r = geo_reduce(&m, 90.0, 110.0).unwrap();
        assert!((r.vol_min - 0.044_721).abs() < 1e-6);
        assert!((r.vol_max - 0.089_443).abs() < 1e-6);
        assert_eq!(r.dividend, DividendRule::VolLinked { base: 0.0, coef: 2.0 });

        let one = ModelSpec::reference(1);
        let r1 = geo_reduce(&one, 90.0, 110.0).unwrap();
        assert_eq!((r1.vol_min, r1.vol_max), (0.1, 0.2));
        assert_eq!(r1.dividend.eval(0.15), 0.0);
        assert!(geo_reduce(&ModelSpec::reference(2), 90.0, 110.0).is_err());
    }

    #[test]
    fn extremal_pattern() {
        assert_eq!(geo_outperformer_correlations(3, 0.5), vec![-0.5, -0.5, 0.5]);
        assert!(gamma_from_slice(5, &geo_outperformer_correlations(5, 0.5)).is_psd(1e-10));
    }
}
