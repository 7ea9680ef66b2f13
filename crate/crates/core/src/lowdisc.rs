//! Halton points and the standard normal quantile.
//!
//! Grid construction maps each Halton point through the inverse normal CDF
//! to obtain Gaussian quantiles. The sequence starts at index 1 so that no
//! coordinate is ever exactly 0.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum LowDiscError {
    #[error("probability {0} is outside the open interval (0, 1)")]
    Domain(f64),
    #[error("Halton dimension must be positive")]
    ZeroDimension,
}

/// Plain (unscrambled) Halton sequence over the first `dim` primes.
#[derive(Debug, Clone)]
pub struct Halton {
    bases: Vec<u64>,
    next_index: u64,
}

impl Halton {
    pub fn new(dim: usize) -> Result<Self, LowDiscError> {
        if dim == 0 {
            return Err(LowDiscError::ZeroDimension);
        }
        Ok(Self {
            bases: first_primes(dim),
            next_index: 1,
        })
    }

    /// Sequence positioned so the next point returned has 1-based `index`.
    pub fn starting_at(dim: usize, index: u64) -> Result<Self, LowDiscError> {
        let mut h = Self::new(dim)?;
        h.next_index = index.max(1);
        Ok(h)
    }

    pub fn dimension(&self) -> usize {
        self.bases.len()
    }

    pub fn bases(&self) -> &[u64] {
        &self.bases
    }

    /// 1-based index of the point the next call to [`Halton::next_point`] returns.
    pub fn next_index(&self) -> u64 {
        self.next_index
    }

    pub fn next_point(&mut self) -> Vec<f64> {
        let idx = self.next_index;
        self.next_index += 1;
        self.bases.iter().map(|&b| radical_inverse(idx, b)).collect()
    }
}

impl Iterator for Halton {
    type Item = Vec<f64>;

    fn next(&mut self) -> Option<Vec<f64>> {
        Some(self.next_point())
    }
}

/// Van der Corput radical inverse of `index` in `base`.
pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv_base = 1.0 / base as f64;
    let mut scale = inv_base;
    let mut acc = 0.0;
    while index > 0 {
        acc += (index % base) as f64 * scale;
        index /= base;
        scale *= inv_base;
    }
    acc
}

fn first_primes(count: usize) -> Vec<u64> {
    let mut primes: Vec<u64> = Vec::with_capacity(count);
    let mut candidate = 2u64;
    while primes.len() < count {
        if primes
            .iter()
            .take_while(|&&p| p * p <= candidate)
            .all(|&p| candidate % p != 0)
        {
            primes.push(candidate);
        }
        candidate += 1;
    }
    primes
}

/// Standard normal CDF, evaluated through `erfc` so the lower tail keeps
/// full relative precision.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

// Acklam's rational approximation; relative error about 1.15e-9 before refinement.
const A: [f64; 6] = [
    -3.969_683_028_665_376e1,
    2.209_460_984_245_205e2,
    -2.759_285_104_469_687e2,
    1.383_577_518_672_690e2,
    -3.066_479_806_614_716e1,
    2.506_628_277_459_239,
];
const B: [f64; 5] = [
    -5.447_609_879_822_406e1,
    1.615_858_368_580_409e2,
    -1.556_989_798_598_866e2,
    6.680_131_188_771_972e1,
    -1.328_068_155_288_572e1,
];
const C: [f64; 6] = [
    -7.784_894_002_430_293e-3,
    -3.223_964_580_411_365e-1,
    -2.400_758_277_161_838,
    -2.549_732_539_343_734,
    4.374_664_141_464_968,
    2.938_163_982_698_783,
];
const D: [f64; 4] = [
    7.784_695_709_041_462e-3,
    3.224_671_290_700_398e-1,
    2.445_134_137_142_996,
    3.754_408_661_907_416,
];
const P_LOW: f64 = 0.024_25;

/// Quantile of the standard normal distribution.
///
/// A rational first guess is polished with one Halley step, which brings
/// `|norm_cdf(z) - u|` well below `1e-9` across the open unit interval.
pub fn inv_norm_cdf(u: f64) -> Result<f64, LowDiscError> {
    if !(u > 0.0 && u < 1.0) {
        return Err(LowDiscError::Domain(u));
    }
    // Solve in the lower half and reflect, so the result is odd about 0.5.
    if u > 0.5 {
        return Ok(-lower_quantile(1.0 - u));
    }
    Ok(lower_quantile(u))
}

fn lower_quantile(p: f64) -> f64 {
    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    if p == 0.5 {
        return 0.0;
    }
    let e = norm_cdf(x) - p;
    let step = e * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
    x - step / (1.0 + 0.5 * x * step)
}
