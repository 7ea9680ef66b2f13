//! One-step multidimensional tree with equally likely branches.
//!
//! Branch `m` moves asset `i` to `x_i · exp((r − η_i − σ_i²/2)Δt + σ_i (Σ G_m)_i √Δt)`
//! where `G_m ∈ {−1, +1}^d` and `Σ Σᵀ = Γ`.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::correlation::{gamma_from_slice, CorrelationError};
use crate::engine::ModelSpec;
use crate::sqp::UvmPoint;

/// Largest dimension for which subsampled branch sets can be drawn.
pub const MAX_BRANCH_DIM: usize = 62;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TreeError {
    #[error("branch count {m} invalid for dimension {d}: must be even with 2 <= M <= 2^d")]
    BranchCount { d: usize, m: usize },
    #[error("dimension {0} unsupported for branch sets")]
    Dimension(usize),
    #[error("state has {got} components, model has {expected}")]
    StateDimension { expected: usize, got: usize },
    #[error("time step must be positive, got {0}")]
    TimeStep(f64),
    #[error(transparent)]
    Correlation(#[from] CorrelationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchMode {
    Full,
    Subsampled,
}

/// Sign vectors of the tree, stored row-major as `M × d` entries of ±1.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchSet {
    dim: usize,
    mode: BranchMode,
    signs: Vec<f64>,
}

impl BranchSet {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> BranchMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.signs.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }

    pub fn sign(&self, m: usize) -> &[f64] {
        &self.signs[m * self.dim..(m + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.signs.chunks_exact(self.dim)
    }
}

/// Writes the sign vector whose bit `i` (set ↦ +1) drives asset `i`.
fn push_code(signs: &mut Vec<f64>, code: u64, dim: usize) {
    for i in 0..dim {
        signs.push(if (code >> i) & 1 == 1 { 1.0 } else { -1.0 });
    }
}

/// All `2^d` sign vectors when `m == 2^d`, otherwise `m/2` antithetic pairs
/// sampled without replacement.
///
/// Pairs are identified by their representative with a negative last sign,
/// so the draw is over the `2^{d−1}` pairs, never over individual vectors.
pub fn make_branches(dim: usize, m: usize, seed: u64) -> Result<BranchSet, TreeError> {
    if dim == 0 || dim > MAX_BRANCH_DIM {
        return Err(TreeError::Dimension(dim));
    }
    let total = 1u64 << dim;
    if m % 2 == 1 || m < 2 || m as u64 > total {
        return Err(TreeError::BranchCount { d: dim, m });
    }
    let mut signs = Vec::with_capacity(m * dim);
    if m as u64 == total {
        for code in 0..total {
            push_code(&mut signs, code, dim);
        }
        return Ok(BranchSet {
            dim,
            mode: BranchMode::Full,
            signs,
        });
    }
    let half = usize::try_from(total / 2).map_err(|_| TreeError::Dimension(dim))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = index::sample(&mut rng, half, m / 2).into_vec();
    picks.sort_unstable();
    let flip = total - 1;
    for code in picks {
        let code = code as u64;
        push_code(&mut signs, code, dim);
        push_code(&mut signs, code ^ flip, dim);
    }
    Ok(BranchSet {
        dim,
        mode: BranchMode::Subsampled,
        signs,
    })
}

/// Mixes `(seed, n, p)` into a stream seed; the same triple always maps to
/// the same branch subsample.
pub fn branch_seed(seed: u64, n: usize, p: usize) -> u64 {
    let mut z = seed;
    for v in [n as u64, p as u64] {
        z = splitmix(z ^ splitmix(v.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    z
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Correlated log-increments `σ_i (Σ G_m)_i √Δt + drift_i`, row-major `M × d`.
pub(crate) fn log_increments(
    c: &UvmPoint,
    dt: f64,
    model: &ModelSpec,
    branches: &BranchSet,
) -> Result<Vec<f64>, TreeError> {
    let d = branches.dim();
    if c.sigma.len() != d || model.dim() != d {
        return Err(TreeError::StateDimension {
            expected: d,
            got: c.sigma.len(),
        });
    }
    if !(dt > 0.0) {
        return Err(TreeError::TimeStep(dt));
    }
    let root = gamma_from_slice(d, &c.rho).sqrt()?;
    let sq = dt.sqrt();
    let drift: Vec<f64> = (0..d)
        .map(|i| (model.rate - model.dividends[i] - 0.5 * c.sigma[i] * c.sigma[i]) * dt)
        .collect();
    let mut out = Vec::with_capacity(branches.len() * d);
    for g in branches.iter() {
        for i in 0..d {
            let mut z = 0.0;
            for k in 0..d {
                z += root[[i, k]] * g[k];
            }
            out.push(drift[i] + c.sigma[i] * z * sq);
        }
    }
    Ok(out)
}

/// Discounted equal-weight average of `continuation` over the branch points.
pub fn step_expectation<F>(
    x: &[f64],
    c: &UvmPoint,
    dt: f64,
    model: &ModelSpec,
    branches: &BranchSet,
    continuation: F,
) -> Result<f64, TreeError>
where
    F: Fn(&[f64]) -> f64,
{
    let d = branches.dim();
    if x.len() != d {
        return Err(TreeError::StateDimension {
            expected: d,
            got: x.len(),
        });
    }
    let incs = log_increments(c, dt, model, branches)?;
    let mut next = vec![0.0; d];
    let mut acc = 0.0;
    for row in incs.chunks_exact(d) {
        for i in 0..d {
            next[i] = x[i] * row[i].exp();
        }
        acc += continuation(&next);
    }
    Ok((-model.rate * dt).exp() * acc / branches.len() as f64)
}
