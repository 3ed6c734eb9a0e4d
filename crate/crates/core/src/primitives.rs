//! Two classic secure building blocks: ring summation with a random mask and
//! two-party matrix products through an orthogonal-complement basis.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::sim::standard_normal_matrix;

/// Fractional bits of the fixed-point encoding used on the summation ring.
pub const FIXED_FRAC_BITS: u32 = 40;
const FIXED_ONE: f64 = (1u64 << FIXED_FRAC_BITS) as f64;
const MAX_SUMMAND: f64 = 1e24;

/// Encode a finite scalar as a fixed-point ring element.
pub fn to_fixed(v: f64) -> Result<i128> {
    if !v.is_finite() || v.abs() > MAX_SUMMAND {
        return Err(Error::Domain(format!("{v} cannot be placed on the summation ring")));
    }
    Ok((v * FIXED_ONE).round() as i128)
}

pub fn from_fixed(v: i128) -> f64 {
    let int = v >> FIXED_FRAC_BITS;
    let frac = v - (int << FIXED_FRAC_BITS);
    int as f64 + frac as f64 / FIXED_ONE
}

/// Running value of a summation ring as it travels between parties.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskedAccumulator {
    pub value: i128,
}

impl MaskedAccumulator {
    pub fn add(self, v: f64) -> Result<Self> {
        Ok(Self { value: self.value.wrapping_add(to_fixed(v)?) })
    }

    pub fn unmask(self, mask: i128) -> f64 {
        from_fixed(self.value.wrapping_sub(mask))
    }
}

/// Record of one secure summation.
#[derive(Debug, Clone, PartialEq)]
pub struct SecureSum {
    pub total: f64,
    /// The initiator's mask `R`, as a scalar.
    pub mask: f64,
    /// Ring element sent by party `i` (the last one returns to the initiator).
    pub transmitted: Vec<i128>,
}

impl SecureSum {
    pub fn transmitted_values(&self) -> Vec<f64> {
        self.transmitted.iter().map(|&v| from_fixed(v)).collect()
    }
}

/// Draw an initiator mask with `|R| ∈ [scale/2, scale]` and random sign.
pub fn draw_mask<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> Result<i128> {
    if !(scale > 0.0) {
        return Err(Error::Domain(format!("mask scale must be positive, got {scale}")));
    }
    let magnitude = rng.random_range(0.5 * scale..=scale);
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    to_fixed(sign * magnitude)
}

/// Ring summation: party 1 adds the mask `R` to its value, each party adds
/// its own value in ring order, and party 1 removes `R` when the ring closes.
/// `values[i]` belongs to party `i+1`.
pub fn secure_sum<R: Rng + ?Sized>(values: &[f64], mask_scale: f64, rng: &mut R) -> Result<SecureSum> {
    if values.len() < 2 {
        return Err(Error::Layout(format!("secure sum needs a ring of at least 2 parties, got {}", values.len())));
    }
    let mask = draw_mask(rng, mask_scale)?;
    let mut acc = MaskedAccumulator { value: mask };
    let mut transmitted = Vec::with_capacity(values.len());
    for &v in values {
        acc = acc.add(v)?;
        transmitted.push(acc.value);
    }
    Ok(SecureSum { total: acc.unmask(mask), mask: from_fixed(mask), transmitted })
}

/// Orthonormal basis `Z` (`n × a`) of a random subspace orthogonal to `X1`'s columns.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalComplementBasis {
    pub z: DMatrix<f64>,
    pub a: usize,
}

/// Numerical rank and orthonormal column-space basis of `x`.
fn column_space(x: &DMatrix<f64>) -> (usize, DMatrix<f64>) {
    if x.ncols() == 0 {
        return (0, DMatrix::zeros(x.nrows(), 0));
    }
    let svd = x.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let smax = svd.singular_values.max();
    let tol = smax * (x.nrows().max(x.ncols()) as f64) * f64::EPSILON;
    let keep: Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > tol && smax > 0.0).collect();
    (keep.len(), u.select_columns(&keep))
}

/// Default complement rank `min(n − p1, ⌊n/2⌋)`.
pub fn default_rank(n: usize, p1: usize) -> usize {
    n.saturating_sub(p1).min(n / 2)
}

impl OrthogonalComplementBasis {
    /// Party 1's step: random `Z` with `ZᵀZ = I` and `ZᵀX1 = 0`.
    pub fn generate<R: Rng + ?Sized>(x1: &DMatrix<f64>, a: usize, rng: &mut R) -> Result<Self> {
        let n = x1.nrows();
        let (rank, basis) = column_space(x1);
        if a == 0 || a > n - rank {
            return Err(Error::Rank(format!("no orthogonal complement of rank {a}: n = {n}, rank(X1) = {rank}")));
        }
        let mut z = standard_normal_matrix(rng, n, a);
        // two projection passes keep ZᵀX1 at rounding level
        for _ in 0..2 {
            z -= &basis * (basis.transpose() * &z);
            z = z.qr().q();
        }
        Ok(Self { z, a })
    }

    /// Party 2's step: `W = (I − Z Zᵀ) X2`.
    pub fn project(&self, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x2.nrows() != self.z.nrows() {
            return Err(Error::Shape(format!("X2 has {} rows, basis has {}", x2.nrows(), self.z.nrows())));
        }
        Ok(x2 - &self.z * (self.z.transpose() * x2))
    }
}

/// Result of a two-party product.
#[derive(Debug, Clone, PartialEq)]
pub struct SecureProduct {
    /// `X1ᵀ X2`, `p1 × p2`.
    pub product: DMatrix<f64>,
    /// The basis party 1 sent to party 2.
    pub basis: OrthogonalComplementBasis,
    /// The projected matrix party 2 sent back.
    pub projected: DMatrix<f64>,
}

/// `X1ᵀ X2` without either party seeing the other's matrix: party 1 sends
/// `Z`, party 2 returns `W = (I − ZZᵀ) X2`, party 1 computes `X1ᵀ W`.
/// `a = None` uses [`default_rank`].
pub fn secure_matmul<R: Rng + ?Sized>(x1: &DMatrix<f64>, x2: &DMatrix<f64>, a: Option<usize>, rng: &mut R) -> Result<SecureProduct> {
    if x1.nrows() != x2.nrows() {
        return Err(Error::Shape(format!("X1 has {} rows, X2 has {}", x1.nrows(), x2.nrows())));
    }
    let a = a.unwrap_or_else(|| default_rank(x1.nrows(), x1.ncols()));
    let basis = OrthogonalComplementBasis::generate(x1, a, rng)?;
    let projected = basis.project(x2)?;
    Ok(SecureProduct { product: x1.transpose() * &projected, basis, projected })
}
