//! Quantities appearing in the classical singular-value perturbation bounds
//! (Weyl, Wedin sin-Θ, Eckart–Young–Mirsky), packaged so property suites can
//! check them on arbitrary matrices.

use super::{op_norm, subspace_distance, svd, truncate, DenseMatrix, Result};

/// `max_i |σ_i(A) − σ_i(B)|` next to `‖A − B‖₂`.
#[derive(Clone, Copy, Debug)]
pub struct WeylReport {
    pub max_sv_shift: f64,
    pub perturbation: f64,
}

impl WeylReport {
    pub fn slack(&self) -> f64 {
        self.perturbation - self.max_sv_shift
    }
}

pub fn weyl(a: &DenseMatrix, b: &DenseMatrix) -> Result<WeylReport> {
    let sa = svd(a)?.s;
    let sb = svd(b)?.s;
    let max_sv_shift = sa
        .iter()
        .zip(&sb)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    Ok(WeylReport {
        max_sv_shift,
        perturbation: op_norm(&a.sub(b)?)?,
    })
}

/// Distance between top-`d` left singular subspaces of `A` and `B` together
/// with the gaps that enter the two sin-Θ bounds.
#[derive(Clone, Copy, Debug)]
pub struct WedinReport {
    pub distance: f64,
    pub perturbation: f64,
    /// `σ_d(A) − σ_{d+1}(B)`.
    pub gap: f64,
    /// `σ_d(A) − σ_{d+1}(A)`.
    pub gap_a: f64,
}

impl WedinReport {
    /// `‖A−B‖/γ` when `γ > 0`.
    pub fn cross_bound(&self) -> Option<f64> {
        (self.gap > 0.0).then(|| self.perturbation / self.gap)
    }

    /// `2‖A−B‖/γ_A` when `γ_A > 0` and `‖A−B‖ ≤ γ_A/2`.
    pub fn local_bound(&self) -> Option<f64> {
        (self.gap_a > 0.0 && self.perturbation <= self.gap_a / 2.0)
            .then(|| 2.0 * self.perturbation / self.gap_a)
    }
}

pub fn wedin(a: &DenseMatrix, b: &DenseMatrix, d: usize) -> Result<WedinReport> {
    let ra = svd(a)?;
    let rb = svd(b)?;
    let at = |s: &[f64], i: usize| s.get(i).copied().unwrap_or(0.0);
    Ok(WedinReport {
        distance: subspace_distance(&ra.left_basis(d), &rb.left_basis(d))?,
        perturbation: op_norm(&a.sub(b)?)?,
        gap: at(&ra.s, d - 1) - at(&rb.s, d),
        gap_a: at(&ra.s, d - 1) - at(&ra.s, d),
    })
}

/// Residual norms for the best rank-`d` approximation versus a candidate.
#[derive(Clone, Copy, Debug)]
pub struct EymReport {
    pub truncation_residual: f64,
    pub candidate_residual: f64,
    /// `σ_{d+1}(A)`, zero past the rank.
    pub next_singular_value: f64,
}

pub fn eckart_young(a: &DenseMatrix, d: usize, candidate: &DenseMatrix) -> Result<EymReport> {
    let r = svd(a)?;
    let best = truncate(&r, d)?;
    Ok(EymReport {
        truncation_residual: op_norm(&a.sub(&best)?)?,
        candidate_residual: op_norm(&a.sub(candidate)?)?,
        next_singular_value: r.s.get(d).copied().unwrap_or(0.0),
    })
}
