//! Two-stage least squares in feature space, instrument-strength diagnostics
//! and the held-out stage-2 loss.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureError, FeatureNet};
use crate::linalg::{self, dot, DenseMatrix, DenseVector, LinalgError};
use crate::spectral_loss::LearnedOperator;
use crate::synthgen::{GroundTruthOperator, Samples};

pub const DEFAULT_RIDGE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TwoSlsError {
    #[error("need more rows than features: n = {n}, d = {d}, p = {p}")]
    TooFewRows { n: usize, d: usize, p: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

pub type Result<T> = std::result::Result<T, TwoSlsError>;

/// `β̂ = (Ĉ_φψ(Ĉ_ψ+εI)⁻¹Ĉ_ψφ + εI)⁻¹ Ĉ_φψ(Ĉ_ψ+εI)⁻¹ Ê[Yψ]`.
pub fn fit_2sls(
    phi: &DenseMatrix,
    psi: &DenseMatrix,
    y: &[f64],
    ridge: f64,
) -> Result<DenseVector> {
    let (n, d, p) = (phi.rows(), phi.cols(), psi.cols());
    if psi.rows() != n || y.len() != n {
        return Err(TwoSlsError::Shape(format!(
            "phi {n} rows, psi {} rows, y {}",
            psi.rows(),
            y.len()
        )));
    }
    if n <= d.max(p) {
        return Err(TwoSlsError::TooFewRows { n, d, p });
    }
    let nf = n as f64;
    let c_psi = psi.second_moment();
    let c_psi_phi = psi.cross_moment(phi)?;
    let e: DenseVector = psi.t_matvec(y)?.into_iter().map(|v| v / nf).collect();
    // S = (Ĉ_ψ+εI)⁻¹Ĉ_ψφ, so Sᵀ = Ĉ_φψ(Ĉ_ψ+εI)⁻¹.
    let s = linalg::ridge_solve(&c_psi, &c_psi_phi, ridge)?;
    let inner = s.t_matmul(&c_psi_phi)?;
    let rhs = s.t_matvec(&e)?;
    Ok(linalg::ridge_solve_vec(&inner, &rhs, ridge)?)
}

/// Ordinary least squares of `y` on `φ(X)`, ignoring the instrument.
pub fn fit_ols(phi: &DenseMatrix, y: &[f64], ridge: f64) -> Result<DenseVector> {
    if y.len() != phi.rows() {
        return Err(TwoSlsError::Shape("y length".into()));
    }
    let n = phi.rows() as f64;
    let rhs: DenseVector = phi.t_matvec(y)?.into_iter().map(|v| v / n).collect();
    Ok(linalg::ridge_solve_vec(&phi.second_moment(), &rhs, ridge)?)
}

/// `ĥ(x) = φ(x)ᵀβ̂` for a concrete feature network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuralEstimate {
    pub phi: FeatureNet,
    pub beta: DenseVector,
    pub ridge_used: f64,
}

impl StructuralEstimate {
    /// 2SLS on `data` with the operator's φ and ψ networks.
    pub fn fit(learned: &LearnedOperator, data: Samples<'_>, ridge: f64) -> Result<Self> {
        let phi = learned.phi.features(data.x)?;
        let psi = learned.psi.features(data.z)?;
        Ok(Self {
            phi: learned.phi.clone(),
            beta: fit_2sls(&phi, &psi, data.y, ridge)?,
            ridge_used: ridge,
        })
    }

    /// Naive regression of `Y` on `φ(X)`.
    pub fn fit_naive(phi_net: &FeatureNet, data: Samples<'_>, ridge: f64) -> Result<Self> {
        let phi = phi_net.features(data.x)?;
        Ok(Self {
            phi: phi_net.clone(),
            beta: fit_ols(&phi, data.y, ridge)?,
            ridge_used: ridge,
        })
    }
}

pub fn predict(est: &StructuralEstimate, xs: &[f64]) -> Result<DenseVector> {
    let f = est.phi.features(xs)?;
    if f.cols() != est.beta.len() {
        return Err(TwoSlsError::Shape(format!(
            "{} features vs {} coefficients",
            f.cols(),
            est.beta.len()
        )));
    }
    Ok(f.matvec(&est.beta)?)
}

/// Monte-Carlo mean and standard error of `(ĥ(X) − h₀(X))²` over fresh
/// uniform draws of `X`.
pub fn mse_l2_with_se(
    est: &StructuralEstimate,
    op: &GroundTruthOperator,
    n_eval: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n_eval).map(|_| rng.random_range(-PI..PI)).collect();
    let h = predict(est, &xs)?;
    let sq: Vec<f64> = xs
        .iter()
        .zip(&h)
        .map(|(&x, hv)| (hv - op.h0(x)).powi(2))
        .collect();
    let n = sq.len() as f64;
    let mean = sq.iter().sum::<f64>() / n;
    let var = sq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok((mean, (var / n).sqrt()))
}

pub fn mse_l2(est: &StructuralEstimate, op: &GroundTruthOperator, n_eval: usize, seed: u64) -> Result<f64> {
    Ok(mse_l2_with_se(est, op, n_eval, seed)?.0)
}

/// `σ_min(Ĉ_ψ^{-1/2} Ĉ_ψφ Ĉ_φ^{-1/2})`.
pub fn illposedness(phi: &DenseMatrix, psi: &DenseMatrix, cov_eps: f64) -> Result<f64> {
    if phi.shape() != psi.shape() {
        return Err(TwoSlsError::Shape(format!(
            "phi {:?} vs psi {:?}",
            phi.shape(),
            psi.shape()
        )));
    }
    let wz = linalg::sym_inv_sqrt(&psi.second_moment(), cov_eps)?;
    let wx = linalg::sym_inv_sqrt(&phi.second_moment(), cov_eps)?;
    let k = wz.matmul(&psi.cross_moment(phi)?)?.matmul(&wx)?;
    Ok(linalg::singular_values(&k)?.last().copied().unwrap_or(0.0))
}

/// `max_{i,j} |(Ĉ^{-1/2} f_i)_j|` over the supplied rows.
pub fn boundedness_rho(feats: &DenseMatrix, cov_eps: f64) -> Result<f64> {
    if feats.rows() < feats.cols() {
        return Err(TwoSlsError::TooFewRows {
            n: feats.rows(),
            d: feats.cols(),
            p: feats.cols(),
        });
    }
    let w = linalg::sym_inv_sqrt(&feats.second_moment(), cov_eps)?;
    Ok(feats.matmul(&w)?.max_abs())
}

/// Held-out mean of `(ψ(z_i)ᵀĈ_φβ̂ − y_i)²`.
pub fn stage2_loss(
    learned: &LearnedOperator,
    est: &StructuralEstimate,
    heldout: Samples<'_>,
) -> Result<f64> {
    let phi = learned.phi.features(heldout.x)?;
    let psi = learned.psi.features(heldout.z)?;
    if est.beta.len() != phi.cols() {
        return Err(TwoSlsError::Shape("beta length vs phi width".into()));
    }
    let proj = phi.second_moment().matvec(&est.beta)?;
    let n = psi.rows() as f64;
    Ok((0..psi.rows())
        .map(|i| (dot(psi.row(i), &proj) - heldout.y[i]).powi(2))
        .sum::<f64>()
        / n)
}
