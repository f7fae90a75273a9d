//! Singular structure of a learned augmented operator, spectral alignment of
//! the structural function with the learned features, and δ-selection rules.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureError;
use crate::linalg::{self, dot, DenseMatrix, DenseVector, LinalgError};
use crate::spectral_loss::{LearnedOperator, TrainTrace};
use crate::synthgen::{GroundTruthOperator, Samples};
use crate::twosls::{self, StructuralEstimate, TwoSlsError};

/// Components with `σ̂` below this are left out of the plug-in estimate.
pub const SIGMA_DROP: f64 = 1e-8;
/// Default relative tolerance of the loss-balance rule.
pub const DEFAULT_ETA: f64 = 0.1;

#[derive(Debug, Error)]
pub enum AlignmentError {
    #[error("moment split has {n} rows; need at least {need}")]
    SplitTooSmall { n: usize, need: usize },
    #[error("degenerate augmentation direction: ω̂ᵀω̂ = {0}")]
    DegenerateOmega(f64),
    #[error("no candidates to select from")]
    Empty,
    #[error("delta grid lacks δ = 0")]
    MissingBaseline,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    TwoSls(#[from] TwoSlsError),
}

pub type Result<T> = std::result::Result<T, AlignmentError>;

/// Whitened singular triples of `Ψ[Φ* | ω]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalSvd {
    pub sigma_hat: DenseVector,
    /// Column `i` expresses `ψ̂_i` in the learned ψ features.
    pub left_coeffs: DenseMatrix,
    /// Column `i` expresses the φ-part of the `i`-th right singular function.
    pub right_coeffs: DenseMatrix,
    /// Augmentation coordinate of each right singular function.
    pub omega_hat: DenseVector,
}

/// SVD of the learned operator from its Gram matrices:
/// `K = C_ψ^{1/2} G_r^{1/2}` with `G_r = C_φ + ωωᵀ`.
pub fn empirical_svd_from_moments(
    c_psi: &DenseMatrix,
    c_phi: &DenseMatrix,
    omega: &[f64],
    cov_eps: f64,
) -> Result<EmpiricalSvd> {
    let d = c_psi.rows();
    if c_phi.shape() != (d, d) || c_psi.cols() != d || omega.len() != d {
        return Err(AlignmentError::Shape(format!(
            "C_psi {:?}, C_phi {:?}, omega {}",
            c_psi.shape(),
            c_phi.shape(),
            omega.len()
        )));
    }
    let mut g_r = c_phi.clone();
    for i in 0..d {
        for j in 0..d {
            g_r.set(i, j, g_r.get(i, j) + omega[i] * omega[j]);
        }
    }
    let k = linalg::sym_sqrt(c_psi, cov_eps)?.matmul(&linalg::sym_sqrt(&g_r, cov_eps)?)?;
    let svd = linalg::svd(&k)?;
    let left_coeffs = linalg::sym_inv_sqrt(c_psi, cov_eps)?.matmul(&svd.u)?;
    let right_coeffs = linalg::sym_inv_sqrt(&g_r, cov_eps)?.matmul(&svd.vt.transpose())?;
    let omega_hat = right_coeffs.t_matvec(omega)?;
    Ok(EmpiricalSvd {
        sigma_hat: svd.s,
        left_coeffs,
        right_coeffs,
        omega_hat,
    })
}

pub fn empirical_svd(learned: &LearnedOperator, data: Samples<'_>, cov_eps: f64) -> Result<EmpiricalSvd> {
    let need = 10 * learned.d;
    if data.len() < need {
        return Err(AlignmentError::SplitTooSmall { n: data.len(), need });
    }
    let phi = learned.phi.features(data.x)?;
    let psi = learned.psi.features(data.z)?;
    empirical_svd_from_moments(&psi.second_moment(), &phi.second_moment(), &learned.omega, cov_eps)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentEstimate {
    pub value: f64,
    /// Components skipped because `σ̂ < SIGMA_DROP`.
    pub dropped: usize,
}

/// `α̂ᵀ(I − ω̂ω̂ᵀ)⁻¹α̂` with `α̂_i = E[Yψ̂_i]/σ̂_i`, where `e_y_psi = E[Yψ]` in
/// the learned ψ coordinates.
pub fn alignment_from_moments(emp: &EmpiricalSvd, e_y_psi: &[f64]) -> Result<AlignmentEstimate> {
    let proj = emp.left_coeffs.t_matvec(e_y_psi)?;
    let keep: Vec<usize> = (0..emp.sigma_hat.len())
        .filter(|&i| emp.sigma_hat[i] >= SIGMA_DROP)
        .collect();
    let alpha: DenseVector = keep.iter().map(|&i| proj[i] / emp.sigma_hat[i]).collect();
    let w: DenseVector = keep.iter().map(|&i| emp.omega_hat[i]).collect();
    let ww = dot(&w, &w);
    if ww >= 1.0 - 1e-8 {
        return Err(AlignmentError::DegenerateOmega(ww));
    }
    let wa = dot(&w, &alpha);
    Ok(AlignmentEstimate {
        value: dot(&alpha, &alpha) + wa * wa / (1.0 - ww),
        dropped: emp.sigma_hat.len() - keep.len(),
    })
}

/// Plug-in alignment with `E[Yψ]` estimated on `heldout`.
pub fn alignment_plugin(
    emp: &EmpiricalSvd,
    learned: &LearnedOperator,
    heldout: Samples<'_>,
) -> Result<AlignmentEstimate> {
    let psi = learned.psi.features(heldout.z)?;
    let n = psi.rows() as f64;
    let e: DenseVector = psi.t_matvec(heldout.y)?.into_iter().map(|v| v / n).collect();
    alignment_from_moments(emp, &e)
}

/// `‖Π h‖²` for the empirical projection of `h` onto the column span of `feats`.
pub fn projection_norm_sq(feats: &DenseMatrix, h: &[f64]) -> Result<f64> {
    let n = feats.rows() as f64;
    let b: DenseVector = feats.t_matvec(h)?.into_iter().map(|v| v / n).collect();
    let c = feats.second_moment();
    let ridge = 1e-12 * (1.0 + c.diag().iter().sum::<f64>());
    let coef = linalg::ridge_solve_vec(&c, &b, ridge)?;
    Ok(dot(&coef, &b))
}

/// Monte-Carlo `‖Π_{φ} h₀‖²` over fresh uniform draws of `X`.
pub fn alignment_true(
    learned: &LearnedOperator,
    op: &GroundTruthOperator,
    n_eval: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n_eval).map(|_| rng.random_range(-PI..PI)).collect();
    let feats = learned.phi.features(&xs)?;
    let h: DenseVector = xs.iter().map(|&x| op.h0(x)).collect();
    projection_norm_sq(&feats, &h)
}

fn sorted_by_delta<T>(items: &[(f64, T)]) -> Vec<&(f64, T)> {
    let mut v: Vec<&(f64, T)> = items.iter().collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    v
}

/// Largest δ whose final `L̂₀` stays within `eta·|L̂₀(0)|` of the δ = 0 run.
pub fn select_delta_loss_balance(traces: &[(f64, TrainTrace)], eta: f64) -> Result<f64> {
    if traces.is_empty() {
        return Err(AlignmentError::Empty);
    }
    let final_l0 = |t: &TrainTrace| t.last().map(|r| r.l0).unwrap_or(f64::NAN);
    let base = traces
        .iter()
        .find(|(d, _)| *d == 0.0)
        .map(|(_, t)| final_l0(t))
        .ok_or(AlignmentError::MissingBaseline)?;
    let threshold = base + eta * base.abs();
    Ok(sorted_by_delta(traces)
        .into_iter()
        .filter(|(_, t)| final_l0(t) <= threshold)
        .map(|(d, _)| *d)
        .fold(0.0, f64::max))
}

/// First index minimizing (or maximizing) `score` over candidates sorted by δ.
fn pick(scored: Vec<(f64, f64)>, minimize: bool) -> Result<f64> {
    let mut best: Option<(f64, f64)> = None;
    for (delta, s) in scored {
        let better = match best {
            None => true,
            Some((_, b)) => {
                if minimize {
                    s < b
                } else {
                    s > b
                }
            }
        };
        if better && !s.is_nan() {
            best = Some((delta, s));
        }
    }
    best.map(|b| b.0).ok_or(AlignmentError::Empty)
}

/// δ minimizing the held-out stage-2 loss; ties go to the smaller δ.
pub fn select_delta_stage2(
    candidates: &[(f64, (LearnedOperator, StructuralEstimate))],
    heldout: Samples<'_>,
) -> Result<f64> {
    let mut scored = Vec::new();
    for (delta, (learned, est)) in sorted_by_delta(candidates) {
        scored.push((*delta, twosls::stage2_loss(learned, est, heldout)?));
    }
    pick(scored, true)
}

/// δ maximizing plug-in alignment on `heldout`; ties go to the smaller δ.
pub fn select_delta_alignment(
    candidates: &[(f64, LearnedOperator)],
    heldout: Samples<'_>,
    cov_eps: f64,
) -> Result<f64> {
    let mut scored = Vec::new();
    for (delta, learned) in sorted_by_delta(candidates) {
        let emp = empirical_svd(learned, heldout, cov_eps)?;
        let v = alignment_plugin(&emp, learned, heldout).map(|a| a.value).unwrap_or(f64::NAN);
        scored.push((*delta, v));
    }
    pick(scored, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureNet, InputEncoding};
    use crate::spectral_loss::TraceRecord;
    use rand_distr::StandardNormal;

    fn trace(l0: f64) -> TrainTrace {
        TrainTrace {
            records: vec![TraceRecord { step: 10, l0, r_delta: 0.0, ortho_pen: 0.0 }],
        }
    }

    #[test]
    fn diagonal_case() {
        let s = [0.9, 0.5, 0.2];
        let c = DenseMatrix::identity(3);
        // ψ whitened, φ with C_φ = diag(s²) so the operator is diag(s) in whitened coordinates
        let c_phi = DenseMatrix::from_diag(&s.iter().map(|v| v * v).collect::<Vec<_>>());
        let emp = empirical_svd_from_moments(&c, &c_phi, &[0.0; 3], 0.0).unwrap();
        for (a, b) in emp.sigma_hat.iter().zip(&s) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(emp.omega_hat.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn mixing_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = DenseMatrix::from_fn(200, 3, |_, _| rng.sample(StandardNormal));
        let g = DenseMatrix::from_fn(200, 3, |_, _| rng.sample(StandardNormal));
        let w = vec![0.2, -0.4, 0.1];
        let base = empirical_svd_from_moments(&g.second_moment(), &f.second_moment(), &w, 0.0).unwrap();
        let mix = DenseMatrix::from_fn(3, 3, |i, j| if i == j { 2.0 } else { 0.3 * (i + j) as f64 });
        let mix_inv_t = linalg::ridge_solve(&mix, &DenseMatrix::identity(3), 0.0).unwrap().transpose();
        // φ ↦ φM, ψ ↦ ψM⁻ᵀ, ω ↦ Mᵀω leaves Ψ[Φ*|ω] unchanged
        let f2 = f.matmul(&mix).unwrap();
        let g2 = g.matmul(&mix_inv_t).unwrap();
        let w2 = mix.t_matvec(&w).unwrap();
        let other = empirical_svd_from_moments(&g2.second_moment(), &f2.second_moment(), &w2, 0.0).unwrap();
        for (a, b) in base.sigma_hat.iter().zip(&other.sigma_hat) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn plugin_without_augmentation_is_alpha_norm() {
        let emp = EmpiricalSvd {
            sigma_hat: vec![0.5, 0.25],
            left_coeffs: DenseMatrix::identity(2),
            right_coeffs: DenseMatrix::identity(2),
            omega_hat: vec![0.0, 0.0],
        };
        let a = alignment_from_moments(&emp, &[0.1, 0.05]).unwrap();
        assert!((a.value - (0.04 + 0.04)).abs() < 1e-15);
        assert_eq!(a.dropped, 0);
    }

    #[test]
    fn plugin_drops_null_components_and_rejects_degenerate_omega() {
        let emp = EmpiricalSvd {
            sigma_hat: vec![0.5, 0.0],
            left_coeffs: DenseMatrix::identity(2),
            right_coeffs: DenseMatrix::identity(2),
            omega_hat: vec![0.0, 0.9],
        };
        let a = alignment_from_moments(&emp, &[0.1, 0.3]).unwrap();
        assert_eq!(a.dropped, 1);
        assert!((a.value - 0.04).abs() < 1e-15);
        let bad = EmpiricalSvd { omega_hat: vec![1.0, 0.0], ..emp };
        assert!(matches!(
            alignment_from_moments(&bad, &[0.1, 0.3]),
            Err(AlignmentError::DegenerateOmega(_))
        ));
    }

    #[test]
    fn nested_projections_are_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = DenseMatrix::from_fn(500, 5, |_, _| rng.sample(StandardNormal));
        let h: Vec<f64> = (0..500).map(|_| rng.sample(StandardNormal)).collect();
        let mut prev = 0.0;
        for k in 1..=5 {
            let sub = f.select_columns(&(0..k).collect::<Vec<_>>());
            let v = projection_norm_sq(&sub, &h).unwrap();
            assert!(v >= prev - 1e-12);
            prev = v;
        }
    }

    #[test]
    fn loss_balance_rule() {
        let flat = vec![(0.0, trace(-1.0)), (0.5, trace(-1.0)), (3.0, trace(-1.0)), (1.0, trace(-1.0))];
        assert_eq!(select_delta_loss_balance(&flat, 0.1).unwrap(), 3.0);
        let blown = vec![(0.0, trace(-1.0)), (0.5, trace(-0.5)), (1.0, trace(0.0))];
        assert_eq!(select_delta_loss_balance(&blown, 0.1).unwrap(), 0.0);
        let mixed = vec![(0.0, trace(-1.0)), (0.5, trace(-0.95)), (1.0, trace(-0.8))];
        assert_eq!(select_delta_loss_balance(&mixed, 0.1).unwrap(), 0.5);
        assert!(matches!(select_delta_loss_balance(&[], 0.1), Err(AlignmentError::Empty)));
        assert!(matches!(
            select_delta_loss_balance(&[(1.0, trace(-1.0))], 0.1),
            Err(AlignmentError::MissingBaseline)
        ));
    }

    fn linear_op(w: DenseMatrix) -> LearnedOperator {
        let net = FeatureNet::from_linear_weights(InputEncoding::Raw, w).unwrap();
        LearnedOperator::new(net.clone(), net, 0.0).unwrap()
    }

    #[test]
    fn stage2_prefers_exact_model_and_ties_go_low() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = z.clone();
        let y: Vec<f64> = z.iter().map(|v| 2.0 * v).collect();
        let data = Samples { z: &z, x: &x, y: &y };
        let op = linear_op(DenseMatrix::identity(1));
        let est = |b: f64| StructuralEstimate { phi: op.phi.clone(), beta: vec![b], ridge_used: 0.0 };
        let c = vec![
            (1.0, (op.clone(), est(0.5))),
            (0.5, (op.clone(), est(2.0))),
            (3.0, (op.clone(), est(-1.0))),
        ];
        assert_eq!(select_delta_stage2(&c, data).unwrap(), 0.5);
        let tie = vec![(1.0, (op.clone(), est(2.0))), (0.5, (op.clone(), est(2.0)))];
        assert_eq!(select_delta_stage2(&tie, data).unwrap(), 0.5);
        let single = vec![(3.0, (op.clone(), est(0.0)))];
        assert_eq!(select_delta_stage2(&single, data).unwrap(), 3.0);
    }
}
