//! Contrastive spectral losses on feature batches and the feature-training loop.
//!
//! `φ` features (treatment side) and `ψ` features (instrument side) arrive as
//! `B × d` matrices whose rows are paired samples from the joint law.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{
    backward_cached, forward_cached, AdamConfig, AdamState, FeatureError, FeatureNet,
};
use crate::linalg::{self, dot, DenseMatrix, DenseVector, LinalgError};
use crate::synthgen::Samples;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("batch of {0} rows; need at least 2")]
    BatchTooSmall(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("loss diverged at step {step}")]
    Diverged { step: usize, trace: TrainTrace },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LossError>;

fn check_pair(phi: &DenseMatrix, psi: &DenseMatrix) -> Result<usize> {
    if phi.shape() != psi.shape() {
        return Err(LossError::Shape(format!(
            "phi {:?} vs psi {:?}",
            phi.shape(),
            psi.shape()
        )));
    }
    let b = phi.rows();
    if b < 2 {
        return Err(LossError::BatchTooSmall(b));
    }
    Ok(b)
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(LossError::Shape(format!("{what}: length {got}, expected {want}")));
    }
    Ok(())
}

/// Row-wise inner products `φ_iᵀψ_i`.
fn paired_products(phi: &DenseMatrix, psi: &DenseMatrix) -> DenseVector {
    (0..phi.rows()).map(|i| dot(phi.row(i), psi.row(i))).collect()
}

fn frob_inner(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// `(1/(B(B−1))) Σ_{i≠j} (φ_iᵀψ_j)² − (2/B) Σ_i φ_iᵀψ_i`.
pub fn loss_l0(phi: &DenseMatrix, psi: &DenseMatrix) -> Result<f64> {
    let b = check_pair(phi, psi)? as f64;
    let s = paired_products(phi, psi);
    let all_pairs = frob_inner(&phi.t_matmul(phi)?, &psi.t_matmul(psi)?);
    let diag: f64 = s.iter().map(|v| v * v).sum();
    Ok((all_pairs - diag) / (b * (b - 1.0)) - 2.0 * s.iter().sum::<f64>() / b)
}

/// `Ê[f(y)·ψ]` for the moment target `f`.
fn outcome_moment(psi: &DenseMatrix, y: &[f64]) -> Result<DenseVector> {
    let b = psi.rows() as f64;
    Ok(psi.t_matvec(y)?.into_iter().map(|v| v / b).collect())
}

/// `L̂₀ + ωᵀĈ_ψω − 2δ·Ê[yψ]ᵀω`.
pub fn loss_ldelta_extended(
    phi: &DenseMatrix,
    psi: &DenseMatrix,
    y: &[f64],
    omega: &[f64],
    delta: f64,
) -> Result<f64> {
    loss_higher_rank(phi, psi, y, &[omega.to_vec()], &[delta])
}

/// Profile form: returns `(L̂₀ + R̂_δ, R̂_δ)` with
/// `R̂_δ = −δ²·Ê[yψ]ᵀ(Ĉ_ψ + εI)⁻¹Ê[yψ]`.
pub fn loss_ldelta_profile(
    phi: &DenseMatrix,
    psi: &DenseMatrix,
    y: &[f64],
    delta: f64,
    cov_eps: f64,
) -> Result<(f64, f64)> {
    let l0 = loss_l0(phi, psi)?;
    check_len("y", y.len(), psi.rows())?;
    if delta == 0.0 {
        return Ok((l0, 0.0));
    }
    let e = outcome_moment(psi, y)?;
    let sol = linalg::ridge_solve_vec(&psi.second_moment(), &e, cov_eps)?;
    let r = -delta * delta * dot(&e, &sol);
    Ok((l0 + r, r))
}

/// `L̂₀ + Σ_k [ω_kᵀĈ_ψω_k − 2δ_k·Ê[y^k ψ]ᵀω_k]`, with `k` counted from 1.
pub fn loss_higher_rank(
    phi: &DenseMatrix,
    psi: &DenseMatrix,
    y: &[f64],
    omegas: &[DenseVector],
    deltas: &[f64],
) -> Result<f64> {
    Ok(loss_and_grad(phi, psi, y, omegas, deltas, false)?.value)
}

/// Population (or any exact) second-order moments that determine the loss
/// of a feature pair.
#[derive(Clone, Debug, PartialEq)]
pub struct LossMoments {
    /// `E[φφᵀ]` under the X-marginal.
    pub c_phi: DenseMatrix,
    /// `E[ψψᵀ]` under the Z-marginal.
    pub c_psi: DenseMatrix,
    /// `E[φ(X)ᵀψ(Z)]` under the joint law.
    pub joint: f64,
    /// `E[Y^k ψ(Z)]` for `k = 1..K`.
    pub e_y_psi: Vec<DenseVector>,
}

/// `tr(C_ψC_φ) − 2E[φᵀψ] + Σ_k [ω_kᵀC_ψω_k − 2δ_k E[Y^kψ]ᵀω_k]`.
pub fn loss_from_moments(m: &LossMoments, omegas: &[DenseVector], deltas: &[f64]) -> Result<f64> {
    check_len("omegas", omegas.len(), deltas.len())?;
    if omegas.len() > m.e_y_psi.len() {
        return Err(LossError::Shape(format!(
            "{} augmentation terms but {} outcome moments",
            omegas.len(),
            m.e_y_psi.len()
        )));
    }
    let mut v = frob_inner(&m.c_psi, &m.c_phi) - 2.0 * m.joint;
    for ((w, &delta), e) in omegas.iter().zip(deltas).zip(&m.e_y_psi) {
        v += dot(w, &m.c_psi.matvec(w)?) - 2.0 * delta * dot(e, w);
    }
    Ok(v)
}

/// `‖FᵀF/B − I‖²_F`.
pub fn orthonormal_penalty(feats: &DenseMatrix) -> Result<f64> {
    let b = feats.rows();
    if b < 2 {
        return Err(LossError::BatchTooSmall(b));
    }
    let mut c = feats.second_moment();
    c.add_diag(-1.0);
    Ok(c.frobenius_norm().powi(2))
}

/// Adds `weight · ∂penalty/∂F = weight·(4/B)·F(FᵀF/B − I)` into `grad`.
fn add_orthonormal_grad(feats: &DenseMatrix, weight: f64, grad: &mut DenseMatrix) -> Result<f64> {
    let b = feats.rows() as f64;
    let mut c = feats.second_moment();
    c.add_diag(-1.0);
    let pen = c.frobenius_norm().powi(2);
    let g = feats.matmul(&c)?;
    for (o, v) in grad.data_mut().iter_mut().zip(g.data()) {
        *o += weight * 4.0 / b * v;
    }
    Ok(pen)
}

/// Loss value together with its gradients with respect to the feature
/// matrices and every augmentation vector.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub value: f64,
    pub l0: f64,
    pub d_phi: DenseMatrix,
    pub d_psi: DenseMatrix,
    pub d_omegas: Vec<DenseVector>,
}

pub fn loss_and_grad(
    phi: &DenseMatrix,
    psi: &DenseMatrix,
    y: &[f64],
    omegas: &[DenseVector],
    deltas: &[f64],
    with_grad: bool,
) -> Result<LossGrad> {
    let bu = check_pair(phi, psi)?;
    let b = bu as f64;
    let d = phi.cols();
    check_len("y", y.len(), bu)?;
    check_len("omegas", omegas.len(), deltas.len())?;
    for w in omegas {
        check_len("omega", w.len(), d)?;
    }
    let s = paired_products(phi, psi);
    let a_phi = phi.t_matmul(phi)?;
    let a_psi = psi.t_matmul(psi)?;
    let c1 = 1.0 / (b * (b - 1.0));
    let diag: f64 = s.iter().map(|v| v * v).sum();
    let l0 = c1 * (frob_inner(&a_phi, &a_psi) - diag) - 2.0 * s.iter().sum::<f64>() / b;

    let mut value = l0;
    let mut y_pow: DenseVector = vec![1.0; bu];
    let mut psi_omegas = Vec::with_capacity(omegas.len());
    let mut e_moments = Vec::with_capacity(omegas.len());
    for (omega, &delta) in omegas.iter().zip(deltas) {
        y_pow.iter_mut().zip(y).for_each(|(p, v)| *p *= v);
        let po = psi.matvec(omega)?;
        let e = outcome_moment(psi, &y_pow)?;
        value += po.iter().map(|v| v * v).sum::<f64>() / b - 2.0 * delta * dot(&e, omega);
        psi_omegas.push((po, y_pow.clone()));
        e_moments.push(e);
    }

    if !with_grad {
        return Ok(LossGrad {
            value,
            l0,
            d_phi: DenseMatrix::zeros(0, 0),
            d_psi: DenseMatrix::zeros(0, 0),
            d_omegas: Vec::new(),
        });
    }

    let mut d_phi = phi.matmul(&a_psi)?;
    let mut d_psi = psi.matmul(&a_phi)?;
    for i in 0..bu {
        let (pr, qr) = (phi.row(i), psi.row(i));
        let dpr = d_phi.row_mut(i);
        for j in 0..d {
            dpr[j] = c1 * (2.0 * dpr[j] - 2.0 * s[i] * qr[j]) - 2.0 / b * qr[j];
        }
        let dqr = d_psi.row_mut(i);
        for j in 0..d {
            dqr[j] = c1 * (2.0 * dqr[j] - 2.0 * s[i] * pr[j]) - 2.0 / b * pr[j];
        }
    }
    let c_psi = psi.second_moment();
    let mut d_omegas = Vec::with_capacity(omegas.len());
    for (((omega, &delta), (po, yk)), e) in omegas.iter().zip(deltas).zip(&psi_omegas).zip(&e_moments) {
        for i in 0..bu {
            let coef = 2.0 / b * (po[i] - delta * yk[i]);
            for (g, w) in d_psi.row_mut(i).iter_mut().zip(omega) {
                *g += coef * w;
            }
        }
        let cw = c_psi.matvec(omega)?;
        d_omegas.push(cw.iter().zip(e).map(|(c, ev)| 2.0 * c - 2.0 * delta * ev).collect());
    }
    Ok(LossGrad {
        value,
        l0,
        d_phi,
        d_psi,
        d_omegas,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub d: usize,
    pub delta: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub adam: AdamConfig,
    pub cov_eps: f64,
    pub orthonormal_reg_weight: f64,
    /// `δ₁…δ_K` for the higher-rank loss; when set, `delta` is ignored.
    pub higher_rank_deltas: Option<Vec<f64>>,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d: 10,
            delta: 0.0,
            batch_size: 512,
            steps: 5000,
            adam: AdamConfig::default(),
            cov_eps: 1e-6,
            orthonormal_reg_weight: 0.0,
            higher_rank_deltas: None,
            seed: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn deltas(&self) -> Vec<f64> {
        self.higher_rank_deltas
            .clone()
            .unwrap_or_else(|| vec![self.delta])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LossError::Config(m.into()));
        if self.batch_size < 4 {
            return bad("batch_size must be at least 4");
        }
        if self.d == 0 {
            return bad("d must be positive");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        let deltas = self.deltas();
        if deltas.is_empty() || deltas.iter().any(|d| !(*d >= 0.0 && d.is_finite())) {
            return bad("deltas must be finite and non-negative");
        }
        if !(self.adam.lr > 0.0) || !(self.orthonormal_reg_weight >= 0.0) || !(self.cov_eps >= 0.0) {
            return bad("lr must be positive; reg weight and cov_eps non-negative");
        }
        Ok(())
    }
}

/// Learned representation of `Ψ_θ[Φ_θ* | ω]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnedOperator {
    pub phi: FeatureNet,
    pub psi: FeatureNet,
    pub omega: DenseVector,
    pub delta: f64,
    pub d: usize,
    /// Augmentation vectors for `k ≥ 2` of the higher-rank loss.
    #[serde(default)]
    pub extra_omegas: Vec<DenseVector>,
}

impl LearnedOperator {
    pub fn new(phi: FeatureNet, psi: FeatureNet, delta: f64) -> Result<Self> {
        let d = phi.d();
        if psi.d() != d {
            return Err(LossError::Shape(format!("phi has {d} outputs, psi {}", psi.d())));
        }
        Ok(Self {
            phi,
            psi,
            omega: vec![0.0; d],
            delta,
            d,
            extra_omegas: Vec::new(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub l0: f64,
    pub r_delta: f64,
    pub ortho_pen: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,l0,r_delta,ortho_pen")?;
        for r in &self.records {
            writeln!(w, "{},{:.12e},{:.12e},{:.12e}", r.step, r.l0, r.r_delta, r.ortho_pen)?;
        }
        Ok(())
    }
}

/// `L̂₀`, `R̂_δ` and the summed orthonormality penalties of the current
/// operator on a full split.
pub fn evaluate_on(op: &LearnedOperator, data: Samples<'_>, cov_eps: f64) -> Result<TraceRecord> {
    let phi = op.phi.features(data.x)?;
    let psi = op.psi.features(data.z)?;
    let (_, r_delta) = loss_ldelta_profile(&phi, &psi, data.y, op.delta, cov_eps)?;
    Ok(TraceRecord {
        step: 0,
        l0: loss_l0(&phi, &psi)?,
        r_delta,
        ortho_pen: orthonormal_penalty(&phi)? + orthonormal_penalty(&psi)?,
    })
}

/// Minibatch Adam on the extended (or higher-rank) loss, jointly over both
/// networks and the augmentation vectors.
pub fn train_features(
    data: Samples<'_>,
    phi_init: FeatureNet,
    psi_init: FeatureNet,
    config: &TrainConfig,
) -> Result<(LearnedOperator, TrainTrace)> {
    config.validate()?;
    let n = data.len();
    if n < 2 {
        return Err(LossError::BatchTooSmall(n));
    }
    if phi_init.d() != config.d || psi_init.d() != config.d {
        return Err(LossError::Shape(format!(
            "networks output {} / {} features, config d = {}",
            phi_init.d(),
            psi_init.d(),
            config.d
        )));
    }
    let deltas = config.deltas();
    let k = deltas.len();
    let mut op = LearnedOperator::new(phi_init, psi_init, deltas[0])?;
    op.extra_omegas = vec![vec![0.0; config.d]; k - 1];

    let enc_x = op.phi.encoding.encode(data.x)?;
    let enc_z = op.psi.encoding.encode(data.z)?;
    let n_phi = op.phi.params.num_params();
    let n_psi = op.psi.params.num_params();
    let mut flat = op.phi.params.flatten();
    flat.extend(op.psi.params.flatten());
    for _ in 0..k {
        flat.extend(std::iter::repeat_n(0.0, config.d));
    }
    let mut adam = AdamState::new(flat.len(), config.adam.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let batch = config.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;

    let mut trace = TrainTrace::default();
    let log = |op: &LearnedOperator, step: usize, trace: &mut TrainTrace| -> Result<bool> {
        let mut rec = evaluate_on(op, data, config.cov_eps)?;
        rec.step = step;
        let ok = rec.l0.is_finite() && rec.r_delta.is_finite();
        trace.records.push(rec);
        Ok(ok)
    };
    log(&op, 0, &mut trace)?;

    let mut grad = vec![0.0; flat.len()];
    for step in 1..=config.steps {
        if cursor + batch > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let xb = enc_x.select_rows(idx);
        let zb = enc_z.select_rows(idx);
        let yb: DenseVector = idx.iter().map(|&i| data.y[i]).collect();

        let cache_phi = forward_cached(&op.phi.params, &xb)?;
        let cache_psi = forward_cached(&op.psi.params, &zb)?;
        let mut omegas = vec![op.omega.clone()];
        omegas.extend(op.extra_omegas.iter().cloned());
        let mut lg = loss_and_grad(
            cache_phi.output(),
            cache_psi.output(),
            &yb,
            &omegas,
            &deltas,
            true,
        )?;
        if !lg.value.is_finite() {
            return Err(LossError::Diverged { step, trace });
        }
        if config.orthonormal_reg_weight > 0.0 {
            let w = config.orthonormal_reg_weight;
            add_orthonormal_grad(cache_phi.output(), w, &mut lg.d_phi)?;
            add_orthonormal_grad(cache_psi.output(), w, &mut lg.d_psi)?;
        }
        let gp = backward_cached(&op.phi.params, &xb, &cache_phi, &lg.d_phi)?.flatten();
        let gq = backward_cached(&op.psi.params, &zb, &cache_psi, &lg.d_psi)?.flatten();
        grad[..n_phi].copy_from_slice(&gp);
        grad[n_phi..n_phi + n_psi].copy_from_slice(&gq);
        for (j, dw) in lg.d_omegas.iter().enumerate() {
            let off = n_phi + n_psi + j * config.d;
            grad[off..off + config.d].copy_from_slice(dw);
        }
        adam.step(&mut flat, &grad)?;
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(LossError::Diverged { step, trace });
        }
        op.phi.params.unflatten(&flat[..n_phi])?;
        op.psi.params.unflatten(&flat[n_phi..n_phi + n_psi])?;
        let off = n_phi + n_psi;
        op.omega.copy_from_slice(&flat[off..off + config.d]);
        for (j, w) in op.extra_omegas.iter_mut().enumerate() {
            let o = off + (j + 1) * config.d;
            w.copy_from_slice(&flat[o..o + config.d]);
        }

        if (step % config.log_every == 0 || step == config.steps) && !log(&op, step, &mut trace)? {
            return Err(LossError::Diverged { step, trace });
        }
    }
    Ok((op, trace))
}
