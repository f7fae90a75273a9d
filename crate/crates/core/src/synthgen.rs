//! Fully controlled finite-rank conditional expectation operator on
//! `[−π, π]` with uniform marginals, and the confounded `(Z, X, Y)` datasets
//! it generates.
//!
//! The joint density with respect to the product of uniforms is
//! `p(z, x) = 1 + Σ σ_i u_i(z) v_i(x)` where `u_i`, `v_i` are random
//! orthonormal combinations of `√2·sin(ℓ·t)`, `ℓ = 1..d−1`. Its conditional
//! expectation operator is exactly `1⊗1 + Σ σ_i u_i⊗v_i`.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, dot, DenseMatrix, DenseVector, LinalgError};
use crate::spectral_loss::{loss_from_moments, LossMoments};

const GRID: usize = 400;
const MIN_DENSITY: f64 = 0.01;
const ENVELOPE_INFLATION: f64 = 1.05;
const MIN_ACCEPTANCE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid operator spec: {0}")]
    InvalidSpec(String),
    #[error(
        "joint density not positive: min over grid is {min_density:.4} (need > {MIN_DENSITY}); \
         reduce sigma1 (currently {sigma1})"
    )]
    NotPositive { min_density: f64, sigma1: f64 },
    #[error("rejection sampler acceptance rate {rate:.4} below {MIN_ACCEPTANCE}")]
    LowAcceptance { rate: f64 },
    #[error("density {density:.6} exceeded envelope {envelope:.6} at x = {x:.6}")]
    EnvelopeViolated { x: f64, density: f64, envelope: f64 },
    #[error("point {0} outside [-π, π]")]
    OutOfDomain(f64),
    #[error("invalid index set: {0}")]
    BadIndexSet(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticOperatorSpec {
    /// Operator rank including the constant component.
    pub d: usize,
    pub sigma1: f64,
    /// `σ_{d−1} / σ_1`.
    pub c_sigma: f64,
    /// `α_{d−1} / α_1`.
    pub c_alpha: f64,
    pub noise_std: f64,
    pub confound_strength: f64,
    pub seed: u64,
}

impl Default for SyntheticOperatorSpec {
    fn default() -> Self {
        Self {
            d: 11,
            sigma1: 0.1,
            c_sigma: 0.8,
            c_alpha: 5.0,
            noise_std: 0.1,
            confound_strength: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticOperatorSpec {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.d < 2 {
            return bad(format!("d = {} must be at least 2", self.d));
        }
        if !(self.sigma1 > 0.0 && self.sigma1 < 1.0) {
            return bad(format!("sigma1 = {} must lie in (0, 1)", self.sigma1));
        }
        if !(self.c_sigma > 0.0 && self.c_sigma <= 1.0) {
            return bad(format!(
                "c_sigma = {} must lie in (0, 1] so every singular value stays positive",
                self.c_sigma
            ));
        }
        if !(self.c_alpha > 0.0 && self.c_alpha.is_finite()) {
            return bad(format!("c_alpha = {} must be positive", self.c_alpha));
        }
        if !(self.noise_std >= 0.0 && self.confound_strength >= 0.0) {
            return bad("noise_std and confound_strength must be non-negative".into());
        }
        Ok(())
    }
}

/// `√2·sin(ℓ·t)` for `ℓ = 1..=k`: orthonormal under the uniform law on `[−π, π]`.
pub fn sine_basis(t: f64, k: usize) -> DenseVector {
    (1..=k)
        .map(|l| std::f64::consts::SQRT_2 * (l as f64 * t).sin())
        .collect()
}

fn linear_ramp(k: usize, ratio: f64) -> DenseVector {
    if k == 1 {
        return vec![1.0];
    }
    (0..k)
        .map(|i| 1.0 + (ratio - 1.0) * i as f64 / (k - 1) as f64)
        .collect()
}

fn grid() -> DenseVector {
    (0..GRID)
        .map(|i| -PI + 2.0 * PI * i as f64 / (GRID - 1) as f64)
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroundTruthOperator {
    pub spec: SyntheticOperatorSpec,
    /// `σ_1 … σ_{d−1}`, descending.
    pub sigmas: DenseVector,
    /// Column `i` holds the sine-basis coefficients of `u_i`.
    pub u_coeffs: DenseMatrix,
    /// Column `i` holds the sine-basis coefficients of `v_i`.
    pub v_coeffs: DenseMatrix,
    /// Coefficients of `h₀` in the `v` basis, unit norm.
    pub alpha: DenseVector,
    /// Unit vector mixing the confounder components.
    pub confound_dir: DenseVector,
    /// `max_x |v_i(x)|` over the check grid.
    pub sup_v: DenseVector,
    /// Minimum of the joint density over the check grid.
    pub min_density: f64,
}

pub fn build_operator(spec: &SyntheticOperatorSpec) -> Result<GroundTruthOperator> {
    spec.validate()?;
    let k = spec.d - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let random_orthogonal = |rng: &mut ChaCha8Rng| {
        let g = DenseMatrix::from_fn(k, k, |_, _| rng.sample(StandardNormal));
        linalg::qr_orthogonal(&g)
    };
    let u_coeffs = random_orthogonal(&mut rng)?;
    let v_coeffs = random_orthogonal(&mut rng)?;
    let mut confound_dir: DenseVector = (0..k).map(|_| rng.sample(StandardNormal)).collect();
    let cn = linalg::norm2(&confound_dir);
    confound_dir.iter_mut().for_each(|c| *c /= cn);

    let sigmas: DenseVector = linear_ramp(k, spec.c_sigma)
        .into_iter()
        .map(|r| r * spec.sigma1)
        .collect();
    let mut alpha = linear_ramp(k, spec.c_alpha);
    let an = linalg::norm2(&alpha);
    alpha.iter_mut().for_each(|a| *a /= an);

    let g = grid();
    let basis = DenseMatrix::from_rows(&g.iter().map(|&t| sine_basis(t, k)).collect::<Vec<_>>())?;
    let u_grid = basis.matmul(&u_coeffs)?;
    let v_grid = basis.matmul(&v_coeffs)?;
    let scaled_u = DenseMatrix::from_fn(GRID, k, |i, j| u_grid.get(i, j) * sigmas[j]);
    let kernel = scaled_u.matmul_t(&v_grid)?;
    let min_density = 1.0 + kernel.data().iter().copied().fold(f64::INFINITY, f64::min);
    if min_density <= MIN_DENSITY {
        return Err(SynthError::NotPositive {
            min_density,
            sigma1: spec.sigma1,
        });
    }
    let sup_v = (0..k)
        .map(|j| (0..GRID).map(|i| v_grid.get(i, j).abs()).fold(0.0, f64::max))
        .collect();

    Ok(GroundTruthOperator {
        spec: spec.clone(),
        sigmas,
        u_coeffs,
        v_coeffs,
        alpha,
        confound_dir,
        sup_v,
        min_density,
    })
}

fn check_domain(t: f64) -> Result<()> {
    if (-PI - 1e-12..=PI + 1e-12).contains(&t) {
        Ok(())
    } else {
        Err(SynthError::OutOfDomain(t))
    }
}

impl GroundTruthOperator {
    /// Number of non-constant singular components, `d − 1`.
    pub fn rank(&self) -> usize {
        self.sigmas.len()
    }

    /// `(v_1(x), …, v_{d−1}(x))`.
    pub fn eval_v(&self, x: f64) -> DenseVector {
        self.v_coeffs
            .t_matvec(&sine_basis(x, self.rank()))
            .expect("basis length matches")
    }

    /// `(u_1(z), …, u_{d−1}(z))`.
    pub fn eval_u(&self, z: f64) -> DenseVector {
        self.u_coeffs
            .t_matvec(&sine_basis(z, self.rank()))
            .expect("basis length matches")
    }

    /// Joint density of `(z, x)` relative to the product of uniforms.
    pub fn density(&self, z: f64, x: f64) -> f64 {
        let u = self.eval_u(z);
        let v = self.eval_v(x);
        1.0 + u
            .iter()
            .zip(&v)
            .zip(&self.sigmas)
            .map(|((a, b), s)| s * a * b)
            .sum::<f64>()
    }

    pub fn h0(&self, x: f64) -> f64 {
        dot(&self.alpha, &self.eval_v(x))
    }

    /// `r₀(z) = (T h₀)(z)`.
    pub fn r0(&self, z: f64) -> f64 {
        self.apply_t_at(&self.alpha, z)
    }

    fn apply_t_at(&self, beta: &[f64], z: f64) -> f64 {
        let u = self.eval_u(z);
        u.iter()
            .zip(beta)
            .zip(&self.sigmas)
            .map(|((ui, b), s)| s * b * ui)
            .sum()
    }

    /// Operator matrix in the orthonormal `(1, √2 sin ℓt)` bases:
    /// `blockdiag(1, U·diag(σ)·Vᵀ)`, rows indexing the Z side.
    pub fn operator_matrix(&self) -> DenseMatrix {
        let k = self.rank();
        let mut m = DenseMatrix::zeros(k + 1, k + 1);
        m.set(0, 0, 1.0);
        for l in 0..k {
            for q in 0..k {
                let v: f64 = (0..k)
                    .map(|i| self.u_coeffs.get(l, i) * self.sigmas[i] * self.v_coeffs.get(q, i))
                    .sum();
                m.set(l + 1, q + 1, v);
            }
        }
        m
    }

    /// Coefficients of `h₀` in the `(1, √2 sin ℓt)` basis.
    pub fn h0_coeffs(&self) -> DenseVector {
        let mut c = vec![0.0];
        c.extend(self.v_coeffs.matvec(&self.alpha).expect("alpha length"));
        c
    }

    /// Matrix of `T_δ = [T | δ·r₀]` acting on `L²(X) × ℝ`, in the same bases.
    pub fn augmented_matrix(&self, delta: f64) -> DenseMatrix {
        let m = self.operator_matrix();
        let r0 = m.matvec(&self.h0_coeffs()).expect("dims");
        let col: DenseVector = r0.iter().map(|v| delta * v).collect();
        m.hstack(&DenseMatrix::column(&col)).expect("rows match")
    }

    /// Population value of the augmented contrastive loss for features that
    /// are linear in the `(1, √2 sin ℓt)` basis: `φ(x) = W_φ·b(x)`,
    /// `ψ(z) = W_ψ·b(z)`.
    pub fn population_loss(
        &self,
        phi_w: &DenseMatrix,
        psi_w: &DenseMatrix,
        omega: &[f64],
        delta: f64,
    ) -> Result<f64> {
        let m = self.operator_matrix();
        let moments = LossMoments {
            c_phi: phi_w.matmul_t(phi_w)?,
            c_psi: psi_w.matmul_t(psi_w)?,
            joint: psi_w.matmul(&m)?.matmul_t(phi_w)?.diag().iter().sum(),
            e_y_psi: vec![psi_w.matvec(&m.matvec(&self.h0_coeffs())?)?],
        };
        loss_from_moments(&moments, &[omega.to_vec()], &[delta])
            .map_err(|e| SynthError::Dataset(e.to_string()))
    }

    /// `−Σ_{i≤d} σ_i(T_δ)²`: the smallest value the rank-`d` augmented loss can take.
    pub fn optimal_loss(&self, d: usize, delta: f64) -> Result<f64> {
        let s = linalg::singular_values(&self.augmented_matrix(delta))?;
        Ok(-s.iter().take(d).map(|v| v * v).sum::<f64>())
    }
}

/// `h₀(x) = Σ α_i v_i(x)` at every point of `xs`.
pub fn eval_h0(op: &GroundTruthOperator, xs: &[f64]) -> Result<DenseVector> {
    xs.iter()
        .map(|&x| {
            check_domain(x)?;
            Ok(op.h0(x))
        })
        .collect()
}

/// `(T h)(z) = Σ σ_i β_i u_i(z)` for `h = Σ β_i v_i`.
pub fn apply_t(op: &GroundTruthOperator, coeffs_in_v_basis: &[f64], zs: &[f64]) -> Result<DenseVector> {
    if coeffs_in_v_basis.len() != op.rank() {
        return Err(SynthError::Dataset(format!(
            "expected {} coefficients, got {}",
            op.rank(),
            coeffs_in_v_basis.len()
        )));
    }
    zs.iter()
        .map(|&z| {
            check_domain(z)?;
            Ok(op.apply_t_at(coeffs_in_v_basis, z))
        })
        .collect()
}

/// Spectral gap between the signal block `bar_n` (1-based indices into
/// `σ_1…σ_{d−1}`) after augmentation and the remaining singular values:
/// `σ_min(Λ̄ (I + δ² ᾱᾱᵀ)^{1/2}) − max_{i∉bar_n} σ_i`.
pub fn gap_gamma(op: &GroundTruthOperator, bar_n: &[usize], delta: f64) -> Result<f64> {
    let k = op.rank();
    if bar_n.is_empty() {
        return Err(SynthError::BadIndexSet("empty signal set".into()));
    }
    let mut seen = vec![false; k];
    for &i in bar_n {
        if i == 0 || i > k || seen[i - 1] {
            return Err(SynthError::BadIndexSet(format!(
                "index {i} invalid or repeated (valid 1..={k})"
            )));
        }
        seen[i - 1] = true;
    }
    let lam: DenseVector = bar_n.iter().map(|&i| op.sigmas[i - 1]).collect();
    let a: DenseVector = bar_n.iter().map(|&i| op.alpha[i - 1]).collect();
    let m = bar_n.len();
    let inner = DenseMatrix::from_fn(m, m, |i, j| {
        (if i == j { 1.0 } else { 0.0 }) + delta * delta * a[i] * a[j]
    });
    let root = linalg::sym_sqrt(&inner, 0.0)?;
    let block = DenseMatrix::from_fn(m, m, |i, j| lam[i] * root.get(i, j));
    let smin = linalg::singular_values(&block)?
        .last()
        .copied()
        .unwrap_or(0.0);
    let rest = (0..k)
        .filter(|&i| !seen[i])
        .map(|i| op.sigmas[i])
        .fold(0.0, f64::max);
    Ok(smin - rest)
}

/// Borrowed view of `(z, x, y)` columns.
#[derive(Clone, Copy, Debug)]
pub struct Samples<'a> {
    pub z: &'a [f64],
    pub x: &'a [f64],
    pub y: &'a [f64],
}

impl Samples<'_> {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// Splits into the first `at` rows and the rest.
    pub fn split_at(&self, at: usize) -> (Self, Self) {
        let (z1, z2) = self.z.split_at(at);
        let (x1, x2) = self.x.split_at(at);
        let (y1, y2) = self.y.split_at(at);
        (Samples { z: z1, x: x1, y: y1 }, Samples { z: z2, x: x2, y: y2 })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub z: DenseVector,
    pub x: DenseVector,
    pub y: DenseVector,
    pub seed: u64,
    /// Rows `0..split_m` are the feature-learning split, the rest the estimation split.
    pub split_m: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn all(&self) -> Samples<'_> {
        Samples {
            z: &self.z,
            x: &self.x,
            y: &self.y,
        }
    }

    pub fn feature_split(&self) -> Samples<'_> {
        self.all().split_at(self.split_m).0
    }

    pub fn estimation_split(&self) -> Samples<'_> {
        self.all().split_at(self.split_m).1
    }

    /// CSV with header `z,x,y`, 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "z,x,y")?;
        for i in 0..self.len() {
            writeln!(w, "{:.16e},{:.16e},{:.16e}", self.z[i], self.x[i], self.y[i])?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R, seed: u64, split_m: usize) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != "z,x,y" {
            return Err(SynthError::Dataset(format!("unexpected header {header:?}")));
        }
        let (mut z, mut x, mut y) = (Vec::new(), Vec::new(), Vec::new());
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| SynthError::Dataset(format!("line {}: {e}", i + 2)))?;
            let [a, b, c] = vals[..] else {
                return Err(SynthError::Dataset(format!("line {}: expected 3 fields", i + 2)));
            };
            z.push(a);
            x.push(b);
            y.push(c);
        }
        if split_m >= z.len() {
            return Err(SynthError::Dataset(format!(
                "split {split_m} not below row count {}",
                z.len()
            )));
        }
        Ok(Self { z, x, y, seed, split_m })
    }
}

/// Sidecar metadata written next to a dataset CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub spec: SyntheticOperatorSpec,
    pub dataset_seed: u64,
    pub n: usize,
    pub split_m: usize,
    pub min_density: f64,
}

/// Draws `n` confounded triples. `Z` is uniform, `X | Z` comes from rejection
/// sampling against the conditional density, and
/// `Y = h₀(X) + ρ_c·Σ c_i (v_i(X) − σ_i u_i(Z)) + ε`, so `E[U | Z] = 0`.
pub fn sample_dataset(
    op: &GroundTruthOperator,
    n: usize,
    split_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    if n < 10 {
        return Err(SynthError::Dataset(format!("n = {n} below minimum of 10")));
    }
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(SynthError::Dataset(format!(
            "split_fraction {split_fraction} must lie in (0, 1)"
        )));
    }
    let split_m = ((n as f64 * split_fraction).round() as usize).clamp(1, n - 1);
    let spec = &op.spec;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut zs, mut xs, mut ys) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    let max_attempts = (n as u64).saturating_mul(100);
    let mut attempts = 0u64;
    for _ in 0..n {
        let z = rng.random_range(-PI..PI);
        let u = op.eval_u(z);
        let envelope = ENVELOPE_INFLATION
            * (1.0
                + u.iter()
                    .zip(&op.sigmas)
                    .zip(&op.sup_v)
                    .map(|((ui, s), sv)| s * ui.abs() * sv)
                    .sum::<f64>());
        let (x, v) = loop {
            attempts += 1;
            if attempts > max_attempts {
                return Err(SynthError::LowAcceptance {
                    rate: xs.len() as f64 / attempts as f64,
                });
            }
            let x = rng.random_range(-PI..PI);
            let v = op.eval_v(x);
            let density = 1.0
                + u.iter()
                    .zip(&v)
                    .zip(&op.sigmas)
                    .map(|((a, b), s)| s * a * b)
                    .sum::<f64>();
            if density > envelope {
                return Err(SynthError::EnvelopeViolated { x, density, envelope });
            }
            if rng.random::<f64>() * envelope < density {
                break (x, v);
            }
        };
        let eps: f64 = rng.sample::<f64, _>(StandardNormal) * spec.noise_std;
        let confound: f64 = op
            .confound_dir
            .iter()
            .zip(&v)
            .zip(u.iter().zip(&op.sigmas))
            .map(|((c, vi), (ui, s))| c * (vi - s * ui))
            .sum();
        let y = dot(&op.alpha, &v) + spec.confound_strength * confound + eps;
        zs.push(z);
        xs.push(x);
        ys.push(y);
    }
    let rate = n as f64 / attempts as f64;
    if rate < MIN_ACCEPTANCE {
        return Err(SynthError::LowAcceptance { rate });
    }
    Ok(Dataset {
        z: zs,
        x: xs,
        y: ys,
        seed,
        split_m,
    })
}
