//! Discrete toy probability spaces where every operator is an explicit matrix.
#![allow(dead_code)]

use augspec::features::{FeatureNet, InputEncoding};
use augspec::linalg::DenseMatrix;
use augspec::spectral_loss::LossMoments;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Toy {
    pub nz: usize,
    pub nx: usize,
    /// Integer pair counts; `p(z, x) = counts / total`.
    pub counts: Vec<Vec<usize>>,
    pub total: usize,
    /// Outcome attached to each `(z, x)` pair.
    pub y: Vec<Vec<f64>>,
}

impl Toy {
    /// Random joint law with positive counts and outcome `y = h0(x) + u(z, x)`
    /// where `u` is centered under `p(x|z)`, so `E[Y|Z] = (T h0)(Z)`.
    pub fn random(nz: usize, nx: usize, h0: &[f64], rng: &mut ChaCha8Rng) -> Self {
        let counts: Vec<Vec<usize>> = (0..nz)
            .map(|_| (0..nx).map(|_| rng.random_range(1..6)).collect())
            .collect();
        let total = counts.iter().flatten().sum();
        let mut y = vec![vec![0.0; nx]; nz];
        for z in 0..nz {
            let row: f64 = counts[z].iter().sum::<usize>() as f64;
            let raw: Vec<f64> = (0..nx).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mean: f64 = (0..nx).map(|x| counts[z][x] as f64 * raw[x]).sum::<f64>() / row;
            for x in 0..nx {
                y[z][x] = h0[x] + raw[x] - mean;
            }
        }
        Self { nz, nx, counts, total, y }
    }

    pub fn p(&self, z: usize, x: usize) -> f64 {
        self.counts[z][x] as f64 / self.total as f64
    }

    pub fn pz(&self, z: usize) -> f64 {
        (0..self.nx).map(|x| self.p(z, x)).sum()
    }

    pub fn px(&self, x: usize) -> f64 {
        (0..self.nz).map(|z| self.p(z, x)).sum()
    }

    /// `E[Y^k | Z = z]`.
    pub fn cond_moment(&self, z: usize, k: i32) -> f64 {
        (0..self.nx).map(|x| self.p(z, x) * self.y[z][x].powi(k)).sum::<f64>() / self.pz(z)
    }

    /// `T_δ = [A | δ₁ r̃₁ | … ]` in orthonormal coordinates of the two
    /// weighted spaces, with `r̃_k(z) = √p(z)·E[Y^k|Z=z]`.
    pub fn augmented(&self, deltas: &[f64]) -> DMatrix<f64> {
        let k = deltas.len();
        DMatrix::from_fn(self.nz, self.nx + k, |z, c| {
            if c < self.nx {
                self.p(z, c) / (self.pz(z) * self.px(c)).sqrt()
            } else {
                let j = c - self.nx;
                deltas[j] * self.pz(z).sqrt() * self.cond_moment(z, j as i32 + 1)
            }
        })
    }

    /// Matrix of the learned operator `Ψ[Φ* | ω₁ … ω_K]` in the same coordinates.
    pub fn learned(&self, phi: &DMatrix<f64>, psi: &DMatrix<f64>, omegas: &[Vec<f64>]) -> DMatrix<f64> {
        let d = phi.ncols();
        let mut right = DMatrix::zeros(d, self.nx + omegas.len());
        for i in 0..d {
            for x in 0..self.nx {
                right[(i, x)] = self.px(x).sqrt() * phi[(x, i)];
            }
            for (j, w) in omegas.iter().enumerate() {
                right[(i, self.nx + j)] = w[i];
            }
        }
        let left = DMatrix::from_fn(self.nz, d, |z, i| self.pz(z).sqrt() * psi[(z, i)]);
        left * right
    }

    /// Population moments of feature tables `phi[x, i]`, `psi[z, i]`.
    pub fn moments(&self, phi: &DMatrix<f64>, psi: &DMatrix<f64>, k_max: usize) -> LossMoments {
        let d = phi.ncols();
        let c_phi = DenseMatrix::from_fn(d, d, |i, j| (0..self.nx).map(|x| self.px(x) * phi[(x, i)] * phi[(x, j)]).sum());
        let c_psi = DenseMatrix::from_fn(d, d, |i, j| (0..self.nz).map(|z| self.pz(z) * psi[(z, i)] * psi[(z, j)]).sum());
        let mut joint = 0.0;
        let mut e_y_psi = vec![vec![0.0; d]; k_max];
        for z in 0..self.nz {
            for x in 0..self.nx {
                let p = self.p(z, x);
                for i in 0..d {
                    joint += p * phi[(x, i)] * psi[(z, i)];
                    for (k, e) in e_y_psi.iter_mut().enumerate() {
                        e[i] += p * self.y[z][x].powi(k as i32 + 1) * psi[(z, i)];
                    }
                }
            }
        }
        LossMoments { c_phi, c_psi, joint, e_y_psi }
    }

    /// Each pair repeated by its count, so sample averages are exact expectations.
    pub fn enumerate(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (mut zs, mut xs, mut ys) = (Vec::new(), Vec::new(), Vec::new());
        for z in 0..self.nz {
            for x in 0..self.nx {
                for _ in 0..self.counts[z][x] {
                    zs.push(z as f64);
                    xs.push(x as f64);
                    ys.push(self.y[z][x]);
                }
            }
        }
        (zs, xs, ys)
    }

    /// Features realizing the top-`d` truncated SVD of `T_δ` (rank-one
    /// augmentation): `φ = diag(p_x)^{-1/2}·(right part)`, `ψ = diag(p_z)^{-1/2}·σU`.
    pub fn optimal_features(&self, delta: f64, d: usize) -> (DMatrix<f64>, DMatrix<f64>, Vec<f64>) {
        let t = self.augmented(&[delta]);
        let svd = t.clone().svd(true, true);
        let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
        idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let u = svd.u.unwrap();
        let vt = svd.v_t.unwrap();
        let phi = DMatrix::from_fn(self.nx, d, |x, i| vt[(idx[i], x)] / self.px(x).sqrt());
        let psi = DMatrix::from_fn(self.nz, d, |z, i| svd.singular_values[idx[i]] * u[(z, idx[i])] / self.pz(z).sqrt());
        let omega = (0..d).map(|i| vt[(idx[i], self.nx)]).collect();
        (phi, psi, omega)
    }
}

pub fn hs_sq(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

pub fn random_table(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Linear features over one-hot indices: `net(i) = table[i, ·]`.
pub fn one_hot_net(table: &DMatrix<f64>) -> FeatureNet {
    let w = DenseMatrix::from_fn(table.ncols(), table.nrows(), |i, j| table[(j, i)]);
    FeatureNet::from_linear_weights(InputEncoding::OneHot { k: table.nrows() }, w).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn to_dense(m: &DMatrix<f64>) -> DenseMatrix {
    DenseMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}
