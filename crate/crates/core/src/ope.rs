//! Off-policy evaluation on tabular MDPs through an NPIV formulation with
//! instrument `Z = (s, a)` and treatment `X = (s', a')`, `a' ~ π(·|s')`.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{Activation, FeatureError, FeatureNet, InputEncoding};
use crate::linalg::{self, DenseMatrix, DenseVector, LinalgError};
use crate::spectral_loss::{self, LearnedOperator, LossError, TrainConfig};
use crate::synthgen::Samples;
use crate::twosls::{self, TwoSlsError};

#[derive(Debug, Error)]
pub enum OpeError {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("offline dataset is empty")]
    EmptyData,
    #[error("iteration diverged at k = {iter}")]
    Diverged { iter: usize, trace: Vec<OpeIterRecord> },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    TwoSls(#[from] TwoSlsError),
}

pub type Result<T> = std::result::Result<T, OpeError>;

const STOCHASTIC_TOL: f64 = 1e-12;
/// A growth streak counts as divergence only if the change also grew by this
/// factor over the streak; otherwise noise from re-trained features can
/// produce five increases in a row by chance.
const DIVERGENCE_GROWTH: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `P(s'|s,a)` at index `(s·A + a)·S + s'`.
    pub transition: DenseVector,
    /// `S × A` mean rewards.
    pub reward_mean: DenseMatrix,
    pub reward_std: f64,
    pub gamma: f64,
    pub mu0: DenseVector,
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&v| !(v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > STOCHASTIC_TOL {
        return Err(OpeError::InvalidMdp(format!("{what} is not a probability vector")));
    }
    Ok(())
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: DenseVector,
        reward_mean: DenseMatrix,
        reward_std: f64,
        gamma: f64,
        mu0: DenseVector,
    ) -> Result<Self> {
        let mdp = Self {
            n_states,
            n_actions,
            transition,
            reward_mean,
            reward_std,
            gamma,
            mu0,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        let (s, a) = (self.n_states, self.n_actions);
        if s == 0 || a == 0 {
            return Err(OpeError::InvalidMdp("empty state or action space".into()));
        }
        if self.transition.len() != s * a * s {
            return Err(OpeError::InvalidMdp("transition tensor size".into()));
        }
        for sa in 0..s * a {
            check_distribution(&self.transition[sa * s..(sa + 1) * s], "transition row")?;
        }
        if self.reward_mean.shape() != (s, a) {
            return Err(OpeError::InvalidMdp("reward matrix shape".into()));
        }
        if self.mu0.len() != s {
            return Err(OpeError::InvalidMdp("mu0 length".into()));
        }
        check_distribution(&self.mu0, "mu0")?;
        if !(self.gamma > 0.0 && self.gamma < 1.0) || !(self.reward_std >= 0.0) {
            return Err(OpeError::InvalidMdp("gamma must lie in (0,1), reward_std ≥ 0".into()));
        }
        Ok(())
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn pair(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    pub fn next_dist(&self, s: usize, a: usize) -> &[f64] {
        let off = self.pair(s, a) * self.n_states;
        &self.transition[off..off + self.n_states]
    }

    /// Chain of `n_states` cells: action 1 steps right, action 0 steps left,
    /// each staying put with probability `slip`; reward 1 in the last cell.
    pub fn chain(n_states: usize, gamma: f64, slip: f64, reward_std: f64) -> Result<Self> {
        if n_states < 2 || !(0.0..=1.0).contains(&slip) {
            return Err(OpeError::InvalidMdp("chain needs ≥ 2 states and slip in [0,1]".into()));
        }
        let (s, a) = (n_states, 2);
        let mut t = vec![0.0; s * a * s];
        for st in 0..s {
            for (act, target) in [(0, st.saturating_sub(1)), (1, (st + 1).min(s - 1))] {
                let row = &mut t[(st * a + act) * s..(st * a + act + 1) * s];
                row[st] += slip;
                row[target] += 1.0 - slip;
            }
        }
        let reward = DenseMatrix::from_fn(s, a, |st, _| if st == s - 1 { 1.0 } else { 0.0 });
        Self::new(s, a, t, reward, reward_std, gamma, vec![1.0 / s as f64; s])
    }

    /// Random transitions with normalized exponential weights and
    /// standard-normal mean rewards.
    pub fn random(n_states: usize, n_actions: usize, gamma: f64, reward_std: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            let w: Vec<f64> = (0..n_states).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
            let tot: f64 = w.iter().sum();
            t.extend(w.into_iter().map(|v| v / tot));
        }
        let reward = DenseMatrix::from_fn(n_states, n_actions, |_, _| rng.sample(StandardNormal));
        let mu0 = vec![1.0 / n_states as f64; n_states];
        let mut mdp = Self {
            n_states,
            n_actions,
            transition: t,
            reward_mean: reward,
            reward_std,
            gamma,
            mu0,
        };
        renormalize(&mut mdp);
        mdp.validate()?;
        Ok(mdp)
    }
}

impl TabularMdp {
    /// States grouped into `n_clusters` blocks of `per_cluster`. A step leaves
    /// the current block with probability `switch`; inside the target block
    /// the next state is uniform up to an action-dependent perturbation of
    /// relative size `eta`. Rewards are zero and `μ₀` is a point mass on state
    /// 0; combine with [`TabularMdp::misalign_reward`].
    pub fn clustered(
        n_clusters: usize,
        per_cluster: usize,
        n_actions: usize,
        switch: f64,
        eta: f64,
        gamma: f64,
        reward_std: f64,
        seed: u64,
    ) -> Result<Self> {
        if n_clusters < 2 || per_cluster < 2 || !(0.0..=1.0).contains(&switch) || !(0.0..1.0).contains(&eta) {
            return Err(OpeError::InvalidMdp("clustered MDP parameters out of range".into()));
        }
        let s = n_clusters * per_cluster;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Vec::with_capacity(s * n_actions * s);
        for st in 0..s {
            let home = st / per_cluster;
            for _ in 0..n_actions {
                let bump: Vec<f64> = (0..per_cluster).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
                let mean = bump.iter().sum::<f64>() / per_cluster as f64;
                for sn in 0..s {
                    let c = sn / per_cluster;
                    let block = if c == home { 1.0 - switch } else { switch / (n_clusters - 1) as f64 };
                    let within = (1.0 + eta * (bump[sn % per_cluster] - mean)) / per_cluster as f64;
                    t.push(block * within);
                }
            }
        }
        let mut mu0 = vec![0.0; s];
        mu0[0] = 1.0;
        let mut mdp = Self {
            n_states: s,
            n_actions,
            transition: t,
            reward_mean: DenseMatrix::zeros(s, n_actions),
            reward_std,
            gamma,
            mu0,
        };
        renormalize(&mut mdp);
        mdp.validate()?;
        Ok(mdp)
    }
}

/// Removes floating-point drift so rows sum to one within tolerance.
fn renormalize(mdp: &mut TabularMdp) {
    let s = mdp.n_states;
    for row in mdp.transition.chunks_mut(s) {
        let tot: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= tot);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    /// `S × A`, rows sum to one.
    pub probs: DenseMatrix,
}

impl Policy {
    pub fn new(probs: DenseMatrix) -> Result<Self> {
        for s in 0..probs.rows() {
            let row = probs.row(s);
            if row.iter().any(|&v| !(v >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > STOCHASTIC_TOL {
                return Err(OpeError::InvalidPolicy(format!("row {s} is not a distribution")));
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: DenseMatrix::from_fn(n_states, n_actions, |_, _| 1.0 / n_actions as f64),
        }
    }

    /// `p` on `action`, the rest spread evenly.
    pub fn biased(n_states: usize, n_actions: usize, action: usize, p: f64) -> Result<Self> {
        let rest = if n_actions > 1 { (1.0 - p) / (n_actions - 1) as f64 } else { 0.0 };
        Self::new(DenseMatrix::from_fn(n_states, n_actions, |_, a| if a == action { p } else { rest }))
    }

    fn check_against(&self, mdp: &TabularMdp) -> Result<()> {
        if self.probs.shape() != (mdp.n_states, mdp.n_actions) {
            return Err(OpeError::InvalidPolicy("shape does not match the MDP".into()));
        }
        Ok(())
    }
}

/// `P_π[(s,a),(s',a')] = P(s'|s,a)·π(a'|s')`.
pub fn policy_transition(mdp: &TabularMdp, pi: &Policy) -> DenseMatrix {
    let (s, a) = (mdp.n_states, mdp.n_actions);
    DenseMatrix::from_fn(s * a, s * a, |i, j| {
        let (sn, an) = (j / a, j % a);
        mdp.transition[i * s + sn] * pi.probs.get(sn, an)
    })
}

/// Solves `(I − γP_π) q = r̄`; rows index states, columns actions.
pub fn exact_q(mdp: &TabularMdp, pi: &Policy) -> Result<DenseMatrix> {
    pi.check_against(mdp)?;
    let n = mdp.n_pairs();
    let p = policy_transition(mdp, pi);
    let m = DenseMatrix::identity(n).sub(&p.scale(mdp.gamma))?;
    let q = linalg::ridge_solve_vec(&m, mdp.reward_mean.data(), 0.0)?;
    Ok(DenseMatrix::new(mdp.n_states, mdp.n_actions, q)?)
}

/// `Σ_s μ₀(s) Σ_a π(a|s) q(s,a)`.
pub fn policy_value(mdp: &TabularMdp, q: &DenseMatrix, pi: &Policy) -> f64 {
    (0..mdp.n_states)
        .map(|s| {
            mdp.mu0[s]
                * (0..mdp.n_actions)
                    .map(|a| pi.probs.get(s, a) * q.get(s, a))
                    .sum::<f64>()
        })
        .sum()
}

/// Normalized discounted occupancy of `π` over `(s, a)` pairs started from `μ₀`.
pub fn occupancy(mdp: &TabularMdp, pi: &Policy) -> Result<DenseVector> {
    pi.check_against(mdp)?;
    let n = mdp.n_pairs();
    let start: DenseVector = (0..n)
        .map(|i| mdp.mu0[i / mdp.n_actions] * pi.probs.get(i / mdp.n_actions, i % mdp.n_actions))
        .collect();
    let p = policy_transition(mdp, pi);
    // d = (1−γ) start (I − γP)⁻¹, solved as a transposed system
    let m = DenseMatrix::identity(n).sub(&p.scale(mdp.gamma))?.transpose();
    let d = linalg::ridge_solve_vec(&m, &start, 0.0)?;
    Ok(d.into_iter().map(|v| (1.0 - mdp.gamma) * v).collect())
}

/// The conditional expectation operator `h(s',a') ↦ E[h(S',A') | S=s, A=a]`
/// for `(s,a)` drawn from the occupancy of `π_b` and `a' ~ π(·|s')`,
/// written in orthonormal coordinates of the two weighted `L²` spaces.
#[derive(Clone, Debug)]
pub struct InducedOperator {
    pub p_z: DenseVector,
    pub p_x: DenseVector,
    /// `√p_z · P_π[z,x] / √p_x`.
    pub matrix: DenseMatrix,
    pub svd: linalg::SvdResult,
}

impl InducedOperator {
    pub fn new(mdp: &TabularMdp, pi_b: &Policy, pi: &Policy) -> Result<Self> {
        pi.check_against(mdp)?;
        let p_z = occupancy(mdp, pi_b)?;
        let k = policy_transition(mdp, pi);
        let p_x = k.t_matvec(&p_z)?;
        if p_x.iter().chain(&p_z).any(|&v| v <= 0.0) {
            return Err(OpeError::InvalidMdp("occupancy or next-pair marginal has empty cells".into()));
        }
        let matrix = DenseMatrix::from_fn(k.rows(), k.cols(), |z, x| p_z[z].sqrt() * k.get(z, x) / p_x[x].sqrt());
        let svd = linalg::svd(&matrix)?;
        Ok(Self { p_z, p_x, matrix, svd })
    }

    /// `i`-th right singular function as values on `(s', a')` pairs.
    pub fn right_function(&self, i: usize) -> DenseVector {
        self.svd.vt.row(i).iter().zip(&self.p_x).map(|(v, p)| v / p.sqrt()).collect()
    }
}

impl TabularMdp {
    /// Replaces the mean rewards so that `Q_π = 1 + scale · h`, where `h` is
    /// the right singular function among indices `≥ from_index` of the
    /// induced operator whose `μ₀π`-weighted mean is largest in magnitude.
    /// Returns the chosen index.
    pub fn misalign_reward(&mut self, pi_b: &Policy, pi: &Policy, from_index: usize, scale: f64) -> Result<usize> {
        let op = InducedOperator::new(self, pi_b, pi)?;
        let n = self.n_pairs();
        if from_index >= n {
            return Err(OpeError::Config(format!("from_index {from_index} ≥ {n} pairs")));
        }
        let start: DenseVector = (0..n)
            .map(|i| self.mu0[i / self.n_actions] * pi.probs.get(i / self.n_actions, i % self.n_actions))
            .collect();
        let (idx, h) = (from_index..n)
            .map(|i| (i, op.right_function(i)))
            .max_by(|a, b| linalg::dot(&a.1, &start).abs().total_cmp(&linalg::dot(&b.1, &start).abs()))
            .expect("nonempty range");
        let q: DenseVector = h.iter().map(|v| 1.0 + scale * v).collect();
        let pq = policy_transition(self, pi).matvec(&q)?;
        let r: DenseVector = q.iter().zip(&pq).map(|(q, p)| q - self.gamma * p).collect();
        self.reward_mean = DenseMatrix::new(self.n_states, self.n_actions, r)?;
        Ok(idx)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OfflineData {
    pub n_states: usize,
    pub n_actions: usize,
    pub tuples: Vec<Transition>,
    pub behavior: Policy,
}

impl OfflineData {
    /// Visit counts per `(s, a)` pair index.
    pub fn pair_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_states * self.n_actions];
        for t in &self.tuples {
            c[t.s * self.n_actions + t.a] += 1;
        }
        c
    }
}

/// Samples tuples along a trajectory of `π_b` that restarts from `μ₀` with
/// probability `1 − γ` after every step, so pairs follow the discounted
/// occupancy of `π_b`.
pub fn collect_offline(mdp: &TabularMdp, pi_b: &Policy, n: usize, seed: u64) -> Result<OfflineData> {
    if n == 0 {
        return Err(OpeError::EmptyData);
    }
    pi_b.check_against(mdp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |w: &[f64], rng: &mut ChaCha8Rng| -> Result<usize> {
        WeightedIndex::new(w)
            .map(|d| d.sample(rng))
            .map_err(|e| OpeError::InvalidMdp(e.to_string()))
    };
    let mut tuples = Vec::with_capacity(n);
    let mut s = draw(&mdp.mu0, &mut rng)?;
    for _ in 0..n {
        let a = draw(pi_b.probs.row(s), &mut rng)?;
        let r = mdp.reward_mean.get(s, a) + mdp.reward_std * rng.sample::<f64, _>(StandardNormal);
        let s_next = draw(mdp.next_dist(s, a), &mut rng)?;
        tuples.push(Transition { s, a, r, s_next });
        s = if rng.random::<f64>() < 1.0 - mdp.gamma {
            draw(&mdp.mu0, &mut rng)?
        } else {
            s_next
        };
    }
    Ok(OfflineData {
        n_states: mdp.n_states,
        n_actions: mdp.n_actions,
        tuples,
        behavior: pi_b.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    /// Outcome-agnostic features, `δ = 0`.
    Speciv,
    /// Augmented features with the configured `δ`.
    Augspeciv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMode {
    /// One-hot `(s, a)` features of full dimension `S·A`.
    Tabular,
    /// Trainable embeddings of dimension `d` on top of one-hot `(s, a)`.
    Learned {
        d: usize,
        #[serde(default)]
        hidden: Vec<(usize, Activation)>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpeUpdate {
    /// `Q_{k+1}` solves `E[Y(Q_{k+1}) | Z] = T̃Q_{k+1}` in the span of the
    /// features learned for `Y_k`.
    Implicit,
    /// `Q_{k+1}` is the 2SLS solution for the fixed outcome `Y_k`.
    Explicit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpeConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub estimator: EstimatorKind,
    pub delta: f64,
    pub feature_mode: FeatureMode,
    pub train: TrainConfig,
    pub ridge: f64,
    pub update: OpeUpdate,
    pub seed: u64,
}

impl Default for OpeConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-4,
            estimator: EstimatorKind::Speciv,
            delta: 0.0,
            feature_mode: FeatureMode::Tabular,
            train: TrainConfig {
                batch_size: 256,
                steps: 300,
                ..Default::default()
            },
            ridge: 1e-8,
            update: OpeUpdate::Implicit,
            seed: 0,
        }
    }
}

impl OpeConfig {
    pub fn effective_delta(&self) -> f64 {
        match self.estimator {
            EstimatorKind::Speciv => 0.0,
            EstimatorKind::Augspeciv => self.delta,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpeIterRecord {
    pub iter: usize,
    pub supnorm_change: f64,
    pub bellman_residual: f64,
    pub rho_hat: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpeResult {
    pub q_hat: DenseMatrix,
    pub rho_hat: f64,
    pub trace: Vec<OpeIterRecord>,
    pub converged: bool,
    /// `(s, a)` pairs the target policy can reach from observed next states
    /// that never appear as instruments.
    pub uncovered: Vec<(usize, usize)>,
}

fn coverage_gaps(data: &OfflineData, pi: &Policy) -> Vec<(usize, usize)> {
    let counts = data.pair_counts();
    let mut seen_next = vec![false; data.n_states];
    for t in &data.tuples {
        seen_next[t.s_next] = true;
    }
    let mut gaps = Vec::new();
    for s in 0..data.n_states {
        for a in 0..data.n_actions {
            if seen_next[s] && pi.probs.get(s, a) > 0.0 && counts[s * data.n_actions + a] == 0 {
                gaps.push((s, a));
            }
        }
    }
    gaps
}

/// Max over observed pairs of `|mean(r + γ Σ_a' π(a'|s') q(s',a')) − q(s,a)|`.
fn empirical_bellman_residual(data: &OfflineData, pi: &Policy, q: &[f64], gamma: f64) -> f64 {
    let na = data.n_actions;
    let mut sum = vec![0.0; data.n_states * na];
    let counts = data.pair_counts();
    for t in &data.tuples {
        let v_next: f64 = (0..na).map(|a| pi.probs.get(t.s_next, a) * q[t.s_next * na + a]).sum();
        sum[t.s * na + t.a] += t.r + gamma * v_next;
    }
    (0..sum.len())
        .filter(|&i| counts[i] > 0)
        .map(|i| (sum[i] / counts[i] as f64 - q[i]).abs())
        .fold(0.0, f64::max)
}

fn rho_from_flat(mu0: Option<&[f64]>, q: &[f64], pi: &Policy) -> f64 {
    let (s, a) = pi.probs.shape();
    (0..s)
        .map(|st| {
            let w = mu0.map(|m| m[st]).unwrap_or(1.0 / s as f64);
            w * (0..a).map(|ac| pi.probs.get(st, ac) * q[st * a + ac]).sum::<f64>()
        })
        .sum()
}

/// Feature networks over one-hot `(s, a)` for the configured mode.
fn initial_nets(mode: &FeatureMode, n_pairs: usize, seed: u64) -> Result<(FeatureNet, FeatureNet)> {
    let enc = InputEncoding::OneHot { k: n_pairs };
    Ok(match mode {
        FeatureMode::Tabular => {
            let net = FeatureNet::from_linear_weights(enc, DenseMatrix::identity(n_pairs))?;
            (net.clone(), net)
        }
        FeatureMode::Learned { d, hidden } => (
            FeatureNet::new(enc.clone(), hidden, *d, seed)?,
            FeatureNet::new(enc, hidden, *d, seed.wrapping_add(1))?,
        ),
    })
}

/// Iterative NPIV policy evaluation. `mu0` weights the final value; when
/// absent a uniform initial distribution is assumed.
pub fn iterative_npiv_ope(
    data: &OfflineData,
    pi: &Policy,
    gamma: f64,
    mu0: Option<&[f64]>,
    cfg: &OpeConfig,
) -> Result<OpeResult> {
    if data.tuples.is_empty() {
        return Err(OpeError::EmptyData);
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(OpeError::Config(format!("gamma = {gamma} outside (0,1)")));
    }
    if cfg.max_iter == 0 {
        return Err(OpeError::Config("max_iter must be positive".into()));
    }
    if pi.probs.shape() != (data.n_states, data.n_actions) {
        return Err(OpeError::InvalidPolicy("shape does not match the data".into()));
    }
    let na = data.n_actions;
    let n_pairs = data.n_states * na;
    let n = data.tuples.len();
    let delta = cfg.effective_delta();
    let uncovered = coverage_gaps(data, pi);

    let (mut phi_net, mut psi_net) = initial_nets(&cfg.feature_mode, n_pairs, cfg.seed)?;
    let learn = matches!(cfg.feature_mode, FeatureMode::Learned { .. });
    let z_idx: Vec<f64> = data.tuples.iter().map(|t| (t.s * na + t.a) as f64).collect();
    let rewards: Vec<f64> = data.tuples.iter().map(|t| t.r).collect();
    let all_pairs: Vec<f64> = (0..n_pairs).map(|i| i as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);

    let mut q = vec![0.0; n_pairs];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut growth_streak = 0;
    let mut last_change = f64::INFINITY;
    let mut streak_base = f64::INFINITY;
    for k in 0..cfg.max_iter {
        let y: Vec<f64> = data
            .tuples
            .iter()
            .zip(&rewards)
            .map(|(t, r)| (q[t.s * na + t.a] - r) / gamma)
            .collect();
        let mut x_idx = Vec::with_capacity(n);
        for t in &data.tuples {
            let w = pi.probs.row(t.s_next);
            let a = WeightedIndex::new(w)
                .map_err(|e| OpeError::InvalidPolicy(e.to_string()))?
                .sample(&mut rng);
            x_idx.push((t.s_next * na + a) as f64);
        }

        if learn {
            let train = TrainConfig {
                delta,
                higher_rank_deltas: None,
                seed: cfg.train.seed.wrapping_add(k as u64),
                d: phi_net.d(),
                ..cfg.train.clone()
            };
            let samples = Samples { z: &z_idx, x: &x_idx, y: &y };
            let (learned, _) = spectral_loss::train_features(samples, phi_net, psi_net, &train)?;
            phi_net = learned.phi;
            psi_net = learned.psi;
        }

        let phi_all = phi_net.features(&all_pairs)?;
        let psi_z = psi_net.features(&z_idx)?;
        let beta = match cfg.update {
            OpeUpdate::Explicit => {
                let phi_x = phi_net.features(&x_idx)?;
                twosls::fit_2sls(&phi_x, &psi_z, &y, cfg.ridge)?
            }
            OpeUpdate::Implicit => {
                implicit_solve(data, pi, &phi_all, &psi_z, &rewards, gamma, cfg.ridge)?
            }
        };
        let q_next = phi_all.matvec(&beta)?;
        let change = q_next
            .iter()
            .zip(&q)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        q = q_next;
        let rec = OpeIterRecord {
            iter: k + 1,
            supnorm_change: change,
            bellman_residual: empirical_bellman_residual(data, pi, &q, gamma),
            rho_hat: rho_from_flat(mu0, &q, pi),
        };
        trace.push(rec);
        if !change.is_finite() {
            return Err(OpeError::Diverged { iter: k + 1, trace });
        }
        if change > last_change {
            if growth_streak == 0 {
                streak_base = last_change;
            }
            growth_streak += 1;
        } else {
            growth_streak = 0;
        }
        last_change = change;
        if growth_streak >= 5 && change > DIVERGENCE_GROWTH * streak_base {
            return Err(OpeError::Diverged { iter: k + 1, trace });
        }
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    let q_hat = DenseMatrix::new(data.n_states, na, q.clone())?;
    Ok(OpeResult {
        rho_hat: rho_from_flat(mu0, &q, pi),
        q_hat,
        trace,
        converged,
        uncovered,
    })
}

/// Solves `(Ê[ψφ(Z)ᵀ]/γ − Ê[ψφ̄(S')ᵀ]) β = Ê[ψ r]/γ` by weighted least squares
/// with weight `(Ĉ_ψ + εI)⁻¹`, where `φ̄(s') = Σ_a' π(a'|s') φ(s', a')`.
fn implicit_solve(
    data: &OfflineData,
    pi: &Policy,
    phi_all: &DenseMatrix,
    psi_z: &DenseMatrix,
    rewards: &[f64],
    gamma: f64,
    ridge: f64,
) -> Result<DenseVector> {
    let na = data.n_actions;
    let d = phi_all.cols();
    let n = data.tuples.len();
    let mut phi_bar = DenseMatrix::zeros(data.n_states, d);
    for s in 0..data.n_states {
        for a in 0..na {
            let w = pi.probs.get(s, a);
            let src = phi_all.row(s * na + a).to_vec();
            for (o, v) in phi_bar.row_mut(s).iter_mut().zip(src) {
                *o += w * v;
            }
        }
    }
    let mut diff = DenseMatrix::zeros(n, d);
    for (i, t) in data.tuples.iter().enumerate() {
        let cur = phi_all.row(t.s * na + t.a);
        let nxt = phi_bar.row(t.s_next);
        for ((o, c), x) in diff.row_mut(i).iter_mut().zip(cur).zip(nxt) {
            *o = c / gamma - x;
        }
    }
    let nf = n as f64;
    let m = psi_z.cross_moment(&diff)?;
    let b: DenseVector = psi_z
        .t_matvec(rewards)?
        .into_iter()
        .map(|v| v / (nf * gamma))
        .collect();
    let wm = linalg::ridge_solve(&psi_z.second_moment(), &m, ridge)?;
    let normal = wm.t_matmul(&m)?;
    let rhs = wm.t_matvec(&b)?;
    Ok(linalg::ridge_solve_vec(&normal, &rhs, ridge)?)
}

/// Learned operator built from the networks an OPE run would start from;
/// exposed for diagnostics.
pub fn initial_operator(mode: &FeatureMode, n_pairs: usize, seed: u64) -> Result<LearnedOperator> {
    let (phi, psi) = initial_nets(mode, n_pairs, seed)?;
    Ok(LearnedOperator::new(phi, psi, 0.0)?)
}
