//! Statistical and structural invariants that need a full pipeline rather
//! than a single function.

use augspec::alignment::{alignment_plugin, empirical_svd};
use augspec::experiment::{self, SweepConfig};
use augspec::features::{FeatureNet, InputEncoding};
use augspec::linalg::{self, DenseMatrix};
use augspec::ope::{
    collect_offline, exact_q, iterative_npiv_ope, EstimatorKind, OpeConfig, Policy, TabularMdp,
};
use augspec::spectral_loss::LearnedOperator;
use augspec::synthgen::{build_operator, sample_dataset, GroundTruthOperator, Samples, SyntheticOperatorSpec};
use augspec::twosls::{mse_l2, StructuralEstimate};

/// Linear features realizing the top-`d` truncated SVD of `T_δ`.
fn truncated_features(op: &GroundTruthOperator, d: usize, delta: f64) -> LearnedOperator {
    let svd = linalg::svd(&op.augmented_matrix(delta)).unwrap();
    let w = op.operator_matrix().rows();
    let enc = InputEncoding::SineBasis { n_freq: w - 1 };
    let phi_w = DenseMatrix::from_fn(d, w, |i, q| svd.vt.get(i, q));
    let psi_w = DenseMatrix::from_fn(d, w, |i, l| svd.s[i] * svd.u.get(l, i));
    let mut learned = LearnedOperator::new(
        FeatureNet::from_linear_weights(enc.clone(), phi_w).unwrap(),
        FeatureNet::from_linear_weights(enc, psi_w).unwrap(),
        delta,
    )
    .unwrap();
    learned.omega = (0..d).map(|i| svd.vt.get(i, w)).collect();
    learned
}

#[test]
fn empirical_singular_values_of_oracle_features() {
    let op = build_operator(&SyntheticOperatorSpec::default()).unwrap();
    let d = op.rank() + 1;
    let learned = truncated_features(&op, d, 0.0);
    let data = sample_dataset(&op, 50_000, 0.5, 21).unwrap();
    let emp = empirical_svd(&learned, data.all(), 1e-10).unwrap();
    let mut want = vec![1.0];
    want.extend(&op.sigmas);
    for (got, want) in emp.sigma_hat.iter().zip(&want) {
        assert!((got - want).abs() <= 0.03 * want, "{got} vs {want}");
    }
}

fn plugin_on(learned: &LearnedOperator, s: Samples<'_>) -> f64 {
    let emp = empirical_svd(learned, s, 1e-10).unwrap();
    alignment_plugin(&emp, learned, s).unwrap().value
}

/// Plug-in value on `s` and a batch-means standard error over ten chunks.
fn plugin_with_se(learned: &LearnedOperator, s: Samples<'_>) -> (f64, f64) {
    let k = 10;
    let m = s.len() / k;
    let parts: Vec<f64> = (0..k)
        .map(|i| {
            let r = i * m..(i + 1) * m;
            plugin_on(learned, Samples { z: &s.z[r.clone()], x: &s.x[r.clone()], y: &s.y[r] })
        })
        .collect();
    let mean = parts.iter().sum::<f64>() / k as f64;
    let var = parts.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    (plugin_on(learned, s), (var / k as f64).sqrt())
}

#[test]
fn plugin_alignment_agrees_across_disjoint_halves() {
    for seed in 0..3u64 {
        let op = build_operator(&SyntheticOperatorSpec { seed, ..Default::default() }).unwrap();
        let learned = truncated_features(&op, 4, 1.0);
        let data = sample_dataset(&op, 100_000, 0.5, 40 + seed).unwrap();
        let (a, b) = (data.feature_split(), data.estimation_split());
        let (va, sa) = plugin_with_se(&learned, a);
        let (vb, sb) = plugin_with_se(&learned, b);
        let bound = 3.0 * (sa * sa + sb * sb).sqrt();
        assert!((va - vb).abs() <= bound, "seed {seed}: {va} vs {vb}, bound {bound}");
    }
}

#[test]
fn mse_is_continuous_in_small_ridge() {
    let op = build_operator(&SyntheticOperatorSpec::default()).unwrap();
    let data = sample_dataset(&op, 20_000, 0.5, 9).unwrap();
    let learned = truncated_features(&op, op.rank() + 1, 0.0);
    let at = |ridge: f64| {
        let est = StructuralEstimate::fit(&learned, data.all(), ridge).unwrap();
        mse_l2(&est, &op, 50_000, 1).unwrap()
    };
    let base = at(1e-10);
    for ridge in [3e-10, 1e-9, 3e-9, 1e-8] {
        let v = at(ridge);
        assert!(v.is_finite());
        assert!((v - base).abs() <= 0.01 * base, "ridge {ridge}: {v} vs {base}");
    }
}

#[test]
fn failing_cells_do_not_abort_the_sweep() {
    let mut cfg = SweepConfig {
        deltas: vec![0.0],
        c_alphas: vec![5.0],
        c_sigmas: vec![0.8, 1.5],
        seeds: vec![0],
        n: 2000,
        n_eval: 1000,
        svg: false,
        ..Default::default()
    };
    cfg.train.steps = 5;
    let rows = experiment::run_sweep(&cfg, 1).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].result.is_ok());
    let err = rows[1].result.as_ref().unwrap_err();
    assert!(err.starts_with("synth:"), "{err}");
}

fn pair_residuals(mdp: &TabularMdp, pi: &Policy, q: &DenseMatrix, seed: u64) -> Vec<(usize, f64)> {
    let data = collect_offline(mdp, &Policy::uniform(mdp.n_states, mdp.n_actions), 40_000, seed).unwrap();
    data.tuples
        .iter()
        .map(|t| {
            let v: f64 = (0..mdp.n_actions).map(|a| pi.probs.get(t.s_next, a) * q.get(t.s_next, a)).sum();
            (mdp.pair(t.s, t.a), t.r + mdp.gamma * v - q.get(t.s, t.a))
        })
        .collect()
}

#[test]
fn true_q_satisfies_the_moment_condition() {
    let mdp = TabularMdp::chain(5, 0.9, 0.1, 0.1).unwrap();
    let pi = Policy::biased(5, 2, 1, 0.7).unwrap();
    let q = exact_q(&mdp, &pi).unwrap();
    for seed in 0..3 {
        let res = pair_residuals(&mdp, &pi, &q, seed);
        // two instrument directions: the constant and an alternating sign over pairs
        for sign in [|_: usize| 1.0, |p: usize| if p % 2 == 0 { 1.0 } else { -1.0 }] {
            let v: Vec<f64> = res.iter().map(|&(p, r)| sign(p) * r).collect();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            assert!(mean.abs() <= 3.0 * sd / n.sqrt(), "seed {seed}: {mean} vs se {}", sd / n.sqrt());
        }
    }
}

#[test]
fn bellman_residual_does_not_grow_after_burn_in() {
    for seed in 0..3u64 {
        let mdp = TabularMdp::chain(5, 0.9, 0.05 + 0.05 * seed as f64, 0.1).unwrap();
        let pi = Policy::biased(5, 2, 1, 0.7).unwrap();
        let data = collect_offline(&mdp, &Policy::uniform(5, 2), 20_000, seed).unwrap();
        let cfg = OpeConfig { tol: 0.0, max_iter: 12, seed, ..Default::default() };
        let res = iterative_npiv_ope(&data, &pi, mdp.gamma, Some(&mdp.mu0), &cfg).unwrap();
        let tail: Vec<f64> = res.trace.iter().skip(5).map(|t| t.bellman_residual).collect();
        for w in tail.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "seed {seed}: {tail:?}");
        }
    }
}

#[test]
fn delta_is_irrelevant_with_tabular_features() {
    let mdp = TabularMdp::chain(5, 0.9, 0.1, 0.1).unwrap();
    let pi = Policy::biased(5, 2, 1, 0.7).unwrap();
    let data = collect_offline(&mdp, &Policy::uniform(5, 2), 20_000, 4).unwrap();
    let run = |estimator, delta| {
        let cfg = OpeConfig { estimator, delta, ..Default::default() };
        iterative_npiv_ope(&data, &pi, mdp.gamma, Some(&mdp.mu0), &cfg).unwrap().rho_hat
    };
    let a = run(EstimatorKind::Speciv, 0.0);
    let b = run(EstimatorKind::Augspeciv, 1.0);
    assert!((a - b).abs() <= 0.02 * a.abs(), "{a} vs {b}");
}

#[test]
fn unvisited_actions_are_reported_as_coverage_gaps() {
    let mdp = TabularMdp::chain(4, 0.9, 0.1, 0.1).unwrap();
    let behavior = Policy::biased(4, 2, 0, 1.0).unwrap();
    let pi = Policy::uniform(4, 2);
    let data = collect_offline(&mdp, &behavior, 2000, 0).unwrap();
    let res = iterative_npiv_ope(&data, &pi, mdp.gamma, Some(&mdp.mu0), &OpeConfig::default()).unwrap();
    assert!(!res.uncovered.is_empty());
    assert!(res.uncovered.iter().all(|&(_, a)| a == 1));
}
