//! Experiment drivers behind the command-line tool: dataset generation,
//! δ sweeps on the synthetic benchmark, alignment reports and OPE runs.
//!
//! Every driver is a pure function of its config (plus the worker count,
//! which never affects results). Tables are written as CSV with floats in
//! fixed `{:.12e}` notation so repeated runs are byte-identical.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment;
use crate::error::{Error, Result};
use crate::features::{Activation, FeatureNet, InputEncoding};
use crate::ope::{self, EstimatorKind, OpeConfig, Policy, TabularMdp};
use crate::spectral_loss::{train_features, LearnedOperator, TrainConfig, TrainTrace};
use crate::svg::{self, Frame, Svg};
use crate::synthgen::{self, Dataset, DatasetMetadata, GroundTruthOperator, SyntheticOperatorSpec};
use crate::twosls::{self, StructuralEstimate};

/// Fixed-precision float field; non-finite values become empty fields.
pub fn fmt_f(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.12e}")
    } else {
        String::new()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

fn one_line(s: &str) -> String {
    s.replace(['\n', '\r'], " ")
}

/// Feature network family for the synthetic benchmark.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureArch {
    /// Raw scalar input, 50 snake units, 50 GELU units, linear output.
    #[default]
    Mlp,
    /// The same hidden layers on top of `sin/cos(ℓt)`, `ℓ ≤ n_freq`.
    FourierMlp { n_freq: usize },
    /// One linear layer on top of `(1, √2 sin(ℓt))`, `ℓ ≤ n_freq`.
    SineLinear { n_freq: usize },
}

impl FeatureArch {
    pub fn build(&self, d: usize, seed: u64) -> Result<FeatureNet> {
        let hidden = [(50, Activation::Snake), (50, Activation::Gelu)];
        Ok(match *self {
            FeatureArch::Mlp => FeatureNet::synthetic_default(d, seed)?,
            FeatureArch::FourierMlp { n_freq } => {
                FeatureNet::new(InputEncoding::Fourier { n_freq }, &hidden, d, seed)?
            }
            FeatureArch::SineLinear { n_freq } => {
                FeatureNet::linear(InputEncoding::SineBasis { n_freq }, d, seed)?
            }
        })
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Seed of the dataset drawn for replicate `seed`.
pub fn dataset_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1)
}

// ---------------------------------------------------------------- synth

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub spec: SyntheticOperatorSpec,
    pub n: usize,
    pub split_fraction: f64,
    pub dataset_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            spec: SyntheticOperatorSpec::default(),
            n: 50_000,
            split_fraction: 0.5,
            dataset_seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSummary {
    pub metadata: DatasetMetadata,
    /// `min density − required floor`.
    pub positivity_margin: f64,
    /// Sample correlation between `Y − h₀(X)` and `h₀(X)`.
    pub confounding_corr: f64,
}

pub fn run_synth(cfg: &SynthConfig, out: &Path) -> Result<SynthSummary> {
    let op = synthgen::build_operator(&cfg.spec)?;
    let data = synthgen::sample_dataset(&op, cfg.n, cfg.split_fraction, cfg.dataset_seed)?;
    std::fs::create_dir_all(out)?;
    data.write_csv(std::io::BufWriter::new(std::fs::File::create(out.join("dataset.csv"))?))?;
    let metadata = DatasetMetadata {
        spec: cfg.spec.clone(),
        dataset_seed: cfg.dataset_seed,
        n: data.len(),
        split_m: data.split_m,
        min_density: op.min_density,
    };
    let json = serde_json::to_string_pretty(&metadata).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(out.join("metadata.json"), json + "\n")?;
    let h = synthgen::eval_h0(&op, &data.x)?;
    let u: Vec<f64> = data.y.iter().zip(&h).map(|(y, h)| y - h).collect();
    Ok(SynthSummary {
        metadata,
        positivity_margin: op.min_density - 0.01,
        confounding_corr: correlation(&u, &h),
    })
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

// ---------------------------------------------------------------- sweep

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Base operator; `c_alpha`, `c_sigma` and `seed` are overridden per cell.
    pub spec: SyntheticOperatorSpec,
    pub deltas: Vec<f64>,
    pub c_alphas: Vec<f64>,
    pub c_sigmas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub n: usize,
    pub split_fraction: f64,
    pub train: TrainConfig,
    pub arch: FeatureArch,
    pub ridge: f64,
    pub n_eval: usize,
    pub svg: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            spec: SyntheticOperatorSpec::default(),
            deltas: vec![0.0, 0.5, 1.0, 3.0, 5.0],
            c_alphas: vec![0.2, 5.0],
            c_sigmas: vec![0.2, 0.8],
            seeds: vec![0, 1, 2, 3, 4],
            n: 20_000,
            split_fraction: 0.5,
            train: TrainConfig::default(),
            arch: FeatureArch::Mlp,
            ridge: twosls::DEFAULT_RIDGE,
            n_eval: 100_000,
            svg: true,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, empty) in [
            ("deltas", self.deltas.is_empty()),
            ("c_alphas", self.c_alphas.is_empty()),
            ("c_sigmas", self.c_sigmas.is_empty()),
            ("seeds", self.seeds.is_empty()),
        ] {
            if empty {
                return Err(Error::Config(format!("sweep grid `{name}` is empty")));
            }
        }
        if self.deltas.iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::Config("deltas must be non-negative".into()));
        }
        if self.n_eval == 0 {
            return Err(Error::Config("n_eval must be positive".into()));
        }
        self.train.validate()?;
        Ok(())
    }

    fn cells(&self) -> Vec<SweepCell> {
        let mut cells = Vec::new();
        for &c_alpha in &self.c_alphas {
            for &c_sigma in &self.c_sigmas {
                for &seed in &self.seeds {
                    for &delta in &self.deltas {
                        cells.push(SweepCell { delta, c_alpha, c_sigma, seed });
                    }
                }
            }
        }
        cells
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepCell {
    pub delta: f64,
    pub c_alpha: f64,
    pub c_sigma: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellMetrics {
    pub mse: f64,
    pub mse_se: f64,
    pub alignment_plugin: Option<f64>,
    pub alignment_true: f64,
    pub illposedness: f64,
    pub l0_final: f64,
    pub r_delta_final: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub cell: SweepCell,
    pub result: std::result::Result<CellMetrics, String>,
    /// `mse` divided by the mean δ = 0 `mse` of the same `(c_α, c_σ)` panel.
    pub normalized_mse: Option<f64>,
}

pub const SWEEP_HEADER: [&str; 13] = [
    "delta",
    "c_alpha",
    "c_sigma",
    "seed",
    "mse",
    "normalized_mse",
    "mse_se",
    "alignment_plugin",
    "alignment_true",
    "illposedness",
    "l0_final",
    "r_delta_final",
    "error",
];

/// Everything a sweep cell produces besides the metrics, for callers that
/// want to inspect the fitted objects.
pub struct CellFit {
    pub op: GroundTruthOperator,
    pub data: Dataset,
    pub learned: LearnedOperator,
    pub trace: TrainTrace,
    pub estimate: StructuralEstimate,
}

/// Builds the operator and dataset of a replicate, trains features at `delta`
/// on the feature split and fits 2SLS on the estimation split.
pub fn fit_cell(cfg: &SweepConfig, cell: SweepCell) -> Result<CellFit> {
    let spec = SyntheticOperatorSpec {
        c_alpha: cell.c_alpha,
        c_sigma: cell.c_sigma,
        seed: cell.seed,
        ..cfg.spec.clone()
    };
    let op = synthgen::build_operator(&spec)?;
    let data = synthgen::sample_dataset(&op, cfg.n, cfg.split_fraction, dataset_seed(cell.seed))?;
    let train = TrainConfig {
        delta: cell.delta,
        seed: cfg.train.seed.wrapping_add(cell.seed),
        ..cfg.train.clone()
    };
    let phi = cfg.arch.build(train.d, 2 * cell.seed)?;
    let psi = cfg.arch.build(train.d, 2 * cell.seed + 1)?;
    let (learned, trace) = train_features(data.feature_split(), phi, psi, &train)?;
    let estimate = StructuralEstimate::fit(&learned, data.estimation_split(), cfg.ridge)?;
    Ok(CellFit { op, data, learned, trace, estimate })
}

fn run_cell(cfg: &SweepConfig, cell: SweepCell) -> Result<CellMetrics> {
    let fit = fit_cell(cfg, cell)?;
    let eval_seed = cell.seed.wrapping_add(7);
    let (mse, mse_se) = twosls::mse_l2_with_se(&fit.estimate, &fit.op, cfg.n_eval, eval_seed)?;
    let est_split = fit.data.estimation_split();
    let alignment_plugin = alignment::empirical_svd(&fit.learned, est_split, cfg.train.cov_eps)
        .and_then(|emp| alignment::alignment_plugin(&emp, &fit.learned, est_split))
        .map(|a| a.value)
        .ok();
    let alignment_true = alignment::alignment_true(&fit.learned, &fit.op, cfg.n_eval, eval_seed)?;
    let phi = fit.learned.phi.features(est_split.x)?;
    let psi = fit.learned.psi.features(est_split.z)?;
    let illposedness = twosls::illposedness(&phi, &psi, cfg.train.cov_eps)?;
    let last = fit.trace.last().copied();
    Ok(CellMetrics {
        mse,
        mse_se,
        alignment_plugin,
        alignment_true,
        illposedness,
        l0_final: last.map(|r| r.l0).unwrap_or(f64::NAN),
        r_delta_final: last.map(|r| r.r_delta).unwrap_or(f64::NAN),
    })
}

/// Runs the full `δ × c_α × c_σ × seed` grid on `jobs` workers. Failing
/// cells become rows carrying an error tag; the rest of the grid continues.
pub fn run_sweep(cfg: &SweepConfig, jobs: usize) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let cells = cfg.cells();
    let results: Vec<std::result::Result<CellMetrics, String>> = pool(jobs)?.install(|| {
        cells
            .par_iter()
            .map(|&c| run_cell(cfg, c).map_err(|e| format!("{}: {}", e.tag(), one_line(&e.to_string()))))
            .collect()
    });
    let mut rows: Vec<SweepRow> = cells
        .into_iter()
        .zip(results)
        .map(|(cell, result)| SweepRow { cell, result, normalized_mse: None })
        .collect();
    normalize(&mut rows);
    Ok(rows)
}

fn normalize(rows: &mut [SweepRow]) {
    let panels: Vec<(f64, f64)> = rows.iter().map(|r| (r.cell.c_alpha, r.cell.c_sigma)).collect();
    let mut bases = Vec::with_capacity(rows.len());
    for &(ca, cs) in &panels {
        let base: Vec<f64> = rows
            .iter()
            .filter(|r| r.cell.c_alpha == ca && r.cell.c_sigma == cs && r.cell.delta == 0.0)
            .filter_map(|r| r.result.as_ref().ok().map(|m| m.mse))
            .collect();
        bases.push(if base.is_empty() {
            None
        } else {
            Some(base.iter().sum::<f64>() / base.len() as f64)
        });
    }
    for (row, base) in rows.iter_mut().zip(bases) {
        row.normalized_mse = match (&row.result, base) {
            (Ok(m), Some(b)) => Some(m.mse / b),
            _ => None,
        };
    }
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(SWEEP_HEADER)?;
    for r in rows {
        let c = r.cell;
        let mut rec = vec![fmt_f(c.delta), fmt_f(c.c_alpha), fmt_f(c.c_sigma), c.seed.to_string()];
        match &r.result {
            Ok(m) => {
                rec.extend([
                    fmt_f(m.mse),
                    fmt_opt(r.normalized_mse),
                    fmt_f(m.mse_se),
                    fmt_opt(m.alignment_plugin),
                    fmt_f(m.alignment_true),
                    fmt_f(m.illposedness),
                    fmt_f(m.l0_final),
                    fmt_f(m.r_delta_final),
                    String::new(),
                ]);
            }
            Err(e) => {
                rec.extend(std::iter::repeat_n(String::new(), 8));
                rec.push(e.clone());
            }
        }
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

/// One box plot of normalized MSE against δ per `(c_α, c_σ)` panel.
pub fn sweep_svg(rows: &[SweepRow]) -> String {
    let mut panels: Vec<(f64, f64)> = Vec::new();
    let mut deltas: Vec<f64> = Vec::new();
    for r in rows {
        let p = (r.cell.c_alpha, r.cell.c_sigma);
        if !panels.contains(&p) {
            panels.push(p);
        }
        if !deltas.contains(&r.cell.delta) {
            deltas.push(r.cell.delta);
        }
    }
    deltas.sort_by(f64::total_cmp);
    let (pw, ph) = (320.0, 240.0);
    let mut svg = Svg::new(pw * panels.len().max(1) as f64, ph);
    for (k, &(ca, cs)) in panels.iter().enumerate() {
        let groups: Vec<Vec<f64>> = deltas
            .iter()
            .map(|&d| {
                let mut v: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.cell.c_alpha == ca && r.cell.c_sigma == cs && r.cell.delta == d)
                    .filter_map(|r| r.normalized_mse)
                    .filter(|v| v.is_finite())
                    .collect();
                v.sort_by(f64::total_cmp);
                v
            })
            .collect();
        let (ymin, ymax) = svg::value_range(groups.iter().flatten());
        let f = Frame { x0: k as f64 * pw + 50.0, y0: 30.0, w: pw - 70.0, h: ph - 70.0, ymin, ymax };
        let labels: Vec<String> = deltas.iter().map(|d| format!("δ={d}")).collect();
        f.axes(&mut svg, &format!("c_α={ca}, c_σ={cs}"), &labels);
        svg.line(f.x0, f.y(1.0), f.x0 + f.w, f.y(1.0), "#999999");
        let bw = f.w / deltas.len() as f64 * 0.5;
        for (i, g) in groups.iter().enumerate() {
            if g.is_empty() {
                continue;
            }
            let x = f.slot(i, deltas.len());
            let (q1, q2, q3) = (svg::quantile(g, 0.25), svg::quantile(g, 0.5), svg::quantile(g, 0.75));
            svg.line(x, f.y(g[0]), x, f.y(g[g.len() - 1]), "black");
            svg.rect(x - bw / 2.0, f.y(q3), bw, f.y(q1) - f.y(q3), svg::color(0));
            svg.line(x - bw / 2.0, f.y(q2), x + bw / 2.0, f.y(q2), "black");
        }
    }
    svg.finish()
}

// ---------------------------------------------------------------- align

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub spec: SyntheticOperatorSpec,
    pub deltas: Vec<f64>,
    pub seed: u64,
    pub n: usize,
    pub split_fraction: f64,
    pub train: TrainConfig,
    pub arch: FeatureArch,
    pub ridge: f64,
    pub n_eval: usize,
    pub eta: f64,
    pub svg: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            spec: SyntheticOperatorSpec::default(),
            deltas: vec![0.0, 0.5, 1.0, 3.0, 5.0],
            seed: 0,
            n: 20_000,
            split_fraction: 0.5,
            train: TrainConfig::default(),
            arch: FeatureArch::Mlp,
            ridge: twosls::DEFAULT_RIDGE,
            n_eval: 100_000,
            eta: alignment::DEFAULT_ETA,
            svg: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignRow {
    pub delta: f64,
    pub sigma_hat: Vec<f64>,
    pub alignment_plugin: Option<f64>,
    pub alignment_true: f64,
    pub l0_final: f64,
    pub r_delta_final: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignReport {
    pub rows: Vec<AlignRow>,
    pub d: usize,
    pub selected_loss_balance: f64,
    pub selected_alignment: Option<f64>,
    pub selected_stage2: Option<f64>,
}

pub fn run_align(cfg: &AlignConfig, jobs: usize) -> Result<AlignReport> {
    if cfg.deltas.is_empty() {
        return Err(Error::Config("align grid `deltas` is empty".into()));
    }
    let sweep = SweepConfig {
        spec: cfg.spec.clone(),
        deltas: cfg.deltas.clone(),
        c_alphas: vec![cfg.spec.c_alpha],
        c_sigmas: vec![cfg.spec.c_sigma],
        seeds: vec![cfg.seed],
        n: cfg.n,
        split_fraction: cfg.split_fraction,
        train: cfg.train.clone(),
        arch: cfg.arch.clone(),
        ridge: cfg.ridge,
        n_eval: cfg.n_eval,
        svg: false,
    };
    sweep.validate()?;
    let fits: Vec<Result<CellFit>> = pool(jobs)?.install(|| {
        cfg.deltas
            .par_iter()
            .map(|&delta| {
                fit_cell(&sweep, SweepCell { delta, c_alpha: cfg.spec.c_alpha, c_sigma: cfg.spec.c_sigma, seed: cfg.seed })
            })
            .collect()
    });
    let fits = fits.into_iter().collect::<Result<Vec<_>>>()?;
    let cov_eps = cfg.train.cov_eps;
    let mut rows = Vec::new();
    for (fit, &delta) in fits.iter().zip(&cfg.deltas) {
        let est = fit.data.estimation_split();
        let emp = alignment::empirical_svd(&fit.learned, est, cov_eps)?;
        let plug = alignment::alignment_plugin(&emp, &fit.learned, est).map(|a| a.value).ok();
        let last = fit.trace.last().copied();
        rows.push(AlignRow {
            delta,
            sigma_hat: emp.sigma_hat.clone(),
            alignment_plugin: plug,
            alignment_true: alignment::alignment_true(&fit.learned, &fit.op, cfg.n_eval, cfg.seed.wrapping_add(7))?,
            l0_final: last.map(|r| r.l0).unwrap_or(f64::NAN),
            r_delta_final: last.map(|r| r.r_delta).unwrap_or(f64::NAN),
        });
    }

    let traces: Vec<(f64, TrainTrace)> = fits.iter().zip(&cfg.deltas).map(|(f, &d)| (d, f.trace.clone())).collect();
    let selected_loss_balance = if cfg.deltas.contains(&0.0) {
        alignment::select_delta_loss_balance(&traces, cfg.eta)?
    } else {
        f64::NAN
    };
    // Selection needs a split untouched by the 2SLS fit: halve the estimation split.
    let est = fits[0].data.estimation_split();
    let (fit_half, held_half) = est.split_at(est.len() / 2);
    let mut stage2 = Vec::new();
    let mut by_align = Vec::new();
    for (fit, &d) in fits.iter().zip(&cfg.deltas) {
        if let Ok(e) = StructuralEstimate::fit(&fit.learned, fit_half, cfg.ridge) {
            stage2.push((d, (fit.learned.clone(), e)));
        }
        by_align.push((d, fit.learned.clone()));
    }
    Ok(AlignReport {
        d: cfg.train.d,
        rows,
        selected_loss_balance,
        selected_alignment: alignment::select_delta_alignment(&by_align, held_half, cov_eps).ok(),
        selected_stage2: alignment::select_delta_stage2(&stage2, held_half).ok(),
    })
}

pub fn align_header(d: usize) -> Vec<String> {
    let mut h = vec!["delta".to_string()];
    h.extend((1..=d).map(|i| format!("sigma_hat_{i}")));
    h.extend(["alignment_plugin", "alignment_true", "l0_final", "r_delta_final"].map(String::from));
    h
}

pub fn write_align_csv<W: Write>(report: &AlignReport, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(align_header(report.d))?;
    for r in &report.rows {
        let mut rec = vec![fmt_f(r.delta)];
        rec.extend((0..report.d).map(|i| r.sigma_hat.get(i).copied().map(fmt_f).unwrap_or_default()));
        rec.extend([fmt_opt(r.alignment_plugin), fmt_f(r.alignment_true), fmt_f(r.l0_final), fmt_f(r.r_delta_final)]);
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_selection_csv<W: Write>(report: &AlignReport, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["selector", "delta"])?;
    wr.write_record(["loss_balance".to_string(), fmt_f(report.selected_loss_balance)])?;
    wr.write_record(["alignment".to_string(), fmt_opt(report.selected_alignment)])?;
    wr.write_record(["stage2".to_string(), fmt_opt(report.selected_stage2)])?;
    wr.flush()?;
    Ok(())
}

/// Left: final `L̂₀` and `R̂_δ` bars per δ. Right: plug-in and true alignment.
pub fn align_svg(report: &AlignReport) -> String {
    let n = report.rows.len();
    let labels: Vec<String> = report.rows.iter().map(|r| format!("δ={}", r.delta)).collect();
    let mut svg = Svg::new(680.0, 260.0);
    let losses: Vec<f64> = report.rows.iter().flat_map(|r| [r.l0_final, r.r_delta_final, 0.0]).collect();
    let (lo, hi) = svg::value_range(&losses);
    let left = Frame { x0: 60.0, y0: 30.0, w: 260.0, h: 190.0, ymin: lo, ymax: hi };
    left.axes(&mut svg, "final L0 (blue) and R_delta (red)", &labels);
    let bw = left.w / n.max(1) as f64 * 0.35;
    for (i, r) in report.rows.iter().enumerate() {
        let x = left.slot(i, n);
        for (j, v) in [r.l0_final, r.r_delta_final].into_iter().enumerate() {
            if v.is_finite() {
                let (a, b) = (left.y(v), left.y(0.0));
                svg.rect(x - bw + j as f64 * bw, a.min(b), bw, (a - b).abs(), svg::color(j));
            }
        }
    }
    let al: Vec<f64> = report
        .rows
        .iter()
        .flat_map(|r| [r.alignment_true, r.alignment_plugin.unwrap_or(f64::NAN)])
        .collect();
    let (lo, hi) = svg::value_range(&al);
    let right = Frame { x0: 400.0, y0: 30.0, w: 260.0, h: 190.0, ymin: lo.min(0.0), ymax: hi };
    right.axes(&mut svg, "alignment: plug-in (blue), true (red)", &labels);
    let series: [Vec<f64>; 2] = [
        report.rows.iter().map(|r| r.alignment_plugin.unwrap_or(f64::NAN)).collect(),
        report.rows.iter().map(|r| r.alignment_true).collect(),
    ];
    for (j, s) in series.iter().enumerate() {
        let pts: Vec<(f64, f64)> = s
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| (right.slot(i, n), right.y(v)))
            .collect();
        svg.polyline(&pts, svg::color(j));
        for &(x, y) in &pts {
            svg.circle(x, y, 2.5, svg::color(j));
        }
    }
    svg.finish()
}

// ---------------------------------------------------------------- ope

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MdpSpec {
    Chain { n_states: usize, slip: f64 },
    Random { n_states: usize, n_actions: usize, seed: u64 },
    Clustered { n_clusters: usize, per_cluster: usize, n_actions: usize, switch: f64, eta: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    Uniform,
    /// Probability `p` on `action`, the rest spread evenly.
    Biased { action: usize, p: f64 },
}

impl PolicySpec {
    pub fn build(&self, n_states: usize, n_actions: usize) -> Result<Policy> {
        Ok(match *self {
            PolicySpec::Uniform => Policy::uniform(n_states, n_actions),
            PolicySpec::Biased { action, p } => {
                if action >= n_actions {
                    return Err(Error::Config(format!("action {action} ≥ {n_actions}")));
                }
                Policy::biased(n_states, n_actions, action, p)?
            }
        })
    }
}

/// Moves the reward onto a low singular direction of the induced operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MisalignSpec {
    pub from_index: usize,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpeExperimentConfig {
    pub mdp: MdpSpec,
    pub gamma: f64,
    pub reward_std: f64,
    pub misalign: Option<MisalignSpec>,
    pub behavior: PolicySpec,
    pub target: PolicySpec,
    pub n: usize,
    pub estimators: Vec<EstimatorKind>,
    /// δ grid for the augmented estimator.
    pub deltas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Shared iteration settings; `estimator`, `delta` and `seed` are set per run.
    pub solver: OpeConfig,
}

impl Default for OpeExperimentConfig {
    fn default() -> Self {
        Self {
            mdp: MdpSpec::Chain { n_states: 5, slip: 0.1 },
            gamma: 0.9,
            reward_std: 0.1,
            misalign: None,
            behavior: PolicySpec::Uniform,
            target: PolicySpec::Biased { action: 1, p: 0.7 },
            n: 20_000,
            estimators: vec![EstimatorKind::Speciv, EstimatorKind::Augspeciv],
            deltas: vec![1e-3, 1e-2, 1e-1, 1.0],
            seeds: vec![0, 1, 2, 3, 4],
            solver: OpeConfig::default(),
        }
    }
}

impl OpeExperimentConfig {
    pub fn build_mdp(&self) -> Result<(TabularMdp, Policy, Policy)> {
        let mut mdp = match self.mdp {
            MdpSpec::Chain { n_states, slip } => TabularMdp::chain(n_states, self.gamma, slip, self.reward_std)?,
            MdpSpec::Random { n_states, n_actions, seed } => {
                TabularMdp::random(n_states, n_actions, self.gamma, self.reward_std, seed)?
            }
            MdpSpec::Clustered { n_clusters, per_cluster, n_actions, switch, eta, seed } => {
                TabularMdp::clustered(n_clusters, per_cluster, n_actions, switch, eta, self.gamma, self.reward_std, seed)?
            }
        };
        let pi_b = self.behavior.build(mdp.n_states, mdp.n_actions)?;
        let pi = self.target.build(mdp.n_states, mdp.n_actions)?;
        if let Some(m) = &self.misalign {
            mdp.misalign_reward(&pi_b, &pi, m.from_index, m.scale)?;
        }
        Ok((mdp, pi_b, pi))
    }

    fn runs(&self) -> Vec<(EstimatorKind, f64, u64)> {
        let mut runs = Vec::new();
        for &seed in &self.seeds {
            for &est in &self.estimators {
                match est {
                    EstimatorKind::Speciv => runs.push((est, 0.0, seed)),
                    EstimatorKind::Augspeciv => runs.extend(self.deltas.iter().map(|&d| (est, d, seed))),
                }
            }
        }
        runs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpeRunRow {
    pub estimator: EstimatorKind,
    pub delta: f64,
    pub seed: u64,
    pub rho_true: f64,
    pub trace: Vec<ope::OpeIterRecord>,
    pub result: std::result::Result<OpeRunSummary, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpeRunSummary {
    pub rho_hat: f64,
    pub converged: bool,
    pub uncovered: usize,
}

impl OpeRunRow {
    pub fn abs_error(&self) -> Option<f64> {
        self.result.as_ref().ok().map(|s| (s.rho_hat - self.rho_true).abs())
    }
}

pub fn estimator_name(e: EstimatorKind) -> &'static str {
    match e {
        EstimatorKind::Speciv => "speciv",
        EstimatorKind::Augspeciv => "augspeciv",
    }
}

pub fn run_ope(cfg: &OpeExperimentConfig, jobs: usize) -> Result<Vec<OpeRunRow>> {
    if cfg.seeds.is_empty() || cfg.estimators.is_empty() {
        return Err(Error::Config("ope grids `seeds` and `estimators` must be nonempty".into()));
    }
    if cfg.estimators.contains(&EstimatorKind::Augspeciv) && cfg.deltas.is_empty() {
        return Err(Error::Config("augspeciv needs a nonempty `deltas` grid".into()));
    }
    let (mdp, pi_b, pi) = cfg.build_mdp()?;
    let rho_true = ope::policy_value(&mdp, &ope::exact_q(&mdp, &pi)?, &pi);
    let runs = cfg.runs();
    let rows = pool(jobs)?.install(|| {
        runs.par_iter()
            .map(|&(estimator, delta, seed)| {
                let solver = OpeConfig { estimator, delta, seed, ..cfg.solver.clone() };
                let out = ope::collect_offline(&mdp, &pi_b, cfg.n, dataset_seed(seed))
                    .and_then(|data| ope::iterative_npiv_ope(&data, &pi, mdp.gamma, Some(&mdp.mu0), &solver));
                let (trace, result) = match out {
                    Ok(r) => (
                        r.trace.clone(),
                        Ok(OpeRunSummary { rho_hat: r.rho_hat, converged: r.converged, uncovered: r.uncovered.len() }),
                    ),
                    Err(e) => {
                        let trace = match &e {
                            ope::OpeError::Diverged { trace, .. } => trace.clone(),
                            _ => Vec::new(),
                        };
                        let e = Error::from(e);
                        (trace, Err(format!("{}: {}", e.tag(), one_line(&e.to_string()))))
                    }
                };
                OpeRunRow { estimator, delta, seed, rho_true, trace, result }
            })
            .collect()
    });
    Ok(rows)
}

pub const OPE_TRACE_HEADER: [&str; 7] =
    ["estimator", "delta", "seed", "iter", "supnorm_change", "bellman_residual", "rho_hat"];

pub const OPE_SUMMARY_HEADER: [&str; 10] = [
    "estimator",
    "delta",
    "seed",
    "rho_hat",
    "rho_true",
    "abs_error",
    "iterations",
    "converged",
    "uncovered_pairs",
    "error",
];

pub fn write_ope_trace_csv<W: Write>(rows: &[OpeRunRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(OPE_TRACE_HEADER)?;
    for r in rows {
        for t in &r.trace {
            wr.write_record([
                estimator_name(r.estimator).to_string(),
                fmt_f(r.delta),
                r.seed.to_string(),
                t.iter.to_string(),
                fmt_f(t.supnorm_change),
                fmt_f(t.bellman_residual),
                fmt_f(t.rho_hat),
            ])?;
        }
    }
    wr.flush()?;
    Ok(())
}

pub fn write_ope_summary_csv<W: Write>(rows: &[OpeRunRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(OPE_SUMMARY_HEADER)?;
    for r in rows {
        let head = [estimator_name(r.estimator).to_string(), fmt_f(r.delta), r.seed.to_string()];
        let rest = match &r.result {
            Ok(s) => [
                fmt_f(s.rho_hat),
                fmt_f(r.rho_true),
                fmt_opt(r.abs_error()),
                r.trace.len().to_string(),
                s.converged.to_string(),
                s.uncovered.to_string(),
                String::new(),
            ],
            Err(e) => [
                String::new(),
                fmt_f(r.rho_true),
                String::new(),
                r.trace.len().to_string(),
                "false".into(),
                String::new(),
                e.clone(),
            ],
        };
        wr.write_record(head.iter().chain(rest.iter()))?;
    }
    wr.flush()?;
    Ok(())
}

/// Mean absolute value error per `(estimator, δ)` over successful seeds.
pub fn ope_mae(rows: &[OpeRunRow]) -> Vec<(EstimatorKind, f64, f64, usize)> {
    let mut keys: Vec<(EstimatorKind, f64)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.estimator, r.delta)) {
            keys.push((r.estimator, r.delta));
        }
    }
    keys.into_iter()
        .map(|(e, d)| {
            let errs: Vec<f64> = rows
                .iter()
                .filter(|r| r.estimator == e && r.delta == d)
                .filter_map(|r| r.abs_error())
                .collect();
            let mae = errs.iter().sum::<f64>() / errs.len().max(1) as f64;
            (e, d, if errs.is_empty() { f64::NAN } else { mae }, errs.len())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_is_fixed() {
        assert_eq!(fmt_f(1.0), "1.000000000000e0");
        assert_eq!(fmt_f(f64::NAN), "");
    }

    #[test]
    fn empty_grids_rejected() {
        let cfg = SweepConfig { deltas: vec![], ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = AlignConfig { deltas: vec![], ..Default::default() };
        assert!(run_align(&cfg, 1).is_err());
    }

    #[test]
    fn cell_order_is_grid_order() {
        let cfg = SweepConfig {
            deltas: vec![0.0, 1.0],
            c_alphas: vec![5.0],
            c_sigmas: vec![0.2, 0.8],
            seeds: vec![3],
            ..Default::default()
        };
        let cells = cfg.cells();
        assert_eq!(cells.len(), 4);
        assert_eq!((cells[1].delta, cells[1].c_sigma), (1.0, 0.2));
        assert_eq!(cells[2].c_sigma, 0.8);
    }

    #[test]
    fn normalization_uses_panel_baseline() {
        let m = |mse| CellMetrics {
            mse,
            mse_se: 0.0,
            alignment_plugin: None,
            alignment_true: 0.0,
            illposedness: 0.0,
            l0_final: 0.0,
            r_delta_final: 0.0,
        };
        let cell = |delta, seed| SweepCell { delta, c_alpha: 1.0, c_sigma: 1.0, seed };
        let mut rows = vec![
            SweepRow { cell: cell(0.0, 0), result: Ok(m(2.0)), normalized_mse: None },
            SweepRow { cell: cell(0.0, 1), result: Ok(m(4.0)), normalized_mse: None },
            SweepRow { cell: cell(1.0, 0), result: Ok(m(1.5)), normalized_mse: None },
            SweepRow { cell: cell(1.0, 1), result: Err("x".into()), normalized_mse: None },
        ];
        normalize(&mut rows);
        let mean0 = (rows[0].normalized_mse.unwrap() + rows[1].normalized_mse.unwrap()) / 2.0;
        assert_eq!(mean0, 1.0);
        assert_eq!(rows[2].normalized_mse, Some(0.5));
        assert_eq!(rows[3].normalized_mse, None);
    }

    #[test]
    fn ope_run_list_expands_deltas() {
        let cfg = OpeExperimentConfig { seeds: vec![0, 1], deltas: vec![0.1, 1.0], ..Default::default() };
        let runs = cfg.runs();
        assert_eq!(runs.len(), 6);
        assert_eq!(runs[0], (EstimatorKind::Speciv, 0.0, 0));
    }
}
