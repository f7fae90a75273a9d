use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use augspec::experiment::{
    self, AlignConfig, OpeExperimentConfig, SweepConfig, SynthConfig,
};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "augspec", version, about = "Spectral-feature NPIV experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the synthetic operator and write a dataset.
    Synth(Args),
    /// Train and estimate over the δ × c_α × c_σ × seed grid.
    Sweep(Args),
    /// Off-policy evaluation runs on a tabular MDP.
    Ope(Args),
    /// Per-δ spectral alignment report and δ selection.
    Align(Args),
}

#[derive(clap::Args, Debug)]
struct Args {
    /// TOML config file; missing keys take their defaults.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads for independent cells.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory (overrides `out_dir` from the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Top-level config file; each command reads its own section.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ExperimentConfig {
    out_dir: Option<PathBuf>,
    synth: SynthConfig,
    sweep: SweepConfig,
    align: AlignConfig,
    ope: OpeExperimentConfig,
}

#[derive(Debug)]
enum Failure {
    Fatal(String),
    /// The run finished but some cells carry an error tag.
    Cells(usize),
}

fn fatal<E: std::fmt::Display>(ctx: &str) -> impl Fn(E) -> Failure + '_ {
    move |e| Failure::Fatal(format!("{ctx}: {e}"))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(fatal(&format!("cannot create {}", path.display())))
}

fn load(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(fatal(&format!("cannot read {}", path.display())))?;
    toml::from_str(&text).map_err(fatal("invalid config"))
}

fn run(cmd: &Command) -> Result<(), Failure> {
    let paths = match cmd {
        Command::Synth(a) | Command::Sweep(a) | Command::Ope(a) | Command::Align(a) => a,
    };
    let cfg = load(&paths.config)?;
    let out = paths
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out).map_err(fatal(&format!("cannot create {}", out.display())))?;
    let resolved = ExperimentConfig { out_dir: Some(out.clone()), ..cfg };
    let text = toml::to_string(&resolved).map_err(fatal("cannot serialize resolved config"))?;
    std::fs::write(out.join("resolved_config.toml"), text).map_err(fatal("cannot write resolved config"))?;
    let jobs = paths.jobs.max(1);

    match cmd {
        Command::Synth(_) => {
            let s = experiment::run_synth(&resolved.synth, &out).map_err(fatal("synth"))?;
            println!(
                "wrote {} rows (feature split {}) to {}",
                s.metadata.n,
                s.metadata.split_m,
                out.join("dataset.csv").display()
            );
            println!("positivity margin: {:.4}", s.positivity_margin);
            println!("confounding corr(Y - h0(X), h0(X)): {:.4}", s.confounding_corr);
            Ok(())
        }
        Command::Sweep(_) => {
            let rows = experiment::run_sweep(&resolved.sweep, jobs).map_err(fatal("sweep"))?;
            experiment::write_sweep_csv(&rows, create(&out.join("sweep.csv"))?).map_err(fatal("sweep.csv"))?;
            if resolved.sweep.svg {
                std::fs::write(out.join("sweep.svg"), experiment::sweep_svg(&rows)).map_err(fatal("sweep.svg"))?;
            }
            let failed = rows.iter().filter(|r| r.result.is_err()).count();
            println!("sweep: {} cells, {} failed", rows.len(), failed);
            if failed > 0 {
                Err(Failure::Cells(failed))
            } else {
                Ok(())
            }
        }
        Command::Align(_) => {
            let report = experiment::run_align(&resolved.align, jobs).map_err(fatal("align"))?;
            experiment::write_align_csv(&report, create(&out.join("align.csv"))?).map_err(fatal("align.csv"))?;
            experiment::write_selection_csv(&report, create(&out.join("selection.csv"))?)
                .map_err(fatal("selection.csv"))?;
            if resolved.align.svg {
                std::fs::write(out.join("align.svg"), experiment::align_svg(&report)).map_err(fatal("align.svg"))?;
            }
            println!("selected delta: loss balance {}", report.selected_loss_balance);
            println!("selected delta: alignment {:?}", report.selected_alignment);
            println!("selected delta: stage-2 loss {:?}", report.selected_stage2);
            Ok(())
        }
        Command::Ope(_) => {
            let rows = experiment::run_ope(&resolved.ope, jobs).map_err(fatal("ope"))?;
            experiment::write_ope_trace_csv(&rows, create(&out.join("ope_trace.csv"))?)
                .map_err(fatal("ope_trace.csv"))?;
            experiment::write_ope_summary_csv(&rows, create(&out.join("ope_summary.csv"))?)
                .map_err(fatal("ope_summary.csv"))?;
            for (e, d, mae, k) in experiment::ope_mae(&rows) {
                println!("{:<10} delta {:<8} MAE {:.6} over {} runs", experiment::estimator_name(e), d, mae, k);
            }
            let failed = rows.iter().filter(|r| r.result.is_err()).count();
            if failed > 0 {
                Err(Failure::Cells(failed))
            } else {
                Ok(())
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Cells(n)) => {
            eprintln!("error: {n} cell(s) failed; see the error column");
            ExitCode::from(2)
        }
        Err(Failure::Fatal(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
