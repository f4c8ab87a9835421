use bitfed_cli::compare::{compare_runs, render};
use bitfed_cli::config::{ExperimentConfig, Overrides, Scheme};
use bitfed_cli::experiment::{estimate_only, run_experiment};
use bitfed_cli::selftest;
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "bitfed",
    about = "Variable-bitwidth federated learning simulator over a wireless edge network"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SchemeArg {
    Proposed,
    ModelFree,
    Binary,
    FullPrecision,
    Fixed,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Scheme {
        match s {
            SchemeArg::Proposed => Scheme::Proposed,
            SchemeArg::ModelFree => Scheme::ModelFree,
            SchemeArg::Binary => Scheme::Binary,
            SchemeArg::FullPrecision => Scheme::FullPrecision,
            SchemeArg::Fixed => Scheme::Fixed,
        }
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file (TOML); flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    scheme: Option<SchemeArg>,
    /// Bitwidth of the `fixed` scheme.
    #[arg(long)]
    alpha: Option<u32>,
    /// Device count M.
    #[arg(long)]
    devices: Option<usize>,
    /// Round budget T.
    #[arg(long)]
    rounds: Option<usize>,
    /// Per-round minibatch size (0 = full local set).
    #[arg(long)]
    minibatch: Option<usize>,
    /// Output directory for metrics files.
    #[arg(long)]
    out: Option<String>,
}

impl ConfigArgs {
    fn load(&self) -> bitfed_cli::Result<ExperimentConfig> {
        let overrides = Overrides {
            seed: self.seed,
            scheme: self.scheme.map(Scheme::from),
            alpha: self.alpha,
            devices: self.devices,
            rounds: self.rounds,
            minibatch: self.minibatch,
            out_dir: self.out.clone(),
        };
        ExperimentConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment (or a multi-seed sweep) and write metrics.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated seeds; each runs as an independent process.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Compare two or more metrics CSV files.
    Compare {
        files: Vec<PathBuf>,
        /// Loss threshold; defaults to the worst run's best loss.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Fit the convergence-bound constants from warmup rounds only.
    Estimate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the built-in property checks.
    Selftest,
}

fn sweep(cfg_args: &ConfigArgs, seeds: &[u64]) -> bitfed_cli::Result<()> {
    let exe = std::env::current_exe()?;
    for &seed in seeds {
        let mut cmd = std::process::Command::new(&exe);
        cmd.arg("run").arg("--seed").arg(seed.to_string());
        if let Some(config) = &cfg_args.config {
            cmd.arg("--config").arg(config);
        }
        if let Some(scheme) = cfg_args.scheme {
            let label = match scheme {
                SchemeArg::Proposed => "proposed",
                SchemeArg::ModelFree => "model-free",
                SchemeArg::Binary => "binary",
                SchemeArg::FullPrecision => "full-precision",
                SchemeArg::Fixed => "fixed",
            };
            cmd.arg("--scheme").arg(label);
        }
        if let Some(alpha) = cfg_args.alpha {
            cmd.arg("--alpha").arg(alpha.to_string());
        }
        if let Some(devices) = cfg_args.devices {
            cmd.arg("--devices").arg(devices.to_string());
        }
        if let Some(rounds) = cfg_args.rounds {
            cmd.arg("--rounds").arg(rounds.to_string());
        }
        if let Some(minibatch) = cfg_args.minibatch {
            cmd.arg("--minibatch").arg(minibatch.to_string());
        }
        if let Some(out) = &cfg_args.out {
            cmd.arg("--out").arg(out);
        }
        let status = cmd.status()?;
        if !status.success() {
            return Err(bitfed_cli::CliError::Config(format!(
                "seed {seed} run exited with {status}"
            )));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { cfg, seeds } => {
            if seeds.is_empty() {
                cfg.load().and_then(|config| {
                    let artifacts = run_experiment(&config)?;
                    println!(
                        "wrote {} and {}",
                        artifacts.csv_path.display(),
                        artifacts.summary_path.display()
                    );
                    println!(
                        "rounds={} final_loss={:.6} final_accuracy={:.4} sim_time={:.3}s",
                        artifacts.summary.rounds_executed,
                        artifacts.summary.final_loss,
                        artifacts.summary.final_accuracy,
                        artifacts.summary.cumulative_delay_s
                    );
                    Ok(())
                })
            } else {
                sweep(&cfg, &seeds)
            }
        }
        Command::Compare { files, threshold } => {
            let paths: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
            compare_runs(&paths, threshold).map(|cmp| print!("{}", render(&cmp)))
        }
        Command::Estimate { cfg } => cfg.load().and_then(|config| {
            let (report, records) = estimate_only(&config)?;
            let doc = serde_json::json!({
                "records_used": records,
                "regression_loss": report.loss,
                "restarts_converged": report.restarts_converged,
                "params": report.params,
            });
            println!("{}", serde_json::to_string_pretty(&doc).expect("serializable"));
            Ok(())
        }),
        Command::Selftest => selftest::run().map(|n| println!("selftest: {n} checks passed")),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
