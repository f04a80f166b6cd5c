use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedmi::bench::{self, MatrixConfig, PlotKind, RunConfig};
use fedmi::calibration::{calibrate_mi, CalibrationConfig};
use fedmi::mi_losses::LossKind;

#[derive(Parser)]
#[command(name = "fedmi", version, about = "Federated MI-loss experiments and fairness metrics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its bundle to <out>/<name>.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// key=value, applied after the config file.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run every cell of an axes file.
    Matrix {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Turn bundles into plot-ready CSV.
    Plotdata {
        #[arg(long)]
        kind: PlotKind,
        #[arg(long, required = true, num_args = 1..)]
        bundles: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate MI on correlated Gaussians and print estimate against truth.
    CalibrateMi {
        #[arg(long, default_value = "infonce")]
        loss: LossKind,
        #[arg(long, default_value_t = 0.5)]
        rho: f64,
        #[arg(long, default_value_t = 3000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> fedmi::Result<bool> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            mut overrides,
        } => {
            if let Some(s) = seed {
                overrides.push(format!("seed={s}"));
            }
            let cfg = RunConfig::load(config.as_deref(), &overrides)?;
            let bundle = bench::run_experiment(&cfg, &out)?;
            match bundle.report.mean_general_fairness() {
                Some(ft) => println!("{}: {} rounds, mean F_t {ft:.4}", bundle.dir.display(), bundle.records.len()),
                None => println!("{}", bundle.dir.display()),
            }
            Ok(true)
        }
        Command::Matrix {
            config,
            seed,
            out,
            overrides,
        } => {
            let matrix = MatrixConfig::load(&config)?;
            let master = match seed {
                Some(s) => s,
                None => RunConfig::from_table(matrix.base.clone())?.seed,
            };
            let outcomes = bench::run_matrix(&matrix, master, &overrides, &out)?;
            for o in &outcomes {
                match &o.error {
                    None => println!("ok      {}", o.name),
                    Some(e) => println!("failed  {}: {e}", o.name),
                }
            }
            Ok(outcomes.iter().all(|o| o.error.is_none()))
        }
        Command::Plotdata { kind, bundles, out } => {
            let loaded = bundles.iter().map(|b| bench::load_bundle(b)).collect::<fedmi::Result<Vec<_>>>()?;
            bench::write_atomic(&out, &bench::emit_plot_data(&loaded, kind)?)?;
            println!("{}", out.display());
            Ok(true)
        }
        Command::CalibrateMi { loss, rho, steps, seed } => {
            let mut cfg = CalibrationConfig::new(loss, rho, seed);
            cfg.steps = steps;
            cfg.window = cfg.window.min(steps);
            let r = calibrate_mi(&cfg)?;
            println!("{} rho={} true={:.4} estimate={:.4}", r.kind, r.rho, r.true_mi, r.estimate);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
