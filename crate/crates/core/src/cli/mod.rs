//! Command-line experiment runner.

pub mod checkpoint;
pub mod config;
pub mod preset;
pub mod runner;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::analysis::{perturbation_demo, write_perturb, write_perturb_csv, PERTURB_EPSILONS};
use crate::autodiff::{GradCheckReport, Tensor};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{Loss, MlpSpec, Model, Parameterization, Targets};
pub use config::{ExperimentConfig, LrChoice};
pub use preset::{preset, PresetOptions};
pub use runner::{run, RunSummary};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_ALL_DIVERGED: u8 = 3;
pub const EXIT_IO: u8 = 4;

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::InvalidSpec(_) => EXIT_CONFIG,
        Error::NoViableLr => EXIT_ALL_DIVERGED,
        Error::Io { .. } | Error::Csv { .. } | Error::Parse { .. } => EXIT_IO,
        _ => EXIT_FAILURE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "geoparam", version, about = "Train ReLU MLPs under four parameterizations and trace their boundaries")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Workers {
    /// Train splits and grid points on this many threads (capped by GEOPARAM_THREADS).
    #[arg(long, default_value_t = 1)]
    pub parallel_folds: usize,
}

impl Workers {
    pub fn threads(&self) -> usize {
        let k = self.parallel_folds.max(1);
        runner::thread_cap().map_or(k, |cap| k.min(cap))
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        #[command(flatten)]
        workers: Workers,
    },
    /// Run a named experiment (levy, banana, uci-boston, uci-wine_red, uci-auto_mpg).
    Preset {
        /// A preset name, optionally suffixed with a parameterization (`levy-gmp`).
        name: String,
        #[arg(long, value_parser = parse_param)]
        param: Option<Parameterization>,
        #[arg(long, conflicts_with = "grid")]
        lr: Option<f64>,
        /// Select the learning rate from the standard grid.
        #[arg(long)]
        grid: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Directory holding the UCI tables.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Print the resolved config instead of running it.
        #[arg(long)]
        print: bool,
        #[command(flatten)]
        workers: Workers,
    },
    /// Check analytic gradients of three small networks against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Boundary displacement of one 2-D unit under small parameter perturbations.
    PerturbDemo {
        /// Write CSV here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_param(s: &str) -> std::result::Result<Parameterization, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// The three networks of the gradient integrity check, each with a batch
/// of standard normal inputs: a two-hidden-layer GmP net with input mean
/// normalization, an SP net with batch norm (batch 8), and a WN net with
/// mean-only batch norm.
pub fn gradient_suite(seed: u64) -> Result<Vec<(&'static str, Model, Tensor, Targets)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaussian = |rows: usize, cols: usize| {
        let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::matrix(rows, cols, data)
    };
    let cases = [
        ("gmp-imn 3-6-5-2", MlpSpec::mlp(3, &[6, 5], 2, Parameterization::GmpImn, Loss::Mse, seed), 6),
        ("bn 4-7-3", MlpSpec::mlp(4, &[7], 3, Parameterization::Bn, Loss::SoftmaxCe, seed), 8),
        ("wn-mbn 3-5-4-1", MlpSpec::mlp(3, &[5, 4], 1, Parameterization::WnMbn, Loss::Mse, seed), 8),
    ];
    let mut out = Vec::new();
    for (name, spec, batch) in cases {
        let x = gaussian(batch, spec.input_dim())?;
        let y = match spec.loss {
            Loss::Mse => Targets::Values(gaussian(batch, spec.output_dim())?),
            Loss::SoftmaxCe => Targets::Labels((0..batch).map(|i| i % spec.output_dim()).collect()),
        };
        out.push((name, Model::from_seed(spec)?, x, y));
    }
    Ok(out)
}

pub const GRADCHECK_STEP: f64 = 1e-6;
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Runs [`gradient_suite`] in train mode.
pub fn gradient_integrity(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    gradient_suite(seed)?
        .into_iter()
        .map(|(name, model, x, y)| {
            let report = model.gradient_check(&x, &y, Mode::Train, GRADCHECK_STEP, GRADCHECK_TOL)?;
            Ok((name, report))
        })
        .collect()
}

fn execute(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Run { config, workers } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            report_run(&run(&cfg, workers.threads())?);
            Ok(0)
        }
        Command::Preset {
            name,
            param,
            lr,
            grid,
            seed,
            out,
            epochs,
            data_dir,
            print,
            workers,
        } => {
            let (base, suffix) = preset::split_name(&name);
            let param = match (param, suffix) {
                (Some(a), Some(b)) if a != b => {
                    return Err(Error::config("--param", format!("`{name}` already selects {b}")));
                }
                (a, b) => a.or(b).unwrap_or(Parameterization::Gmp),
            };
            let mut opts = PresetOptions::new(param, seed);
            opts.lr = match (lr, grid) {
                (Some(lr), _) => Some(LrChoice::Fixed(lr)),
                (None, true) => Some(LrChoice::Grid(crate::optim::LR_GRID.to_vec())),
                (None, false) => None,
            };
            opts.out = out;
            opts.epochs = epochs;
            if let Some(d) = data_dir {
                opts.data_dir = d;
            }
            let cfg = preset(base, &opts)?;
            if print {
                print!("{}", cfg.to_text());
            } else {
                report_run(&run(&cfg, workers.threads())?);
            }
            Ok(0)
        }
        Command::Gradcheck { seed } => {
            let mut all = true;
            for (name, r) in gradient_integrity(seed)? {
                all &= r.passed;
                println!(
                    "{} {name}: max relative error {:.3e} over {} entries (tol {:.0e})",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.max_rel_error,
                    r.entries_checked,
                    r.tolerance
                );
            }
            Ok(if all { 0 } else { EXIT_FAILURE })
        }
        Command::PerturbDemo { out } => {
            let rows = perturbation_demo(&PERTURB_EPSILONS)?;
            match out {
                Some(path) => write_perturb_csv(&path, &rows)?,
                None => write_perturb(std::io::stdout().lock(), "<stdout>", &rows)?,
            }
            Ok(0)
        }
    }
}

fn report_run(summary: &RunSummary) {
    let stats = summary
        .mean_std()
        .map_or_else(|| "no finite result".to_string(), |(m, s)| format!("test metric {m:.4} ± {s:.4}"));
    println!(
        "{}: lr {} for {} epochs over {} split(s), {stats}",
        summary.out_dir.display(),
        summary.lr,
        summary.epochs,
        summary.splits.len()
    );
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
