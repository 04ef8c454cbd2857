//! Argument parsing. Each subcommand takes an optional `--config` JSON file
//! holding its config object; flags given on the command line replace the
//! matching config keys, and keys absent from both take their defaults.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fodfnet_core::models::{Architecture, EpochRecord};
use fodfnet_core::phantom::Zone;
use serde::de::DeserializeOwned;

use crate::commands::{
    execute, rerun, CsdCommandConfig, EvalConfig, FitShConfig, Job, NamedPrediction, PhantomConfig, PredictConfig,
    RunOptions, RunSummary, TrainCommandConfig,
};
use crate::error::{CliError, CliResult};
use crate::files::{read_text, Dtype};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "FODFNET_THREADS";

#[derive(Debug, Parser)]
#[command(name = "fodfnet", version, about = "Multi-tissue fODF estimation from single-shell diffusion MRI")]
pub struct Cli {
    /// Print nothing but errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a multi-tissue phantom with its ground truth.
    Phantom(PhantomArgs),
    /// Fit order-8 SH to one shell of a DWI volume.
    FitSh(FitShArgs),
    /// Train a ResDNN or ResCNN.
    Train(TrainArgs),
    /// Predict fODFs and tissue fractions with a trained model.
    Predict(PredictArgs),
    /// Single-shell constrained spherical deconvolution baseline.
    Csd(CsdArgs),
    /// Compare prediction sets against ground truth.
    Eval(EvalArgs),
    /// Run the job recorded in a manifest again and compare output hashes.
    Rerun(RerunArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Output directory.
    #[arg(long, short)]
    pub out: PathBuf,
    /// JSON config file; flags take precedence over its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn parse_dtype(s: &str) -> Result<Dtype, String> {
    Dtype::parse(s).ok_or_else(|| format!("unknown dtype {s:?}; use float32 or float64"))
}

fn parse_arch(s: &str) -> Result<Architecture, String> {
    Architecture::parse(s).ok_or_else(|| format!("unknown architecture {s:?}; use resdnn or rescnn"))
}

fn parse_zone(s: &str) -> Result<Zone, String> {
    [Zone::Csf, Zone::Gm, Zone::Wm, Zone::Crossing]
        .into_iter()
        .find(|z| z.name() == s)
        .ok_or_else(|| format!("unknown zone {s:?}; use csf, gm, wm or crossing"))
}

fn parse_prediction(s: &str) -> Result<NamedPrediction, String> {
    NamedPrediction::parse(s).ok_or_else(|| format!("expected NAME=DIR, got {s:?}"))
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Grid size along x, y and z.
    #[arg(long, num_args = 3, value_names = ["NX", "NY", "NZ"])]
    pub dims: Option<Vec<usize>>,
    /// Signal-to-noise ratio of the b0 signal.
    #[arg(long, conflicts_with = "noiseless")]
    pub snr: Option<f64>,
    #[arg(long)]
    pub noiseless: bool,
    /// b-values of the diffusion shells, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub shells: Option<Vec<f64>>,
    #[arg(long)]
    pub dirs_per_shell: Option<usize>,
    #[arg(long)]
    pub b0_count: Option<usize>,
    #[arg(long, value_parser = parse_dtype)]
    pub dtype: Option<Dtype>,
}

#[derive(Debug, Args)]
pub struct FitShArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub dwi: Option<PathBuf>,
    #[arg(long)]
    pub bvals: Option<PathBuf>,
    #[arg(long)]
    pub bvecs: Option<PathBuf>,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// b-value of the shell to fit.
    #[arg(long)]
    pub shell: Option<f64>,
    #[arg(long)]
    pub shell_tolerance: Option<f64>,
    #[arg(long)]
    pub order: Option<usize>,
    #[arg(long)]
    pub regularization: Option<f64>,
    #[arg(long, value_parser = parse_dtype)]
    pub dtype: Option<Dtype>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset cache directory written by an earlier `train`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Input SH volume.
    #[arg(long)]
    pub sh: Option<PathBuf>,
    /// Target fODF SH volume.
    #[arg(long)]
    pub fodf: Option<PathBuf>,
    /// Target CSF, GM, WM fractions.
    #[arg(long)]
    pub fractions: Option<PathBuf>,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, value_parser = parse_arch)]
    pub architecture: Option<Architecture>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Weight of the fODF term of the loss.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Weight of the fraction term of the loss.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    #[arg(long, value_parser = parse_dtype)]
    pub model_dtype: Option<Dtype>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: Common,
    /// Model directory or its model.json.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub sh: Option<PathBuf>,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, value_parser = parse_dtype)]
    pub dtype: Option<Dtype>,
}

#[derive(Debug, Args)]
pub struct CsdArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub dwi: Option<PathBuf>,
    #[arg(long)]
    pub bvals: Option<PathBuf>,
    #[arg(long)]
    pub bvecs: Option<PathBuf>,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub shell: Option<f64>,
    #[arg(long)]
    pub shell_tolerance: Option<f64>,
    #[arg(long)]
    pub fa_threshold: Option<f64>,
    #[arg(long)]
    pub response_voxels: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long, value_parser = parse_dtype)]
    pub dtype: Option<Dtype>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub truth_fodf: Option<PathBuf>,
    #[arg(long)]
    pub truth_fractions: Option<PathBuf>,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Zone-code volume written by `phantom`.
    #[arg(long)]
    pub zones: Option<PathBuf>,
    /// Restrict evaluation to these zones, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_zone)]
    pub include_zones: Option<Vec<Zone>>,
    /// Prediction set as NAME=DIR; repeat for several. Replaces the config list.
    #[arg(long = "prediction", value_parser = parse_prediction)]
    pub predictions: Vec<NamedPrediction>,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    /// manifest.json of an earlier run.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = read_text(p)?;
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

/// Merge flags into the config file contents.
pub fn resolve(command: Command) -> CliResult<(Job, PathBuf)> {
    Ok(match command {
        Command::Phantom(a) => {
            let mut c: PhantomConfig = load_config(a.common.config.as_deref())?;
            set(&mut c.phantom.seed, a.seed);
            if let Some(d) = a.dims {
                c.phantom.dims = [d[0], d[1], d[2]];
            }
            if a.noiseless {
                c.phantom.snr = None;
            }
            set_opt(&mut c.phantom.snr, a.snr);
            set(&mut c.shells, a.shells);
            set(&mut c.dirs_per_shell, a.dirs_per_shell);
            set(&mut c.b0_count, a.b0_count);
            set(&mut c.dtype, a.dtype);
            (Job::Phantom(c), a.common.out)
        }
        Command::FitSh(a) => {
            let mut c: FitShConfig = load_config(a.common.config.as_deref())?;
            set(&mut c.dwi, a.dwi);
            set(&mut c.bvals, a.bvals);
            set(&mut c.bvecs, a.bvecs);
            set_opt(&mut c.mask, a.mask);
            set(&mut c.shell, a.shell);
            set(&mut c.shell_tolerance, a.shell_tolerance);
            set(&mut c.order, a.order);
            set(&mut c.regularization, a.regularization);
            set(&mut c.dtype, a.dtype);
            (Job::FitSh(c), a.common.out)
        }
        Command::Train(a) => {
            let mut c: TrainCommandConfig = load_config(a.common.config.as_deref())?;
            set_opt(&mut c.dataset, a.dataset);
            set_opt(&mut c.sh, a.sh);
            set_opt(&mut c.fodf, a.fodf);
            set_opt(&mut c.fractions, a.fractions);
            set_opt(&mut c.mask, a.mask);
            set(&mut c.architecture, a.architecture);
            set(&mut c.epochs, a.epochs);
            set(&mut c.batch_size, a.batch_size);
            set(&mut c.learning_rate, a.learning_rate);
            set(&mut c.alpha, a.alpha);
            set(&mut c.beta, a.beta);
            set(&mut c.seed, a.seed);
            set(&mut c.patience, a.patience);
            set(&mut c.validation_fraction, a.validation_fraction);
            set(&mut c.model_dtype, a.model_dtype);
            (Job::Train(c), a.common.out)
        }
        Command::Predict(a) => {
            let mut c: PredictConfig = load_config(a.common.config.as_deref())?;
            set(&mut c.model, a.model);
            set(&mut c.sh, a.sh);
            set(&mut c.mask, a.mask);
            set(&mut c.dtype, a.dtype);
            (Job::Predict(c), a.common.out)
        }
        Command::Csd(a) => {
            let mut c: CsdCommandConfig = load_config(a.common.config.as_deref())?;
            set(&mut c.dwi, a.dwi);
            set(&mut c.bvals, a.bvals);
            set(&mut c.bvecs, a.bvecs);
            set_opt(&mut c.mask, a.mask);
            set(&mut c.shell, a.shell);
            set(&mut c.shell_tolerance, a.shell_tolerance);
            set(&mut c.fa_threshold, a.fa_threshold);
            set(&mut c.response_voxels, a.response_voxels);
            set(&mut c.csd.lambda, a.lambda);
            set(&mut c.csd.tau, a.tau);
            set(&mut c.csd.max_iter, a.max_iter);
            set(&mut c.dtype, a.dtype);
            (Job::Csd(c), a.common.out)
        }
        Command::Eval(a) => {
            let mut c: EvalConfig = load_config(a.common.config.as_deref())?;
            set(&mut c.truth_fodf, a.truth_fodf);
            set(&mut c.truth_fractions, a.truth_fractions);
            set(&mut c.mask, a.mask);
            set_opt(&mut c.zones, a.zones);
            set(&mut c.include_zones, a.include_zones);
            if !a.predictions.is_empty() {
                c.predictions = a.predictions;
            }
            (Job::Eval(c), a.common.out)
        }
        Command::Rerun(_) => unreachable!("rerun carries no job"),
    })
}

/// Size the global thread pool from the environment.
pub fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::config(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::config(format!("cannot start {n} threads: {e}")))
}

fn report(summary: &RunSummary, quiet: bool) {
    if quiet {
        return;
    }
    for note in &summary.notes {
        eprintln!("{note}");
    }
    eprintln!(
        "wrote {} files and manifest.json to {}",
        summary.manifest.outputs.len(),
        summary.out_dir.display()
    );
}

/// Run a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    let quiet = cli.quiet;
    if let Command::Rerun(a) = cli.command {
        let (summary, differing) = rerun(&a.manifest, &a.out)?;
        report(&summary, quiet);
        if !differing.is_empty() {
            return Err(CliError::new(
                crate::error::Category::Numerical,
                "not_reproduced",
                format!("outputs differ from the recorded run: {}", differing.join(", ")),
            ));
        }
        if !quiet {
            eprintln!("all {} output hashes match", summary.manifest.outputs.len());
        }
        return Ok(());
    }
    let (job, out) = resolve(cli.command)?;
    let mut progress = |r: &EpochRecord| {
        eprintln!(
            "epoch {:>4}  train {:.6e}  validation {:.6e}",
            r.epoch, r.train_loss, r.validation_loss
        )
    };
    let opts = RunOptions {
        on_epoch: (!quiet).then_some(&mut progress as &mut dyn FnMut(&EpochRecord)),
    };
    let summary = execute(&job, &out, opts)?;
    report(&summary, quiet);
    Ok(())
}

pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                print!("{e}");
                return 0;
            }
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", CliError::new(crate::error::Category::Config, "usage", first));
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
