//! The pipeline commands. Each takes a fully resolved config and an output
//! directory; all inputs are read and all results computed before the first
//! file is written.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fodfnet_core::csd::{estimate_response_from_fa, CsdModel, CsdParams};
use fodfnet_core::dataset::{
    assemble_dataset, assemble_patches, fit_sh_volume, normalize_by_b0, TrainingSample, DEFAULT_SHELL_TOLERANCE,
    NOISY_FIT_REGULARIZATION,
};
use fodfnet_core::metrics::{evaluate, MethodInput};
use fodfnet_core::models::{
    split_indices, train_with_progress, Architecture, EpochRecord, LossWeights, Model, PredictedVolumes, Prediction,
    TrainConfig, TrainLog, Workspace,
};
use fodfnet_core::phantom::{default_scheme, generate_volume, noise_seed, PhantomSpec, Zone};
use fodfnet_core::sh::BASIS_CONVENTION;
use fodfnet_core::sphere::SphereGrid;
use fodfnet_core::{Mask, Volume4D};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::DatasetVolumes;
use crate::error::{CliError, CliResult};
use crate::files::{read_text, sha256_hex, to_json, write_bytes, Dtype};
use crate::gradients::{format_gradient_table, parse_gradient_table};
use crate::manifest::{hash_inputs, FileRecord, RunManifest, RUN_MANIFEST_FILE};
use crate::model_io::{encode_model, load_model};
use crate::nifti::{self, DataType, Endian};
use crate::report;

/// A command with its resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", content = "config", rename_all = "kebab-case")]
pub enum Job {
    Phantom(PhantomConfig),
    FitSh(FitShConfig),
    Train(TrainCommandConfig),
    Predict(PredictConfig),
    Csd(CsdCommandConfig),
    Eval(EvalConfig),
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Phantom(_) => "phantom",
            Job::FitSh(_) => "fit-sh",
            Job::Train(_) => "train",
            Job::Predict(_) => "predict",
            Job::Csd(_) => "csd",
            Job::Eval(_) => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub phantom: PhantomSpec,
    pub shells: Vec<f64>,
    pub dirs_per_shell: usize,
    pub b0_count: usize,
    pub dtype: Dtype,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomSpec::default(),
            shells: vec![1000.0, 2000.0, 3000.0],
            dirs_per_shell: fodfnet_core::phantom::DEFAULT_DIRS_PER_SHELL,
            b0_count: fodfnet_core::phantom::DEFAULT_B0_COUNT,
            dtype: Dtype::Float32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitShConfig {
    pub dwi: PathBuf,
    pub bvals: PathBuf,
    pub bvecs: PathBuf,
    pub mask: Option<PathBuf>,
    pub shell: f64,
    pub shell_tolerance: f64,
    pub order: usize,
    pub regularization: f64,
    pub dtype: Dtype,
}

impl Default for FitShConfig {
    fn default() -> Self {
        Self {
            dwi: PathBuf::new(),
            bvals: PathBuf::new(),
            bvecs: PathBuf::new(),
            mask: None,
            shell: 1000.0,
            shell_tolerance: DEFAULT_SHELL_TOLERANCE,
            order: 8,
            regularization: NOISY_FIT_REGULARIZATION,
            dtype: Dtype::Float32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCommandConfig {
    /// A dataset cache directory, instead of the four volumes below.
    pub dataset: Option<PathBuf>,
    pub sh: Option<PathBuf>,
    pub fodf: Option<PathBuf>,
    pub fractions: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub architecture: Architecture,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub patience: usize,
    pub validation_fraction: f64,
    pub model_dtype: Dtype,
}

impl Default for TrainCommandConfig {
    fn default() -> Self {
        let t = TrainConfig::new(Architecture::ResDnn, 0);
        Self {
            dataset: None,
            sh: None,
            fodf: None,
            fractions: None,
            mask: None,
            architecture: t.architecture,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            alpha: t.loss_weights.alpha,
            beta: t.loss_weights.beta,
            seed: t.seed,
            patience: t.patience,
            validation_fraction: 0.15,
            model_dtype: Dtype::Float64,
        }
    }
}

impl TrainCommandConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            architecture: self.architecture,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            loss_weights: LossWeights {
                alpha: self.alpha,
                beta: self.beta,
            },
            seed: self.seed,
            patience: self.patience,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    /// Model directory or its `model.json`.
    pub model: PathBuf,
    pub sh: PathBuf,
    pub mask: PathBuf,
    pub dtype: Dtype,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsdCommandConfig {
    pub dwi: PathBuf,
    pub bvals: PathBuf,
    pub bvecs: PathBuf,
    pub mask: Option<PathBuf>,
    pub shell: f64,
    pub shell_tolerance: f64,
    /// Response voxels need at least this tensor FA.
    pub fa_threshold: f64,
    pub response_voxels: usize,
    pub csd: CsdParams,
    pub dtype: Dtype,
}

impl Default for CsdCommandConfig {
    fn default() -> Self {
        Self {
            dwi: PathBuf::new(),
            bvals: PathBuf::new(),
            bvecs: PathBuf::new(),
            mask: None,
            shell: 1000.0,
            shell_tolerance: DEFAULT_SHELL_TOLERANCE,
            fa_threshold: 0.7,
            response_voxels: 300,
            csd: CsdParams::default(),
            dtype: Dtype::Float32,
        }
    }
}

/// A prediction directory holding `fodf.nii` and optionally `fractions.nii`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedPrediction {
    pub name: String,
    pub dir: PathBuf,
}

impl NamedPrediction {
    /// `name=DIR`.
    pub fn parse(s: &str) -> Option<Self> {
        let (name, dir) = s.split_once('=')?;
        (!name.is_empty() && !dir.is_empty()).then(|| Self {
            name: name.to_string(),
            dir: PathBuf::from(dir),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub truth_fodf: PathBuf,
    pub truth_fractions: PathBuf,
    pub mask: PathBuf,
    /// Zone-code volume; with `include_zones` it narrows the mask.
    pub zones: Option<PathBuf>,
    pub include_zones: Vec<Zone>,
    pub predictions: Vec<NamedPrediction>,
}

/// Files a command produced, keyed by path relative to its output directory.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, rel: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((rel.into(), bytes));
    }

    pub fn nifti(&mut self, rel: &str, vol: &Volume4D, dtype: Dtype) {
        let dt = match dtype {
            Dtype::Float32 => DataType::Float32,
            Dtype::Float64 => DataType::Float64,
        };
        self.add(rel, nifti::write_nifti(vol, dt, Endian::Little));
    }
}

/// Result of a finished command.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub manifest: RunManifest,
    /// Human-readable lines for the terminal.
    pub notes: Vec<String>,
}

/// Options that affect how, not what, a command computes.
#[derive(Default)]
pub struct RunOptions<'a> {
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}


fn require(path: &Path, key: &str) -> CliResult<()> {
    if path.as_os_str().is_empty() {
        return Err(CliError::config(format!("`{key}` is required")));
    }
    Ok(())
}

fn require_opt<'a>(path: &'a Option<PathBuf>, key: &str) -> CliResult<&'a Path> {
    match path {
        Some(p) if !p.as_os_str().is_empty() => Ok(p),
        _ => Err(CliError::config(format!("`{key}` is required"))),
    }
}

pub fn load_volume(path: &Path) -> CliResult<Volume4D> {
    nifti::load(path).map(|img| img.volume).map_err(|e| CliError::from(e).at(path))
}

pub fn load_mask(path: &Path, dims: [usize; 3]) -> CliResult<Mask> {
    let vol = load_volume(path)?;
    if vol.n_volumes() != 1 || vol.spatial_dims() != dims {
        return Err(CliError::input(
            "shape_mismatch",
            format!("mask has dims {:?}, expected {dims:?} with one volume", vol.dims()),
        )
        .at(path));
    }
    Ok(Mask::from_volume(&vol))
}

fn check_dims(path: &Path, vol: &Volume4D, dims: [usize; 3]) -> CliResult<()> {
    if vol.spatial_dims() != dims {
        return Err(CliError::input(
            "shape_mismatch",
            format!("spatial dims {:?} differ from {dims:?}", vol.spatial_dims()),
        )
        .at(path));
    }
    Ok(())
}

fn load_scheme(bvals: &Path, bvecs: &Path, tolerance: f64) -> CliResult<fodfnet_core::dataset::GradientScheme> {
    let (bv, bc) = (read_text(bvals)?, read_text(bvecs)?);
    parse_gradient_table(&bv, &bc, tolerance).map_err(|e| CliError::input("gradient_table", e.to_string()).at(bvals))
}

fn check_tolerance(t: f64) -> CliResult<()> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(CliError::config(format!("shell_tolerance must be non-negative, got {t}")));
    }
    Ok(())
}

fn sh_mean_b(scheme: &fodfnet_core::dataset::GradientScheme, rows: &[usize]) -> f64 {
    rows.iter().map(|&r| scheme.bvals()[r]).sum::<f64>() / rows.len() as f64
}

/// Run `job`, writing its outputs and `manifest.json` under `out`.
pub fn execute(job: &Job, out: &Path, opts: RunOptions<'_>) -> CliResult<RunSummary> {
    let (outputs, inputs, seeds, notes) = match job {
        Job::Phantom(c) => run_phantom(c)?,
        Job::FitSh(c) => run_fit_sh(c)?,
        Job::Train(c) => run_train(c, opts)?,
        Job::Predict(c) => run_predict(c)?,
        Job::Csd(c) => run_csd(c)?,
        Job::Eval(c) => run_eval(c)?,
    };
    let input_paths: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let input_records = hash_inputs(&input_paths)?;
    let manifest = commit(out, job, outputs, input_records, seeds)?;
    Ok(RunSummary {
        out_dir: out.to_path_buf(),
        manifest,
        notes,
    })
}

type Computed = (Outputs, Vec<PathBuf>, BTreeMap<String, u64>, Vec<String>);

fn commit(
    out: &Path,
    job: &Job,
    outputs: Outputs,
    inputs: Vec<FileRecord>,
    seeds: BTreeMap<String, u64>,
) -> CliResult<RunManifest> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let input_canon: Vec<PathBuf> = inputs.iter().filter_map(|r| fs::canonicalize(&r.path).ok()).collect();
    for (rel, _) in &outputs.files {
        let target = out.join(rel);
        if let Ok(c) = fs::canonicalize(&target) {
            if input_canon.contains(&c) {
                return Err(CliError::config(format!(
                    "output {} would overwrite an input; choose another output directory",
                    target.display()
                )));
            }
        }
    }
    let mut records = Vec::with_capacity(outputs.files.len());
    for (rel, bytes) in &outputs.files {
        write_bytes(&out.join(rel), bytes)?;
        records.push(FileRecord {
            path: rel.clone(),
            sha256: sha256_hex(bytes),
        });
    }
    records.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = RunManifest {
        tool: "fodfnet".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        job: job.clone(),
        seeds,
        inputs,
        outputs: records,
    };
    write_bytes(&out.join(RUN_MANIFEST_FILE), to_json(&manifest).as_bytes())?;
    Ok(manifest)
}

fn run_phantom(c: &PhantomConfig) -> CliResult<Computed> {
    if c.shells.is_empty() || c.shells.iter().any(|b| !(b.is_finite() && *b > DEFAULT_SHELL_TOLERANCE)) {
        return Err(CliError::config(format!(
            "shells must be non-empty and above {DEFAULT_SHELL_TOLERANCE} s/mm^2, got {:?}",
            c.shells
        )));
    }
    if c.dirs_per_shell == 0 || c.b0_count == 0 {
        return Err(CliError::config("dirs_per_shell and b0_count must be positive"));
    }
    let scheme = default_scheme(&c.shells, c.dirs_per_shell, c.b0_count);
    let ph = generate_volume(&c.phantom, &scheme)?;
    let mut out = Outputs::default();
    out.nifti("dwi.nii", &ph.dwi, c.dtype);
    let (bvals, bvecs) = format_gradient_table(&scheme);
    out.add("dwi.bval", bvals.into_bytes());
    out.add("dwi.bvec", bvecs.into_bytes());
    out.nifti("fodf.nii", &ph.fodf, c.dtype);
    out.nifti("fractions.nii", &ph.fractions, c.dtype);
    out.nifti("mask.nii", &ph.mask.to_volume(ph.dwi.voxel_size()), c.dtype);
    out.nifti("zones.nii", &ph.zone_volume(), c.dtype);
    let mut seeds = BTreeMap::from([("phantom".to_string(), c.phantom.seed)]);
    if c.phantom.snr.is_some() {
        seeds.insert("noise".into(), noise_seed(c.phantom.seed));
    }
    let counts: Vec<String> = [Zone::Csf, Zone::Gm, Zone::Wm, Zone::Crossing]
        .iter()
        .map(|z| format!("{} {}", z.name(), ph.zones.iter().filter(|x| *x == z).count()))
        .collect();
    let notes = vec![format!(
        "{:?} voxels, {} volumes; zones: {}",
        c.phantom.dims,
        scheme.len(),
        counts.join(", ")
    )];
    Ok((out, vec![], seeds, notes))
}

fn run_fit_sh(c: &FitShConfig) -> CliResult<Computed> {
    require(&c.dwi, "dwi")?;
    require(&c.bvals, "bvals")?;
    require(&c.bvecs, "bvecs")?;
    check_tolerance(c.shell_tolerance)?;
    fodfnet_core::sh::check_order(c.order)?;
    if !(c.regularization.is_finite() && c.regularization >= 0.0) {
        return Err(CliError::config(format!("regularization must be non-negative, got {}", c.regularization)));
    }
    let scheme = load_scheme(&c.bvals, &c.bvecs, c.shell_tolerance)?;
    let rows = scheme.extract_shell(c.shell)?;
    if rows.iter().any(|&r| scheme.is_b0(r)) {
        return Err(CliError::config(format!("shell b={} selects b0 volumes", c.shell)));
    }
    let dwi = load_volume(&c.dwi)?;
    let norm = normalize_by_b0(&dwi, &scheme).map_err(|e| CliError::from(e).at(&c.dwi))?;
    let mut mask = norm.mask.clone();
    let mut inputs = vec![c.dwi.clone(), c.bvals.clone(), c.bvecs.clone()];
    if let Some(mp) = &c.mask {
        mask = mask.and(&load_mask(mp, dwi.spatial_dims())?)?;
        inputs.push(mp.clone());
    }
    let dw = scheme.dw_indices();
    let local: Vec<usize> = rows.iter().map(|r| dw.iter().position(|d| d == r).expect("diffusion row")).collect();
    let signal = norm.volume.select_volumes(&local)?;
    let dirs = scheme.directions(&rows)?;
    let sh = fit_sh_volume(&signal, &dirs, c.order, c.regularization, &mask)?;
    let mut out = Outputs::default();
    out.nifti("sh.nii", &sh, c.dtype);
    out.nifti("mask.nii", &mask.to_volume(dwi.voxel_size()), c.dtype);
    let notes = vec![format!(
        "fitted order-{} SH ({BASIS_CONVENTION}) to {} directions near b={} in {} voxels",
        c.order,
        rows.len(),
        sh_mean_b(&scheme, &rows),
        mask.count()
    )];
    Ok((out, inputs, BTreeMap::new(), notes))
}

/// The training volumes as the trainer sees them: rounded through the
/// float32 dataset cache, so training from NIfTI inputs or from a cache
/// directory is identical.
fn training_volumes(c: &TrainCommandConfig) -> CliResult<(DatasetVolumes, Vec<PathBuf>)> {
    let direct = [&c.sh, &c.fodf, &c.fractions, &c.mask].iter().any(|p| p.is_some());
    match (&c.dataset, direct) {
        (Some(_), true) => Err(CliError::config("give either `dataset` or the sh/fodf/fractions/mask volumes, not both")),
        (Some(dir), false) => {
            let d = DatasetVolumes::read(dir)?;
            let inputs = d.to_files().into_iter().map(|(name, _)| dir.join(name)).collect();
            Ok((d, inputs))
        }
        (None, _) => {
            let sh_path = require_opt(&c.sh, "sh")?;
            let fodf_path = require_opt(&c.fodf, "fodf")?;
            let frac_path = require_opt(&c.fractions, "fractions")?;
            let mask_path = require_opt(&c.mask, "mask")?;
            let input_sh = load_volume(sh_path)?;
            let dims = input_sh.spatial_dims();
            let target_sh = load_volume(fodf_path)?;
            check_dims(fodf_path, &target_sh, dims)?;
            let fractions = load_volume(frac_path)?;
            check_dims(frac_path, &fractions, dims)?;
            let mask = load_mask(mask_path, dims)?;
            let d = DatasetVolumes {
                input_sh,
                target_sh,
                fractions,
                mask,
                seed: Some(c.seed),
            };
            let files = d.to_files();
            let d = DatasetVolumes::from_files(Path::new("dataset"), |name| {
                Ok(files.iter().find(|(n, _)| n == name).expect("encoded file").1.clone())
            })?;
            let inputs = vec![sh_path, fodf_path, frac_path, mask_path].into_iter().map(Path::to_path_buf).collect();
            Ok((d, inputs))
        }
    }
}

fn train_on<S: TrainingSample>(
    cfg: &TrainConfig,
    all: Vec<S>,
    validation_fraction: f64,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> CliResult<(Model, TrainLog, usize, usize)> {
    let (tr, va) = split_indices(all.len(), validation_fraction, cfg.seed);
    let mut slots: Vec<Option<S>> = all.into_iter().map(Some).collect();
    let train_set: Vec<S> = tr.iter().map(|&i| slots[i].take().expect("index used once")).collect();
    let val_set: Vec<S> = va.iter().map(|&i| slots[i].take().expect("index used once")).collect();
    if train_set.is_empty() || val_set.is_empty() {
        return Err(CliError::input(
            "empty",
            format!(
                "split of {} samples leaves {} for training and {} for validation",
                tr.len() + va.len(),
                train_set.len(),
                val_set.len()
            ),
        ));
    }
    let (model, log) = train_with_progress(cfg, &train_set, &val_set, |r| on_epoch(r))?;
    Ok((model, log, train_set.len(), val_set.len()))
}

#[derive(Serialize)]
struct TrainLogFile<'a> {
    architecture: Architecture,
    train_samples: usize,
    validation_samples: usize,
    #[serde(flatten)]
    log: &'a TrainLog,
}

fn run_train(c: &TrainCommandConfig, opts: RunOptions<'_>) -> CliResult<Computed> {
    let cfg = c.train_config();
    cfg.validate()?;
    if !(c.validation_fraction > 0.0 && c.validation_fraction < 1.0) {
        return Err(CliError::config(format!(
            "validation_fraction must lie in (0, 1), got {}",
            c.validation_fraction
        )));
    }
    let (data, inputs) = training_volumes(c)?;
    let mut noop = |_: &EpochRecord| {};
    let on_epoch: &mut dyn FnMut(&EpochRecord) = match opts.on_epoch {
        Some(f) => f,
        None => &mut noop,
    };
    let (model, log, n_train, n_val) = match c.architecture {
        Architecture::ResDnn => train_on(
            &cfg,
            assemble_dataset(&data.input_sh, &data.target_sh, &data.fractions, &data.mask)?,
            c.validation_fraction,
            on_epoch,
        )?,
        Architecture::ResCnn => train_on(
            &cfg,
            assemble_patches(&data.input_sh, &data.target_sh, &data.fractions, &data.mask)?,
            c.validation_fraction,
            on_epoch,
        )?,
    };
    let mut out = Outputs::default();
    let (manifest, payload) = encode_model(&model, Some(&cfg), c.model_dtype);
    out.add("model.json", manifest.into_bytes());
    out.add("model.bin", payload);
    let mut csv = String::from("epoch,train_loss,validation_loss\n");
    for r in &log.epochs {
        csv.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.validation_loss));
    }
    out.add("train_log.csv", csv.into_bytes());
    let log_file = TrainLogFile {
        architecture: c.architecture,
        train_samples: n_train,
        validation_samples: n_val,
        log: &log,
    };
    out.add("train_log.json", to_json(&log_file).into_bytes());
    for (name, bytes) in data.to_files() {
        out.add(format!("dataset/{name}"), bytes);
    }
    let best = log
        .best()
        .map(|b| format!("best validation loss {:.6e} at epoch {}", b.validation_loss, b.epoch))
        .unwrap_or_else(|| "no epochs run; parameters are the initialization".into());
    let notes = vec![format!(
        "{} trained on {n_train} samples ({n_val} validation) for {} epochs; {best}",
        c.architecture.name(),
        log.epochs.len()
    )];
    Ok((out, inputs, BTreeMap::from([("train".to_string(), c.seed)]), notes))
}

/// Voxel-parallel prediction. Each voxel is computed independently, so the
/// result does not depend on the thread count.
pub fn predict_parallel(model: &Model, input_sh: &Volume4D, mask: &Mask) -> CliResult<PredictedVolumes> {
    fodfnet_core::models::check_prediction_input(input_sh, mask)?;
    let idx = mask.indices();
    let preds: Vec<Prediction> = idx
        .par_iter()
        .map_init(
            || Workspace::new(model.architecture()),
            |ws, &v| model.predict_with(&model.voxel_input(input_sh, v), ws),
        )
        .collect::<Result<_, _>>()?;
    let mut out = PredictedVolumes::zeros(mask.dims(), input_sh.voxel_size())?;
    for (v, p) in idx.iter().zip(&preds) {
        if !p.is_finite() {
            return Err(CliError::new(
                crate::error::Category::Numerical,
                "non_finite_prediction",
                format!("prediction at voxel {:?} is not finite", mask.coords(*v)),
            ));
        }
        out.set(*v, p);
    }
    Ok(out)
}

fn run_predict(c: &PredictConfig) -> CliResult<Computed> {
    require(&c.model, "model")?;
    require(&c.sh, "sh")?;
    require(&c.mask, "mask")?;
    let (model, _) = load_model(&c.model)?;
    let sh = load_volume(&c.sh)?;
    let mask = load_mask(&c.mask, sh.spatial_dims())?;
    let pred = predict_parallel(&model, &sh, &mask)?;
    let mut out = Outputs::default();
    out.nifti("fodf.nii", &pred.fodf, c.dtype);
    out.nifti("fractions.nii", &pred.fractions, c.dtype);
    out.nifti("fractions_raw.nii", &pred.fractions_raw, c.dtype);
    let model_files = if c.model.is_dir() {
        vec![c.model.join("model.json"), c.model.join("model.bin")]
    } else {
        let parent = c.model.parent().unwrap_or(Path::new(""));
        vec![c.model.clone(), parent.join("model.bin")]
    };
    let mut inputs = model_files;
    inputs.push(c.sh.clone());
    inputs.push(c.mask.clone());
    let notes = vec![format!("{} predicted {} voxels", model.architecture().name(), mask.count())];
    Ok((out, inputs, BTreeMap::new(), notes))
}

#[derive(Serialize)]
struct ResponseFile {
    sh_convention: &'static str,
    bval: f64,
    orders: [usize; 5],
    coefficients: [f64; 5],
    voxels: usize,
    fa_threshold: f64,
    nonaxial_energy: f64,
}

#[derive(Serialize)]
struct CsdFitSummary {
    voxels: usize,
    unconverged: usize,
    params: CsdParams,
}

fn run_csd(c: &CsdCommandConfig) -> CliResult<Computed> {
    require(&c.dwi, "dwi")?;
    require(&c.bvals, "bvals")?;
    require(&c.bvecs, "bvecs")?;
    check_tolerance(c.shell_tolerance)?;
    if !(c.fa_threshold >= 0.0 && c.fa_threshold < 1.0) || c.response_voxels == 0 {
        return Err(CliError::config("fa_threshold must lie in [0, 1) and response_voxels be positive"));
    }
    if !(c.csd.tau.is_finite() && c.csd.tau >= 0.0) || c.csd.max_iter == 0 {
        return Err(CliError::config("csd.tau must be non-negative and csd.max_iter positive"));
    }
    let scheme = load_scheme(&c.bvals, &c.bvecs, c.shell_tolerance)?;
    let rows = scheme.extract_shell(c.shell)?;
    if rows.iter().any(|&r| scheme.is_b0(r)) {
        return Err(CliError::config(format!("shell b={} selects b0 volumes", c.shell)));
    }
    let dwi = load_volume(&c.dwi)?;
    let norm = normalize_by_b0(&dwi, &scheme).map_err(|e| CliError::from(e).at(&c.dwi))?;
    let mut mask = norm.mask.clone();
    let mut inputs = vec![c.dwi.clone(), c.bvals.clone(), c.bvecs.clone()];
    if let Some(mp) = &c.mask {
        mask = mask.and(&load_mask(mp, dwi.spatial_dims())?)?;
        inputs.push(mp.clone());
    }
    let dw = scheme.dw_indices();
    let local: Vec<usize> = rows.iter().map(|r| dw.iter().position(|d| d == r).expect("diffusion row")).collect();
    let signal = norm.volume.select_volumes(&local)?;
    let dirs = scheme.directions(&rows)?;
    let bval = sh_mean_b(&scheme, &rows);
    let est = estimate_response_from_fa(&signal, &dirs, bval, &mask, c.fa_threshold, c.response_voxels)?;
    let model = CsdModel::new(&est.response, &dirs, &SphereGrid::default_constraint_grid(), c.csd)?;
    let idx = mask.indices();
    let fits = idx
        .par_iter()
        .map(|&v| model.fit(&signal.series(v)))
        .collect::<Result<Vec<_>, _>>()?;
    let [nx, ny, nz] = mask.dims();
    let mut fodf = Volume4D::zeros([nx, ny, nz, 45], dwi.voxel_size())?;
    let mut unconverged = 0;
    for (&v, fit) in idx.iter().zip(&fits) {
        fodf.set_series(v, fit.coefficients.as_slice());
        unconverged += usize::from(!fit.converged);
    }
    let mut out = Outputs::default();
    out.nifti("fodf.nii", &fodf, c.dtype);
    let response = ResponseFile {
        sh_convention: BASIS_CONVENTION,
        bval,
        orders: [0, 2, 4, 6, 8],
        coefficients: *est.response.coefficients(),
        voxels: est.n_voxels,
        fa_threshold: c.fa_threshold,
        nonaxial_energy: est.nonaxial_energy,
    };
    out.add("response.json", to_json(&response).into_bytes());
    let summary = CsdFitSummary {
        voxels: idx.len(),
        unconverged,
        params: c.csd,
    };
    out.add("fit_summary.json", to_json(&summary).into_bytes());
    let notes = vec![format!(
        "response from {} voxels; deconvolved {} voxels, {unconverged} hit max_iter",
        est.n_voxels,
        idx.len()
    )];
    Ok((out, inputs, BTreeMap::new(), notes))
}

fn run_eval(c: &EvalConfig) -> CliResult<Computed> {
    require(&c.truth_fodf, "truth_fodf")?;
    require(&c.truth_fractions, "truth_fractions")?;
    require(&c.mask, "mask")?;
    if c.predictions.is_empty() {
        return Err(CliError::config("at least one prediction set is required"));
    }
    for (i, p) in c.predictions.iter().enumerate() {
        let valid = !p.name.is_empty() && p.name.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_' || ch == '-');
        if !valid {
            return Err(CliError::config(format!(
                "prediction name {:?} must be non-empty ASCII letters, digits, '-' or '_'",
                p.name
            )));
        }
        if c.predictions[..i].iter().any(|q| q.name == p.name) {
            return Err(CliError::config(format!("prediction name {:?} is used twice", p.name)));
        }
    }
    if !c.include_zones.is_empty() && c.zones.is_none() {
        return Err(CliError::config("include_zones needs a zones volume"));
    }
    let truth = load_volume(&c.truth_fodf)?;
    let dims = truth.spatial_dims();
    let truth_fr = load_volume(&c.truth_fractions)?;
    check_dims(&c.truth_fractions, &truth_fr, dims)?;
    let mut mask = load_mask(&c.mask, dims)?;
    let mut inputs = vec![c.truth_fodf.clone(), c.truth_fractions.clone(), c.mask.clone()];
    if let Some(zp) = &c.zones {
        let zv = load_volume(zp)?;
        if zv.n_volumes() != 1 {
            return Err(CliError::input("shape_mismatch", "zones volume must have one volume").at(zp));
        }
        check_dims(zp, &zv, dims)?;
        inputs.push(zp.clone());
        if !c.include_zones.is_empty() {
            for v in 0..mask.as_slice().len() {
                let code = zv.data()[v];
                let keep = code >= 0.0
                    && code.fract() == 0.0
                    && Zone::from_code(code as u8).is_some_and(|z| c.include_zones.contains(&z));
                if !keep {
                    mask.set(v, false);
                }
            }
        }
    }
    if mask.count() == 0 {
        return Err(CliError::input("empty_mask", "no voxels left to evaluate"));
    }
    let mut loaded = Vec::with_capacity(c.predictions.len());
    for p in &c.predictions {
        let fp = p.dir.join("fodf.nii");
        let fodf = load_volume(&fp)?;
        check_dims(&fp, &fodf, dims)?;
        inputs.push(fp);
        let frp = p.dir.join("fractions.nii");
        let fractions = if frp.is_file() {
            let f = load_volume(&frp)?;
            check_dims(&frp, &f, dims)?;
            inputs.push(frp);
            Some(f)
        } else {
            None
        };
        loaded.push((p.name.as_str(), fodf, fractions));
    }
    let methods: Vec<MethodInput<'_>> = loaded
        .iter()
        .map(|(name, fodf, fr)| MethodInput {
            name,
            fodf,
            fractions: fr.as_ref(),
        })
        .collect();
    let rep = evaluate(&methods, &truth, &truth_fr, &mask)?;
    let mut out = Outputs::default();
    out.add("metrics.csv", report::metrics_csv(&rep).into_bytes());
    out.add("acc_hist.csv", report::histogram_csv(&rep.methods).into_bytes());
    out.add("comparisons.csv", report::comparisons_csv(&rep).into_bytes());
    out.add("summary.json", to_json(&report::summary(&rep, &mask)).into_bytes());
    for (name, bytes) in report::maps(&rep, &mask) {
        out.add(format!("maps/{name}"), bytes);
    }
    let notes = rep
        .methods
        .iter()
        .map(|m| {
            format!(
                "{}: median ACC {:.4}, mean ACC {:.4} over {} voxels ({} undefined)",
                m.name, m.acc_summary.median, m.acc_summary.mean, m.acc_summary.n, m.acc_summary.undefined
            )
        })
        .collect();
    Ok((out, inputs, BTreeMap::new(), notes))
}

/// Re-run the job recorded in a run manifest after checking that its inputs
/// are unchanged. Returns the new run and the outputs whose hashes differ.
pub fn rerun(manifest_path: &Path, out: &Path) -> CliResult<(RunSummary, Vec<String>)> {
    let recorded = RunManifest::read(manifest_path)?;
    recorded.verify_inputs()?;
    let summary = execute(&recorded.job, out, RunOptions::default())?;
    let mut differing = Vec::new();
    for rec in &recorded.outputs {
        if summary.manifest.output(&rec.path) != Some(rec) {
            differing.push(rec.path.clone());
        }
    }
    for rec in &summary.manifest.outputs {
        if recorded.output(&rec.path).is_none() {
            differing.push(rec.path.clone());
        }
    }
    Ok((summary, differing))
}
