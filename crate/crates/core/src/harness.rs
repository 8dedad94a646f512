//! Config-driven experiment runner.
//!
//! An [`ExperimentConfig`] (TOML, with a JSON alternative) names a dataset,
//! a band selection, a model, and the full training recipe: sampler,
//! re-weighting, loss, learning-rate schedule, weight averaging, and
//! optional GAN-based class balancing. [`run_experiment`] wires the modules
//! together into a deterministic loop and writes a [`RunArtifact`] that
//! echoes the config verbatim next to its metrics, per-epoch trace, and
//! checkpoints. [`emit_report`] turns a set of artifacts into CSV/markdown
//! tables and scatter data; [`verify_reference_tables`] cross-checks the
//! metric implementations against a bundled reference table.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    augment_standard, class_histogram, compose_dataset, make_synthetic_imbalanced, normalize,
    AugmentConfig, BandTriple, ClassHistogram, Dataset, NormalizationStats, Split, SyntheticSpec,
};
use crate::gan::{balance_with_gan, load_generator, Generator};
use crate::losses::{
    batch_loss_with_grad, drw_class_weights, ldam_margins, BatchLoss, DrwConfig, LdamConfig, LossKind,
};
use crate::metrics::{balanced_accuracy, confusion_matrix, intra_class_variance, MetricsReport};
use crate::model::{
    build_reference_cnn, compound_scaling, predict, save_checkpoint, ClassifierModel, ModelKind,
    ReferenceCnn, ReferenceCnnConfig, ScalingConfig,
};
use crate::nn::{self, Adam, Sgd};
use crate::parallel::{self, ExecMode};
use crate::sampling::{
    effective_number_class_weights, inverse_frequency_class_weights, oversample_indices,
    undersample_indices, weighted_sampler, ClassWeights, ReweightKind, SamplerKind,
};
use crate::schedule::{
    recalibrate_running_stats, swa_capture_points, swa_update, ClrConfig, LrSchedule, SwaState,
};
use crate::{child_seed, seeds, Error, Result};

/// Numeric-kernel execution mode. Both settings produce bit-identical
/// results here (parallel work is chunked and merged in a fixed order);
/// `reproducible` additionally forces sequential kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecModeKind {
    #[default]
    Fast,
    Reproducible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DatasetSection {
    /// Manifest of a saved dataset with train and validation splits.
    pub path: Option<PathBuf>,
    pub synthetic: Option<SyntheticSection>,
}

/// In-memory imbalanced synthetic data, sized per split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSection {
    pub priors: Vec<f64>,
    pub size: usize,
    pub val_size: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection {
            priors: vec![0.6, 0.15, 0.15, 0.1],
            size: 8000,
            val_size: 2000,
            channels: 10,
            height: 65,
            width: 65,
            noise_sigma: 0.5,
        }
    }
}

/// Deferred re-weighting: uniform class weights until `start_epoch`, then
/// effective-number (or inverse-frequency) weights plus a 10x learning-rate
/// drop for the remaining epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DrwSection {
    pub enabled: bool,
    pub start_epoch: usize,
    pub beta: f64,
    pub inverse_frequency: bool,
}

impl Default for DrwSection {
    fn default() -> Self {
        DrwSection { enabled: false, start_epoch: 20, beta: 0.9999, inverse_frequency: false }
    }
}

impl DrwSection {
    fn to_config(self) -> DrwConfig {
        DrwConfig {
            start_epoch: self.start_epoch,
            beta: self.beta,
            inverse_frequency: self.inverse_frequency,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrKind {
    #[default]
    Constant,
    Clr,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSection {
    pub kind: LrKind,
    /// Constant learning rate when `kind = "constant"`.
    pub value: f64,
    pub clr: ClrConfig,
}

impl Default for LrSection {
    fn default() -> Self {
        LrSection { kind: LrKind::Constant, value: 1e-3, clr: ClrConfig::default() }
    }
}

impl LrSection {
    pub fn to_schedule(self) -> LrSchedule {
        match self.kind {
            LrKind::Constant => LrSchedule::Constant(self.value),
            LrKind::Clr => LrSchedule::Clr(self.clr),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwaSection {
    pub enabled: bool,
    pub start_epoch: usize,
    /// Epochs between weight snapshots.
    pub cycle: usize,
}

impl Default for SwaSection {
    fn default() -> Self {
        SwaSection { enabled: false, start_epoch: 22, cycle: 1 }
    }
}

/// Model choice plus compound-scaling knobs. `depth`/`width`/`resolution`
/// are direct multipliers; when `phi` is nonzero the (alpha, beta, gamma)
/// exponentials multiply on top of them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub depth: f64,
    pub width: f64,
    pub resolution: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub phi: f64,
    pub base_width: usize,
    pub base_depth: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: ModelKind::ReferenceCnn,
            depth: 1.0,
            width: 1.0,
            resolution: 1.0,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            phi: 0.0,
            base_width: 16,
            base_depth: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanAugmentationSection {
    pub enabled: bool,
    pub target_per_class: usize,
    /// Directory holding `class_<j>.json` generator checkpoints.
    pub generators_dir: PathBuf,
    pub truncate_majority: bool,
}

impl Default for GanAugmentationSection {
    fn default() -> Self {
        GanAugmentationSection {
            enabled: false,
            target_per_class: 0,
            generators_dir: PathBuf::new(),
            truncate_majority: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSection {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection { kind: OptimizerKind::Adam, beta1: 0.9, beta2: 0.999 }
    }
}

/// Complete description of one training run. Every field is echoed verbatim
/// into the run artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Comma-separated band triple such as `"B6,B5,B2"`; absent trains on
    /// all bands.
    #[serde(default)]
    pub bands: Option<String>,
    #[serde(default)]
    pub mode: ExecModeKind,
    #[serde(default)]
    pub sampler: SamplerKind,
    #[serde(default)]
    pub reweight: ReweightKind,
    /// Beta for `reweight = "effective_number"`.
    #[serde(default = "default_en_beta")]
    pub effective_number_beta: f64,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub ldam: LdamConfig,
    #[serde(default)]
    pub drw: DrwSection,
    #[serde(default)]
    pub lr: LrSection,
    #[serde(default)]
    pub swa: SwaSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
    #[serde(default)]
    pub gan_augmentation: GanAugmentationSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
}

fn default_epochs() -> usize {
    30
}

fn default_batch_size() -> usize {
    32
}

fn default_en_beta() -> f64 {
    0.9999
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty()
            || !self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        {
            return Err(Error::Config(format!(
                "run_id {:?} must be non-empty and use only letters, digits, '-', '_' or '.'",
                self.run_id
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        match (&self.dataset.path, &self.dataset.synthetic) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("dataset gives both a path and a synthetic spec; pick one".into()))
            }
            (None, None) => {
                return Err(Error::Config("dataset needs either a path or a synthetic spec".into()))
            }
            _ => {}
        }
        if let Some(bands) = &self.bands {
            BandTriple::parse(bands)?;
        }
        self.lr.to_schedule().validate()?;
        if self.swa.enabled {
            if self.swa.cycle == 0 {
                return Err(Error::Config("swa.cycle must be at least 1".into()));
            }
            if self.swa.start_epoch >= self.epochs {
                return Err(Error::Config(format!(
                    "swa.start_epoch {} is past the last epoch {}; no snapshot would ever be taken",
                    self.swa.start_epoch,
                    self.epochs - 1
                )));
            }
        }
        if self.drw.enabled {
            if self.reweight != ReweightKind::None {
                return Err(Error::Config(
                    "drw and a static reweight scheme are both enabled; deferred re-weighting \
                     already controls the class weights"
                        .into(),
                ));
            }
            if self.drw.start_epoch >= self.epochs {
                return Err(Error::Config(format!(
                    "drw.start_epoch {} is past the last epoch {}; re-weighting would never activate",
                    self.drw.start_epoch,
                    self.epochs - 1
                )));
            }
        }
        if !(0.0..1.0).contains(&self.effective_number_beta) {
            return Err(Error::Config(format!(
                "effective_number_beta must lie in [0, 1), got {}",
                self.effective_number_beta
            )));
        }
        if self.gan_augmentation.enabled {
            if self.bands.is_none() {
                return Err(Error::Config(
                    "gan_augmentation needs a composed band triple; generators emit 3-channel \
                     images and cannot mix into an all-bands dataset"
                        .into(),
                ));
            }
            if self.gan_augmentation.target_per_class == 0 {
                return Err(Error::Config("gan_augmentation.target_per_class must be positive".into()));
            }
            if self.gan_augmentation.generators_dir.as_os_str().is_empty() {
                return Err(Error::Config("gan_augmentation.generators_dir is required".into()));
            }
        }
        if self.model.kind == ModelKind::External {
            return Err(Error::Config(
                "model.kind \"external\" plugs in through the library API; the bundled runner \
                 only builds \"reference_cnn\""
                    .into(),
            ));
        }
        if self.optimizer.kind == OptimizerKind::Adam {
            for (name, v) in [("beta1", self.optimizer.beta1), ("beta2", self.optimizer.beta2)] {
                if !(v > 0.0 && v < 1.0) {
                    return Err(Error::Config(format!("optimizer.{name} must lie in (0, 1), got {v}")));
                }
            }
        }
        Ok(())
    }
}

/// Reads a config file, choosing the parser by extension (`.json` for JSON,
/// TOML otherwise).
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        ExperimentConfig::from_json_str(&text)
    } else {
        ExperimentConfig::from_toml_str(&text)
    };
    parsed.map_err(|e| match e {
        Error::Config(detail) => Error::parse(path, detail),
        other => other,
    })
}

pub const SEED_ENV_VAR: &str = "SKEWKIT_SEED";

/// Applies the `SKEWKIT_SEED` environment override, returning the seed it
/// installed, if any.
pub fn apply_env_seed(config: &mut ExperimentConfig) -> Result<Option<u64>> {
    match std::env::var(SEED_ENV_VAR) {
        Ok(raw) => {
            let seed: u64 = raw.trim().parse().map_err(|_| {
                Error::Config(format!("{SEED_ENV_VAR} must be an unsigned integer, got {raw:?}"))
            })?;
            config.seed = seed;
            Ok(Some(seed))
        }
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("{SEED_ENV_VAR}: {e}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Learning rate at the epoch's final step.
    pub lr: f64,
}

/// Everything a finished run leaves behind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub config: ExperimentConfig,
    /// Averaged-weights metrics when weight averaging ran, otherwise
    /// final-weights metrics.
    pub metrics: MetricsReport,
    /// Final-weights metrics, present whenever `metrics` reports the
    /// averaged weights.
    pub final_metrics: Option<MetricsReport>,
    pub trace: Vec<EpochTrace>,
    pub wall_clock_seconds: f64,
    pub checkpoint_final: PathBuf,
    pub checkpoint_swa: Option<PathBuf>,
    pub swa_snapshots: u64,
}

pub const ARTIFACT_NAME: &str = "artifact.json";

/// Re-verifies metric consistency, then writes `artifact.json` into `dir`.
pub fn write_artifact(artifact: &RunArtifact, dir: &Path) -> Result<PathBuf> {
    artifact.metrics.verify_consistent()?;
    if let Some(extra) = &artifact.final_metrics {
        extra.verify_consistent()?;
    }
    let path = dir.join(ARTIFACT_NAME);
    let json = serde_json::to_string_pretty(artifact).expect("artifact serializes");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads an artifact from a run directory or a direct path to the file.
pub fn load_artifact(path: &Path) -> Result<RunArtifact> {
    let file = if path.is_dir() { path.join(ARTIFACT_NAME) } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(&file, e.to_string()))
}

fn resolve_datasets(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    if let Some(path) = &config.dataset.path {
        let bundle = crate::data::load_bundle(path)?;
        let mut splits = bundle.splits;
        let train = splits
            .remove(&Split::Train)
            .ok_or_else(|| Error::Config(format!("{} has no train split", path.display())))?;
        let val = splits
            .remove(&Split::Validation)
            .ok_or_else(|| Error::Config(format!("{} has no validation split", path.display())))?;
        return Ok((train, val));
    }
    let spec = config.dataset.synthetic.as_ref().expect("validated");
    let base = SyntheticSpec {
        priors: spec.priors.clone(),
        size: spec.size,
        channels: spec.channels,
        height: spec.height,
        width: spec.width,
        noise_sigma: spec.noise_sigma,
        seed: child_seed(config.seed, seeds::DATA_TRAIN),
        split: Split::Train,
    };
    let train = make_synthetic_imbalanced(&base)?;
    let val = make_synthetic_imbalanced(&SyntheticSpec {
        size: spec.val_size,
        seed: child_seed(config.seed, seeds::DATA_VAL),
        split: Split::Validation,
        ..base
    })?;
    Ok((train, val))
}

/// Loads every `class_<j>.json` generator checkpoint present in `dir` for
/// classes `0..k`. Missing files are fine; classes needing synthesis without
/// a generator fail later in `balance_with_gan`.
pub fn load_generators(dir: &Path, k: usize) -> Result<BTreeMap<u8, Generator>> {
    let mut out = BTreeMap::new();
    for j in 0..k {
        let path = dir.join(format!("class_{j}.json"));
        if path.exists() {
            out.insert(j as u8, load_generator(&path)?);
        }
    }
    Ok(out)
}

fn build_model(config: &ExperimentConfig, train: &Dataset) -> Result<ReferenceCnn> {
    let m = &config.model;
    let scaled = compound_scaling(&ScalingConfig {
        alpha: m.alpha,
        beta: m.beta,
        gamma: m.gamma,
        phi: m.phi,
    })?;
    // at phi = 0 the bases do not act, so the cost constraint is moot
    if scaled.warn && m.phi > 0.0 {
        eprintln!(
            "warning: scaling bases leave residual {:.4} against the constant-cost constraint; \
             each unit of phi no longer doubles cost",
            scaled.residual
        );
    }
    let img = &train.images[0];
    if img.height() != img.width() {
        return Err(Error::Config(format!(
            "the reference CNN expects square inputs, dataset is {}x{}",
            img.height(),
            img.width()
        )));
    }
    let rc = ReferenceCnnConfig {
        input_channels: img.channels(),
        num_classes: train.k,
        base_depth: m.base_depth,
        base_width: m.base_width,
        base_resolution: img.height(),
        depth_multiplier: m.depth * scaled.depth,
        width_multiplier: m.width * scaled.width,
        resolution_multiplier: m.resolution * scaled.resolution,
    };
    let arch = rc.resolve()?;
    if arch.resolution != img.height() {
        return Err(Error::Config(format!(
            "resolution multiplier asks for {}px inputs but the dataset provides {}px; \
             resample the data or drop the multiplier",
            arch.resolution,
            img.height()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(config.seed, seeds::MODEL_INIT));
    build_reference_cnn(&rc, &mut rng)
}

enum Optimizer {
    Adam(Adam<f32>),
    Sgd(Sgd),
}

impl Optimizer {
    fn step(&mut self, model: &mut ReferenceCnn, lr: f64) {
        match self {
            Optimizer::Adam(o) => o.step(model, lr),
            Optimizer::Sgd(o) => o.step(model, lr),
        }
    }
}

fn epoch_order(
    sampler: SamplerKind,
    hist: &ClassHistogram,
    labels: &[u8],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let mut order = match sampler {
        SamplerKind::None => (0..labels.len()).collect(),
        SamplerKind::InverseFrequency => {
            let weights = inverse_frequency_class_weights(hist)?;
            weighted_sampler(labels, &weights, labels.len(), rng)?
        }
        SamplerKind::Oversample => oversample_indices(hist, labels)?,
        SamplerKind::Undersample => undersample_indices(hist, labels, rng)?,
    };
    order.shuffle(rng);
    Ok(order)
}

fn static_class_weights(config: &ExperimentConfig, hist: &ClassHistogram) -> Result<Option<ClassWeights>> {
    Ok(match config.reweight {
        ReweightKind::None => None,
        ReweightKind::InverseFrequency => Some(inverse_frequency_class_weights(hist)?),
        ReweightKind::EffectiveNumber => {
            Some(effective_number_class_weights(hist, config.effective_number_beta)?)
        }
    })
}

fn evaluate(model: &mut ReferenceCnn, val: &Dataset, batch_size: usize) -> Result<MetricsReport> {
    let preds = predict(model, val, batch_size)?;
    let labels: Vec<usize> = val.labels.iter().map(|&l| l as usize).collect();
    let cm = confusion_matrix(&preds, &labels, val.k)?;
    MetricsReport::from_confusion(&cm)
}

/// Trains per the config and writes the artifact under
/// `out_root/<run_id>/`. Identical config and seed give bit-identical
/// artifacts (modulo wall-clock time).
pub fn run_experiment(config: &ExperimentConfig, out_root: &Path) -> Result<RunArtifact> {
    config.validate()?;
    let started = Instant::now();
    parallel::set_exec_mode(match config.mode {
        ExecModeKind::Fast => ExecMode::Parallel,
        ExecModeKind::Reproducible => ExecMode::Sequential,
    });

    let out_dir = out_root.join(&config.run_id);
    if out_dir.join(ARTIFACT_NAME).exists() {
        return Err(Error::Config(format!(
            "run_id {:?} already has an artifact under {}; run ids are unique per output directory",
            config.run_id,
            out_root.display()
        )));
    }
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let (mut train, mut val) = resolve_datasets(config)?;
    if let Some(bands) = &config.bands {
        let triple = BandTriple::parse(bands)?;
        train = compose_dataset(&train, &triple)?;
        val = compose_dataset(&val, &triple)?;
    }
    if config.gan_augmentation.enabled {
        let mut generators = load_generators(&config.gan_augmentation.generators_dir, train.k)?;
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(config.seed, seeds::GAN_BALANCE));
        train = balance_with_gan(
            &train,
            &mut generators,
            config.gan_augmentation.target_per_class,
            config.gan_augmentation.truncate_majority,
            &mut rng,
        )?;
    }

    let stats = NormalizationStats::compute(&train)?;
    let train = normalize(&train, &stats)?;
    let val = normalize(&val, &stats)?;

    let hist = class_histogram(&train)?;
    let mut model = build_model(config, &train)?;
    let mut optimizer = match config.optimizer.kind {
        OptimizerKind::Adam => Optimizer::Adam(Adam::new(config.optimizer.beta1, config.optimizer.beta2)),
        OptimizerKind::Sgd => Optimizer::Sgd(Sgd),
    };

    let base_schedule = config.lr.to_schedule();
    let margins = match config.loss {
        LossKind::Ldam => Some(ldam_margins(&hist, &config.ldam)?),
        LossKind::CrossEntropy => None,
    };
    let static_weights = static_class_weights(config, &hist)?;

    let mut sampler_rng = ChaCha8Rng::seed_from_u64(child_seed(config.seed, seeds::SAMPLER));
    let mut augment_rng = ChaCha8Rng::seed_from_u64(child_seed(config.seed, seeds::AUGMENT));
    let mut swa_state = SwaState::new();
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let class_weights = if config.drw.enabled {
            let w = drw_class_weights(epoch, &config.drw.to_config(), &hist)?;
            // before the switch the weights are uniform; leave the loss
            // unweighted so the mean matches the plain formula exactly
            if epoch < config.drw.start_epoch { None } else { Some(w) }
        } else {
            static_weights.clone()
        };
        let spec = match config.loss {
            LossKind::CrossEntropy => BatchLoss::CrossEntropy { class_weights },
            LossKind::Ldam => BatchLoss::Ldam {
                margins: margins.clone().expect("margins built for ldam"),
                scale_s: config.ldam.scale_s,
                class_weights,
            },
        };
        let schedule = if config.drw.enabled && epoch >= config.drw.start_epoch {
            base_schedule.scaled(0.1)
        } else {
            base_schedule
        };

        let order = epoch_order(config.sampler, &hist, &train.labels, &mut sampler_rng)?;
        let iters = order.len().div_ceil(config.batch_size);
        let mut loss_sum = 0.0;
        let mut last_lr = 0.0;
        for (it, chunk) in order.chunks(config.batch_size).enumerate() {
            let t = epoch as f64 + it as f64 / iters as f64;
            let lr = schedule.value(t);
            last_lr = lr;

            let mut images: Vec<Array3<f32>> = Vec::with_capacity(chunk.len());
            let mut labels: Vec<u8> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let img = match &config.augment {
                    Some(aug) => augment_standard(&train.images[i], &mut augment_rng, aug).pixels,
                    None => train.images[i].pixels.clone(),
                };
                images.push(img);
                labels.push(train.labels[i]);
            }

            let logits = model.forward_batch(&images, true)?;
            let logits64 = logits.mapv(f64::from);
            let (loss, grad) = batch_loss_with_grad(&logits64, &labels, &spec)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged at epoch {epoch} iteration {it}: loss {loss}"
                )));
            }
            model.backward_batch(&grad.mapv(|g| g as f32));
            optimizer.step(&mut model, lr);
            loss_sum += loss;
        }
        trace.push(EpochTrace { epoch, mean_loss: loss_sum / iters as f64, lr: last_lr });

        if config.swa.enabled && swa_capture_points(epoch, config.swa.start_epoch, config.swa.cycle) {
            let snap = ClassifierModel::snapshot(&mut model);
            swa_update(&mut swa_state, &snap.values)?;
        }
    }

    let final_report = evaluate(&mut model, &val, config.batch_size)?;
    let checkpoint_final = out_dir.join("final.json");
    save_checkpoint(&mut model, &checkpoint_final)?;

    let (metrics, final_metrics, checkpoint_swa) = if swa_state.n_snapshots() > 0 {
        let averaged = swa_state.averaged_f32().expect("snapshots exist");
        let template = ClassifierModel::snapshot(&mut model);
        let swa_snap = nn::with_values(&template, averaged)?;
        let mut swa_model = build_model(config, &train)?;
        ClassifierModel::load_snapshot(&mut swa_model, &swa_snap)?;
        recalibrate_running_stats(&mut swa_model, &train)?;
        let swa_report = evaluate(&mut swa_model, &val, config.batch_size)?;
        let path = out_dir.join("swa.json");
        save_checkpoint(&mut swa_model, &path)?;
        (swa_report, Some(final_report), Some(path))
    } else {
        (final_report, None, None)
    };

    let artifact = RunArtifact {
        config: config.clone(),
        metrics,
        final_metrics,
        trace,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        checkpoint_final,
        checkpoint_swa,
        swa_snapshots: swa_state.n_snapshots(),
    };
    write_artifact(&artifact, &out_dir)?;
    Ok(artifact)
}

/// One line of the tabular report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub run_id: String,
    pub val_acc: f64,
    pub bal_acc: f64,
    pub icv: f64,
    pub recalls: Vec<Option<f64>>,
}

impl ReportRow {
    fn from_artifact(artifact: &RunArtifact) -> ReportRow {
        let m = &artifact.metrics;
        ReportRow {
            run_id: artifact.config.run_id.clone(),
            val_acc: m.validation_accuracy,
            bal_acc: m.balanced_accuracy,
            icv: m.icv,
            recalls: m.per_class_recall.clone(),
        }
    }
}

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

/// Renders the main report CSV; [`parse_report_csv`] inverts it exactly, so
/// emit -> parse -> emit is byte-identical.
pub fn render_report_csv(rows: &[ReportRow]) -> Result<String> {
    let k = uniform_k(rows)?;
    let mut out = String::from("run_id,val_acc,bal_acc,icv");
    for j in 0..k {
        out.push_str(&format!(",recall_{j}"));
    }
    out.push('\n');
    for row in rows {
        out.push_str(&row.run_id);
        for v in [row.val_acc, row.bal_acc, row.icv] {
            out.push(',');
            out.push_str(&fmt4(v));
        }
        for recall in &row.recalls {
            out.push(',');
            if let Some(r) = recall {
                out.push_str(&fmt4(*r));
            }
        }
        out.push('\n');
    }
    Ok(out)
}

fn uniform_k(rows: &[ReportRow]) -> Result<usize> {
    let k = rows
        .first()
        .map(|r| r.recalls.len())
        .ok_or_else(|| Error::Validation("report needs at least one row".into()))?;
    if let Some(bad) = rows.iter().find(|r| r.recalls.len() != k) {
        return Err(Error::Validation(format!(
            "row {:?} has {} classes, expected {k}",
            bad.run_id,
            bad.recalls.len()
        )));
    }
    Ok(k)
}

pub fn parse_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let header = reader.headers().map_err(|e| Error::parse(path, e.to_string()))?.clone();
    if header.len() < 4 || &header[0] != "run_id" {
        return Err(Error::parse(path, "expected a run_id,val_acc,bal_acc,icv,... header"));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::parse(path, e.to_string()))?;
        let field = |i: usize| -> Result<f64> {
            record[i]
                .parse()
                .map_err(|_| Error::parse(path, format!("bad number {:?} in row {:?}", &record[i], &record[0])))
        };
        let mut recalls = Vec::new();
        for i in 4..record.len() {
            recalls.push(if record[i].is_empty() { None } else { Some(field(i)?) });
        }
        rows.push(ReportRow {
            run_id: record[0].to_string(),
            val_acc: field(1)?,
            bal_acc: field(2)?,
            icv: field(3)?,
            recalls,
        });
    }
    Ok(rows)
}

fn render_markdown(rows: &[ReportRow]) -> Result<String> {
    let k = uniform_k(rows)?;
    let mut out = String::from("| run_id | val_acc | bal_acc | icv |");
    for j in 0..k {
        out.push_str(&format!(" recall_{j} |"));
    }
    out.push('\n');
    out.push_str("| --- | --- | --- | --- |");
    for _ in 0..k {
        out.push_str(" --- |");
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} |",
            row.run_id,
            fmt4(row.val_acc),
            fmt4(row.bal_acc),
            fmt4(row.icv)
        ));
        for recall in &row.recalls {
            match recall {
                Some(r) => out.push_str(&format!(" {} |", fmt4(*r))),
                None => out.push_str("  |"),
            }
        }
        out.push('\n');
    }
    Ok(out)
}

fn render_scatter_csv(rows: &[ReportRow], x_name: &str, x: impl Fn(&ReportRow) -> f64) -> String {
    let mut out = format!("run_id,{x_name},icv\n");
    for row in rows {
        out.push_str(&format!("{},{},{}\n", row.run_id, fmt4(x(row)), fmt4(row.icv)));
    }
    out
}

/// Minimal self-contained SVG scatter: labeled axes with five ticks each,
/// one labeled point per row.
fn render_scatter_svg(title: &str, x_label: &str, points: &[(String, f64, f64)]) -> String {
    const W: f64 = 720.0;
    const H: f64 = 480.0;
    const M: f64 = 70.0;
    let (mut x_lo, mut x_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, x, y) in points {
        x_lo = x_lo.min(*x);
        x_hi = x_hi.max(*x);
        y_lo = y_lo.min(*y);
        y_hi = y_hi.max(*y);
    }
    for (lo, hi) in [(&mut x_lo, &mut x_hi), (&mut y_lo, &mut y_hi)] {
        let pad = (*hi - *lo).max(1e-6) * 0.08;
        *lo -= pad;
        *hi += pad;
    }
    let sx = |x: f64| M + (x - x_lo) / (x_hi - x_lo) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y_lo) / (y_hi - y_lo) * (H - 2.0 * M);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{title}</text>\n",
        W / 2.0
    );
    svg.push_str(&format!(
        "<line x1=\"{M}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{0}\" stroke=\"black\"/>\n",
        H - M,
        W - M
    ));
    for i in 0..=4 {
        let fx = x_lo + (x_hi - x_lo) * i as f64 / 4.0;
        let fy = y_lo + (y_hi - y_lo) * i as f64 / 4.0;
        let (px, py) = (sx(fx), sy(fy));
        svg.push_str(&format!(
            "<line x1=\"{px}\" y1=\"{0}\" x2=\"{px}\" y2=\"{1}\" stroke=\"black\"/>\n\
             <text x=\"{px}\" y=\"{2}\" text-anchor=\"middle\">{fx:.3}</text>\n",
            H - M,
            H - M + 6.0,
            H - M + 20.0
        ));
        svg.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{py}\" x2=\"{M}\" y2=\"{py}\" stroke=\"black\"/>\n\
             <text x=\"{1}\" y=\"{2}\" text-anchor=\"end\">{fy:.3}</text>\n",
            M - 6.0,
            M - 10.0,
            py + 4.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>\n\
         <text x=\"18\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">icv</text>\n",
        W / 2.0,
        H - 20.0,
        H / 2.0,
        H / 2.0
    ));
    for (label, x, y) in points {
        let (px, py) = (sx(*x), sy(*y));
        svg.push_str(&format!(
            "<circle cx=\"{px}\" cy=\"{py}\" r=\"4\" fill=\"steelblue\"/>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"10\">{label}</text>\n",
            px + 6.0,
            py - 6.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes the tabular report (CSV + markdown), the two scatter-data CSVs,
/// and, when `plots` is set, rendered SVG scatters. Returns the written
/// paths.
pub fn emit_report(artifacts: &[RunArtifact], out_dir: &Path, plots: bool) -> Result<Vec<PathBuf>> {
    if artifacts.is_empty() {
        return Err(Error::Validation("report needs at least one artifact".into()));
    }
    let mut seen = BTreeSet::new();
    for a in artifacts {
        if !seen.insert(a.config.run_id.as_str()) {
            return Err(Error::Validation(format!("duplicate run_id {:?}", a.config.run_id)));
        }
    }
    let rows: Vec<ReportRow> = artifacts.iter().map(ReportRow::from_artifact).collect();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut written = Vec::new();
    let mut write = |name: &str, content: String| -> Result<()> {
        let path = out_dir.join(name);
        std::fs::write(&path, content).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    write("report.csv", render_report_csv(&rows)?)?;
    write("report.md", render_markdown(&rows)?)?;
    write("scatter_val_acc_vs_icv.csv", render_scatter_csv(&rows, "val_acc", |r| r.val_acc))?;
    write("scatter_bal_acc_vs_icv.csv", render_scatter_csv(&rows, "bal_acc", |r| r.bal_acc))?;
    if plots {
        let val_pts: Vec<(String, f64, f64)> =
            rows.iter().map(|r| (r.run_id.clone(), r.val_acc, r.icv)).collect();
        let bal_pts: Vec<(String, f64, f64)> =
            rows.iter().map(|r| (r.run_id.clone(), r.bal_acc, r.icv)).collect();
        write(
            "scatter_val_acc_vs_icv.svg",
            render_scatter_svg("validation accuracy vs icv", "val_acc", &val_pts),
        )?;
        write(
            "scatter_bal_acc_vs_icv.svg",
            render_scatter_svg("balanced accuracy vs icv", "bal_acc", &bal_pts),
        )?;
    }
    Ok(written)
}

/// One row of the bundled reference table: a labeled benchmark result
/// (overall validation accuracy plus per-class recalls) and the balanced
/// accuracy / intra-class variance pair recorded alongside it.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceRow {
    pub label: &'static str,
    pub accuracy: f64,
    pub recalls: [f64; 4],
    pub recorded_balanced_accuracy: f64,
    pub recorded_icv: f64,
    /// The recorded pair for this row is swapped at the source; the checker
    /// matches it crosswise and reports it separately.
    pub transposed: bool,
}

/// Reference rows used to cross-check the metrics implementation.
pub const REFERENCE_TABLE: [ReferenceRow; 9] = [
    ReferenceRow {
        label: "resnet50-ce-baseline",
        accuracy: 0.7465,
        recalls: [0.9102, 0.4198, 0.5511, 0.5682],
        recorded_balanced_accuracy: 0.6123,
        recorded_icv: 0.4510,
        transposed: false,
    },
    ReferenceRow {
        label: "resnet50-ce-weighted-sampler",
        accuracy: 0.7184,
        recalls: [0.8154, 0.5818, 0.5014, 0.6880],
        recorded_balanced_accuracy: 0.6467,
        recorded_icv: 0.2757,
        transposed: false,
    },
    ReferenceRow {
        label: "resnet50-clr-ldam-drw-sampler",
        accuracy: 0.7022,
        recalls: [0.7792, 0.5719, 0.5780, 0.6334],
        recorded_balanced_accuracy: 0.2076,
        recorded_icv: 0.6406,
        transposed: true,
    },
    ReferenceRow {
        label: "effnetb4-ce-baseline",
        accuracy: 0.7630,
        recalls: [0.9199, 0.4114, 0.5739, 0.6469],
        recorded_balanced_accuracy: 0.6380,
        recorded_icv: 0.4443,
        transposed: false,
    },
    ReferenceRow {
        label: "effnetb4-clr-ldam-drw-sampler",
        accuracy: 0.7196,
        recalls: [0.7867, 0.5900, 0.5648, 0.7699],
        recorded_balanced_accuracy: 0.6779,
        recorded_icv: 0.2185,
        transposed: false,
    },
    ReferenceRow {
        label: "effnetb4-swa-clr-ldam-drw",
        accuracy: 0.7292,
        recalls: [0.8098, 0.6017, 0.5409, 0.7436],
        recorded_balanced_accuracy: 0.6740,
        recorded_icv: 0.2417,
        transposed: false,
    },
    ReferenceRow {
        label: "effnetb4-swa-clr-ldam-drw-bands652",
        accuracy: 0.7441,
        recalls: [0.8156, 0.5941, 0.6138, 0.7584],
        recorded_balanced_accuracy: 0.6955,
        recorded_icv: 0.2115,
        transposed: false,
    },
    ReferenceRow {
        label: "effnetb4-ce-sampler-gan-augmented",
        accuracy: 0.67,
        recalls: [0.6815, 0.6619, 0.6258, 0.7521],
        recorded_balanced_accuracy: 0.6803,
        recorded_icv: 0.0942,
        transposed: false,
    },
    ReferenceRow {
        label: "effnetb4-swa-clr-ldam-drw-gan-augmented",
        accuracy: 0.70,
        recalls: [0.7459, 0.5842, 0.5540, 0.7436],
        recorded_balanced_accuracy: 0.6569,
        recorded_icv: 0.1967,
        transposed: false,
    },
];

/// Agreement tolerance between recomputed and recorded metric values.
pub const REFERENCE_TOLERANCE: f64 = 0.0005;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableCheck {
    pub label: String,
    pub recomputed_balanced_accuracy: f64,
    pub recomputed_icv: f64,
    pub recorded_balanced_accuracy: f64,
    pub recorded_icv: f64,
    pub transposed: bool,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableCheckReport {
    pub checks: Vec<TableCheck>,
    pub tolerance: f64,
}

impl TableCheckReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// One line per row for terminal output.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let status = if c.passed { "ok" } else { "FAIL" };
            let note = if c.transposed { " (recorded pair is transposed; matched crosswise)" } else { "" };
            out.push_str(&format!(
                "{status:4} {label:<42} bal_acc {r_bal:.4} vs {e_bal:.4}, icv {r_icv:.4} vs {e_icv:.4}{note}\n",
                label = c.label,
                r_bal = c.recomputed_balanced_accuracy,
                e_bal = c.recorded_balanced_accuracy,
                r_icv = c.recomputed_icv,
                e_icv = c.recorded_icv,
            ));
        }
        let verdict = if self.all_passed() { "all rows passed" } else { "FAILURES PRESENT" };
        out.push_str(&format!("{verdict} (tolerance {:.4})\n", self.tolerance));
        out
    }
}

/// Recomputes balanced accuracy and intra-class variance for every bundled
/// reference row and compares against the recorded pair (crosswise for the
/// transposed row).
pub fn verify_reference_tables() -> TableCheckReport {
    let checks = REFERENCE_TABLE
        .iter()
        .map(|row| {
            let recalls: Vec<Option<f64>> = row.recalls.iter().map(|&r| Some(r)).collect();
            let bal = balanced_accuracy(&recalls).expect("reference recalls are complete");
            let icv = intra_class_variance(row.accuracy, &recalls);
            let (want_bal, want_icv) = if row.transposed {
                (row.recorded_icv, row.recorded_balanced_accuracy)
            } else {
                (row.recorded_balanced_accuracy, row.recorded_icv)
            };
            let passed =
                (bal - want_bal).abs() <= REFERENCE_TOLERANCE && (icv - want_icv).abs() <= REFERENCE_TOLERANCE;
            TableCheck {
                label: row.label.to_string(),
                recomputed_balanced_accuracy: bal,
                recomputed_icv: icv,
                recorded_balanced_accuracy: row.recorded_balanced_accuracy,
                recorded_icv: row.recorded_icv,
                transposed: row.transposed,
                passed,
            }
        })
        .collect();
    TableCheckReport { checks, tolerance: REFERENCE_TOLERANCE }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke_config(run_id: &str, seed: u64) -> ExperimentConfig {
        let mut config = minimal_config(run_id, seed);
        config.epochs = 2;
        config.batch_size = 32;
        config
    }

    fn minimal_config(run_id: &str, seed: u64) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(&format!(
            r#"
            run_id = "{run_id}"
            seed = {seed}
            epochs = 2

            [dataset.synthetic]
            size = 200
            val_size = 80
            channels = 3
            height = 16
            width = 16

            [model]
            base_width = 8
            "#
        ))
        .unwrap()
    }

    #[test]
    fn toml_defaults_and_full_config_parse() {
        let config = minimal_config("smoke", 7);
        assert_eq!(config.epochs, 2);
        assert_eq!(config.batch_size, 32);
        assert_eq!(config.sampler, SamplerKind::None);
        assert_eq!(config.reweight, ReweightKind::None);
        assert_eq!(config.loss, LossKind::CrossEntropy);
        assert_eq!(config.lr.kind, LrKind::Constant);
        assert_eq!(config.lr.value, 1e-3);
        assert!(!config.drw.enabled);
        assert_eq!(config.drw.start_epoch, 20);
        assert!(!config.swa.enabled);
        assert_eq!(config.swa.start_epoch, 22);
        assert_eq!(config.optimizer.kind, OptimizerKind::Adam);
        assert!(config.augment.is_none());
        assert!(!config.gan_augmentation.enabled);
        config.validate().unwrap();

        let full = ExperimentConfig::from_toml_str(
            r#"
            run_id = "full"
            seed = 9
            epochs = 30
            batch_size = 16
            bands = "B6,B5,B2"
            mode = "reproducible"
            sampler = "inverse_frequency"
            loss = "ldam"

            [dataset]
            path = "data/manifest.json"

            [ldam]
            max_margin = 0.5
            scale_s = 30.0

            [drw]
            enabled = true
            start_epoch = 20

            [lr]
            kind = "clr"
            [lr.clr]
            lower = 1e-5
            upper = 1e-3
            stepsize = 2.0

            [swa]
            enabled = true
            start_epoch = 22
            cycle = 2

            [model]
            kind = "reference_cnn"
            width = 1.5
            base_width = 16

            [augment]
            hflip = true
            vflip = true
            rot90 = false

            [optimizer]
            kind = "adam"
            "#,
        )
        .unwrap();
        full.validate().unwrap();
        assert_eq!(full.bands.as_deref(), Some("B6,B5,B2"));
        assert_eq!(full.mode, ExecModeKind::Reproducible);
        assert_eq!(full.sampler, SamplerKind::InverseFrequency);
        assert_eq!(full.loss, LossKind::Ldam);
        assert!(full.drw.enabled);
        assert_eq!(full.lr.kind, LrKind::Clr);
        assert_eq!(full.swa.cycle, 2);
        assert_eq!(full.model.width, 1.5);
        let aug = full.augment.unwrap();
        assert!(aug.hflip && aug.vflip && !aug.rot90);

        // the JSON alternative accepts the same structure
        let json = serde_json::to_string(&config).unwrap();
        let back = ExperimentConfig::from_json_str(&json).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn config_requires_seed_and_run_id() {
        assert!(ExperimentConfig::from_toml_str("run_id = \"x\"\n[dataset.synthetic]\n").is_err());
        assert!(ExperimentConfig::from_toml_str("seed = 1\n[dataset.synthetic]\n").is_err());
    }

    #[test]
    fn validation_rejects_contradictions() {
        let mut c = minimal_config("ok", 1);
        c.gan_augmentation.enabled = true;
        c.gan_augmentation.target_per_class = 100;
        c.gan_augmentation.generators_dir = PathBuf::from("gans");
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("band"), "{err}");

        let mut c = minimal_config("ok", 1);
        c.drw.enabled = true;
        c.drw.start_epoch = 0;
        c.reweight = ReweightKind::InverseFrequency;
        assert!(c.validate().is_err());

        let mut c = minimal_config("ok", 1);
        c.drw.enabled = true;
        assert!(c.validate().is_err(), "drw start 20 past 2 epochs");

        let mut c = minimal_config("ok", 1);
        c.swa.enabled = true;
        assert!(c.validate().is_err(), "swa start 22 past 2 epochs");

        let mut c = minimal_config("bad/id", 1);
        c.run_id = "bad/id".into();
        assert!(c.validate().is_err());

        let mut c = minimal_config("ok", 1);
        c.model.kind = ModelKind::External;
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("reference_cnn"), "{err}");

        let mut c = minimal_config("ok", 1);
        c.dataset.path = Some(PathBuf::from("x"));
        assert!(c.validate().is_err(), "both dataset sources set");
    }

    #[test]
    fn smoke_run_writes_a_complete_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let config = smoke_config("smoke", 11);
        let artifact = run_experiment(&config, dir.path()).unwrap();

        assert_eq!(artifact.config, config);
        assert_eq!(artifact.trace.len(), 2);
        assert!(artifact.trace.iter().all(|t| t.mean_loss.is_finite() && t.lr > 0.0));
        artifact.metrics.verify_consistent().unwrap();
        assert_eq!(artifact.metrics.per_class_recall.len(), 4);
        assert!(artifact.wall_clock_seconds > 0.0);
        assert!(artifact.checkpoint_final.exists());
        assert!(artifact.checkpoint_swa.is_none());
        assert_eq!(artifact.swa_snapshots, 0);

        let loaded = load_artifact(&dir.path().join("smoke")).unwrap();
        assert_eq!(loaded.config, config);
        assert_eq!(loaded.metrics, artifact.metrics);

        // a second run under the same id must refuse to clobber it
        let err = run_experiment(&config, dir.path()).unwrap_err().to_string();
        assert!(err.contains("smoke"), "{err}");
    }

    #[test]
    fn identical_config_and_seed_reproduce_the_report() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = smoke_config("det", 23);
        config.dataset.synthetic.as_mut().unwrap().size = 120;
        config.dataset.synthetic.as_mut().unwrap().val_size = 60;
        let a = run_experiment(&config, &dir.path().join("a")).unwrap();
        let b = run_experiment(&config, &dir.path().join("b")).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.trace, b.trace);

        let mut other_seed = config.clone();
        other_seed.seed = 24;
        let c = run_experiment(&other_seed, &dir.path().join("c")).unwrap();
        assert_ne!(a.trace, c.trace, "different seed should change the run");
    }

    #[test]
    fn swa_run_reports_both_weight_sets() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = minimal_config("swa", 31);
        config.epochs = 3;
        config.dataset.synthetic.as_mut().unwrap().size = 120;
        config.dataset.synthetic.as_mut().unwrap().val_size = 60;
        config.swa = SwaSection { enabled: true, start_epoch: 1, cycle: 1 };
        config.sampler = SamplerKind::InverseFrequency;
        config.loss = LossKind::Ldam;
        config.drw = DrwSection { enabled: true, start_epoch: 1, ..DrwSection::default() };
        config.lr = LrSection { kind: LrKind::Clr, ..LrSection::default() };

        let artifact = run_experiment(&config, dir.path()).unwrap();
        assert_eq!(artifact.swa_snapshots, 2, "epochs 1 and 2 captured");
        let swa_path = artifact.checkpoint_swa.as_ref().expect("swa checkpoint written");
        assert!(swa_path.exists());
        let extra = artifact.final_metrics.as_ref().expect("final metrics reported too");
        extra.verify_consistent().unwrap();
        artifact.metrics.verify_consistent().unwrap();

        // averaging two different snapshots must differ from the last weights
        let final_bytes = std::fs::read(artifact.checkpoint_final.with_extension("f32")).unwrap();
        let swa_bytes = std::fs::read(swa_path.with_extension("f32")).unwrap();
        assert_ne!(final_bytes, swa_bytes);
    }

    fn fixture_artifact(row: &ReferenceRow) -> RunArtifact {
        let mut config = minimal_config(row.label, 1);
        config.run_id = row.label.to_string();
        RunArtifact {
            config,
            metrics: MetricsReport {
                validation_accuracy: row.accuracy,
                per_class_recall: row.recalls.iter().map(|&r| Some(r)).collect(),
                balanced_accuracy: row.recorded_balanced_accuracy,
                icv: row.recorded_icv,
            },
            final_metrics: None,
            trace: Vec::new(),
            wall_clock_seconds: 0.0,
            checkpoint_final: PathBuf::new(),
            checkpoint_swa: None,
            swa_snapshots: 0,
        }
    }

    #[test]
    fn report_emission_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let artifacts: Vec<RunArtifact> = REFERENCE_TABLE.iter().map(fixture_artifact).collect();
        let written = emit_report(&artifacts, dir.path(), true).unwrap();
        assert_eq!(written.len(), 6);
        for path in &written {
            assert!(path.exists(), "{}", path.display());
        }

        let csv_path = dir.path().join("report.csv");
        let text = std::fs::read_to_string(&csv_path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "run_id,val_acc,bal_acc,icv,recall_0,recall_1,recall_2,recall_3"
        );
        assert_eq!(
            lines.next().unwrap(),
            "resnet50-ce-baseline,0.7465,0.6123,0.4510,0.9102,0.4198,0.5511,0.5682"
        );
        assert_eq!(text.lines().count(), 10);

        // parse -> re-render is byte-identical
        let rows = parse_report_csv(&csv_path).unwrap();
        assert_eq!(render_report_csv(&rows).unwrap(), text);

        // scatter data carries the recorded point set with labels
        let scatter = std::fs::read_to_string(dir.path().join("scatter_val_acc_vs_icv.csv")).unwrap();
        assert!(scatter.starts_with("run_id,val_acc,icv\n"));
        assert!(scatter.contains("effnetb4-ce-sampler-gan-augmented,0.6700,0.0942"));
        assert_eq!(scatter.lines().count(), 10);

        let svg = std::fs::read_to_string(dir.path().join("scatter_bal_acc_vs_icv.svg")).unwrap();
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<circle").count(), 9);

        // duplicate run ids are rejected
        let dup = vec![artifacts[0].clone(), artifacts[0].clone()];
        assert!(emit_report(&dup, dir.path(), false).is_err());
        assert!(emit_report(&[], dir.path(), false).is_err());
    }

    #[test]
    fn reference_table_checks_out() {
        let report = verify_reference_tables();
        assert!(report.all_passed(), "\n{}", report.render_text());
        assert_eq!(report.checks.len(), 9);
        assert_eq!(report.checks.iter().filter(|c| c.transposed).count(), 1);

        let baseline = &report.checks[3];
        assert_eq!(baseline.label, "effnetb4-ce-baseline");
        assert!((baseline.recomputed_balanced_accuracy - 0.6380).abs() < REFERENCE_TOLERANCE);
        assert!((baseline.recomputed_icv - 0.4443).abs() < REFERENCE_TOLERANCE);

        let gan = &report.checks[7];
        assert!((gan.recomputed_balanced_accuracy - 0.6803).abs() < REFERENCE_TOLERANCE);
        assert!((gan.recomputed_icv - 0.0942).abs() < REFERENCE_TOLERANCE);

        let swapped = &report.checks[2];
        assert!(swapped.transposed && swapped.passed);
        assert!((swapped.recomputed_balanced_accuracy - 0.6406).abs() < REFERENCE_TOLERANCE);
        assert!((swapped.recomputed_icv - 0.2076).abs() < REFERENCE_TOLERANCE);

        assert!(report.render_text().contains("transposed"));
    }

    #[test]
    fn env_seed_overrides_config() {
        let mut config = minimal_config("env", 5);
        assert_eq!(apply_env_seed(&mut config).unwrap(), None);
        assert_eq!(config.seed, 5);

        std::env::set_var(SEED_ENV_VAR, "99");
        assert_eq!(apply_env_seed(&mut config).unwrap(), Some(99));
        assert_eq!(config.seed, 99);

        std::env::set_var(SEED_ENV_VAR, "not-a-number");
        assert!(apply_env_seed(&mut config).is_err());
        std::env::remove_var(SEED_ENV_VAR);
    }
}
