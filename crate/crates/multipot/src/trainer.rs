//! Run orchestration: configuration files, dataset fitting, the step loop
//! for multi-domain pre-training and fine-tuning, binary checkpoints, and
//! the append-only metrics log.
//!
//! A run is described by a [`RunConfig`], usually loaded from TOML. The
//! trainer splits each referenced dataset, fits its composition reference
//! and normalization statistics on the train split only, caches radius
//! graphs, then drives the optimizer step by step: sample a mixed batch,
//! assemble per-dataset head outputs into one prediction via 0/1 masks, take
//! the structure-wise loss, and apply AdamW under the composite schedule.
//! Validation runs once per mixture epoch and feeds the plateau and
//! early-stop rules. Fixed seed and inputs give bit-identical runs, and a
//! checkpoint restarts a run mid-stream with no drift.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;
use std::{fmt, fs};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tapegrad::{Tape, Tensor, Value};

use crate::graph::{build_radius_graph, Graph, GraphError};
use crate::ingest::{load_dataset_file, split, Dataset, IngestError, SplitMode, SplitSpec};
use crate::loss::{
    scalar_mae, swl_loss, swl_loss_masked, threshold_masks, BatchShape, ErrorForm, LossError,
    LossMasks, LossWeights, ThresholdSpec, CATALYSIS_MARGINS, MOLECULAR_MARGINS,
};
use crate::model::{
    encode, init_model, predict_energy, predict_forces_direct, predict_forces_gradient,
    swap_heads, GraphBatch, HeadSet, HeadSpec, Mode, ModelConfig, ModelError, Pooling, TargetKind,
    TapedParams,
};
use crate::optim::{
    adamw_step, clip_gradients, early_stop, ema_update, pcgrad, rlp_observe, EarlyStopConfig,
    EarlyStopState, OptError, OptState, OptimHyper, RlpState, Schedule, SchedulerConfig,
    StopReason,
};
use crate::params::{layer_group, ParamError, ParamStore};
use crate::reference::{
    fit_linear_reference, fit_norm_stats, fit_scalar_target_reference, normalize_labels,
    normalize_scalar, NormStats, ReferenceError, ReferenceModel,
};
use crate::rng::RngState;
use crate::sampler::{MixSpec, Sampler, SamplerError, SamplerState};
use crate::system::{collate, AtomicSystem, Batch, DatasetMeta, SystemError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("run config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training aborted at step {step}: non-finite loss or gradient{}",
        last_good.as_ref().map(|p| format!("; last good checkpoint {}", p.display())).unwrap_or_default())]
    Aborted {
        step: u64,
        last_good: Option<PathBuf>,
    },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config toml: {0}")]
    TomlDe(#[from] toml::de::Error),
    #[error("config toml: {0}")]
    TomlSer(#[from] toml::ser::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Opt(#[from] OptError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Reference(#[from] ReferenceError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tape(#[from] tapegrad::Error),
    #[error(transparent)]
    System(#[from] SystemError),
}

/// Overflowed activations and NaN losses abort the run with a pointer to the
/// last saved checkpoint; structural errors propagate as-is.
fn numeric_failure(e: &TrainError) -> bool {
    match e {
        TrainError::NonFinite(_) => true,
        TrainError::Opt(OptError::NonFiniteGrad { .. }) => true,
        TrainError::Tape(tapegrad::Error::NonFinite { .. }) => true,
        TrainError::Model(ModelError::Tape(tapegrad::Error::NonFinite { .. })) => true,
        TrainError::Loss(LossError::Tape(tapegrad::Error::NonFinite { .. })) => true,
        _ => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Pretrain,
    Finetune,
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunMode::Pretrain => "pretrain",
            RunMode::Finetune => "finetune",
        })
    }
}

/// Where forces come from: the dedicated per-edge head, or the negative
/// gradient of the predicted energy with respect to positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForceMode {
    Direct,
    Gradient,
}

/// Named margin pair for threshold-gated losses, in physical units
/// (eV per system, eV/A per atom). The trainer rescales them into
/// normalized units with the dataset's own statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginClass {
    Molecular,
    Catalysis,
}

impl MarginClass {
    pub fn margins(self) -> (f64, f64) {
        match self {
            MarginClass::Molecular => MOLECULAR_MARGINS,
            MarginClass::Catalysis => CATALYSIS_MARGINS,
        }
    }
}

fn default_val_fraction() -> f64 {
    0.1
}

/// One dataset a run trains on. `id` names the dataset inside the run
/// (heads, metrics rows, checkpoints) regardless of what the file says.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRef {
    pub id: String,
    pub path: String,
    #[serde(default)]
    pub margins: Option<MarginClass>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Fine-tune on this per-system scalar instead of energies and forces.
    #[serde(default)]
    pub scalar_target: Option<String>,
    /// Subtract a fitted per-element baseline from the scalar target.
    #[serde(default)]
    pub scalar_atomwise: bool,
}

impl DatasetRef {
    pub fn new(id: impl Into<String>, path: impl Into<String>) -> Self {
        DatasetRef {
            id: id.into(),
            path: path.into(),
            margins: None,
            val_fraction: default_val_fraction(),
            scalar_target: None,
            scalar_atomwise: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSection {
    pub temperature: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub form: ErrorForm,
    /// Gate contributions already inside their dataset's error margins.
    pub gated: bool,
    /// Project away conflicting per-dataset gradient components.
    pub pcgrad: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            form: ErrorForm::Absolute,
            gated: false,
            pcgrad: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Defaults per mode: pre-training predicts forces with the direct head,
    /// fine-tuning differentiates the energy.
    pub force_mode: Option<ForceMode>,
    /// Save a numbered checkpoint every this many steps; 0 saves only the
    /// final one.
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            force_mode: None,
            checkpoint_every: 0,
        }
    }
}

/// Everything a run needs, serializable to a single TOML file. Unknown keys
/// are rejected so typos fail loudly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: RunMode,
    pub seed: u64,
    pub datasets: Vec<DatasetRef>,
    /// Fine-tuning starts from this checkpoint's backbone; absent means a
    /// freshly initialized network (the from-scratch baseline).
    #[serde(default)]
    pub init_checkpoint: Option<String>,
    #[serde(default)]
    pub model: ModelConfig,
    pub optim: OptimHyper,
    pub scheduler: SchedulerConfig,
    pub early_stop: EarlyStopConfig,
    pub mixture: MixtureSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub train: TrainSection,
}

impl RunConfig {
    /// Pre-training defaults: linear warmup over 2k steps into a two-epoch
    /// cosine, no plateau decay, fixed epoch count.
    pub fn pretrain_defaults(model: ModelConfig, datasets: Vec<DatasetRef>, seed: u64) -> Self {
        RunConfig {
            mode: RunMode::Pretrain,
            seed,
            datasets,
            init_checkpoint: None,
            model,
            optim: crate::optim::optim_preset("pretrain-default").expect("known preset"),
            scheduler: crate::optim::scheduler_preset("pretrain-default", 0)
                .expect("known preset"),
            early_stop: crate::optim::early_stop_preset("pretrain-default")
                .expect("known preset"),
            mixture: MixtureSection {
                temperature: 2.0,
                batch_size: 8,
            },
            loss: LossSection::default(),
            train: TrainSection::default(),
        }
    }

    /// Fine-tuning defaults: epoch-based warmup and cosine, plateau decay,
    /// layerwise rate factors sized to the backbone depth.
    pub fn finetune_defaults(
        model: ModelConfig,
        datasets: Vec<DatasetRef>,
        init_checkpoint: Option<String>,
        seed: u64,
    ) -> Self {
        let n_blocks = model.num_blocks;
        RunConfig {
            mode: RunMode::Finetune,
            seed,
            datasets,
            init_checkpoint,
            model,
            optim: crate::optim::optim_preset("finetune-default").expect("known preset"),
            scheduler: crate::optim::scheduler_preset("finetune-default", n_blocks)
                .expect("known preset"),
            early_stop: crate::optim::early_stop_preset("finetune-default")
                .expect("known preset"),
            mixture: MixtureSection {
                temperature: 1.0,
                batch_size: 8,
            },
            loss: LossSection::default(),
            train: TrainSection::default(),
        }
    }

    /// The from-scratch twin of a fine-tuning run: identical in every
    /// setting except initialization and its own schedule preset.
    pub fn scratch_defaults(model: ModelConfig, datasets: Vec<DatasetRef>, seed: u64) -> Self {
        let mut cfg = RunConfig::finetune_defaults(model, datasets, None, seed);
        cfg.optim = crate::optim::optim_preset("scratch-baseline").expect("known preset");
        cfg.scheduler = crate::optim::scheduler_preset("scratch-baseline", 0)
            .expect("known preset");
        cfg
    }

    pub fn resolved_force_mode(&self) -> ForceMode {
        self.train.force_mode.unwrap_or(match self.mode {
            RunMode::Pretrain => ForceMode::Direct,
            RunMode::Finetune => ForceMode::Gradient,
        })
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.datasets.is_empty() {
            return Err(TrainError::Config("a run needs at least one dataset".into()));
        }
        let mut ids = BTreeSet::new();
        for d in &self.datasets {
            if d.id.is_empty() || d.path.is_empty() {
                return Err(TrainError::Config(
                    "dataset id and path must be non-empty".into(),
                ));
            }
            if !ids.insert(d.id.as_str()) {
                return Err(TrainError::Config(format!("duplicate dataset id '{}'", d.id)));
            }
            if !(d.val_fraction > 0.0 && d.val_fraction < 0.5) {
                return Err(TrainError::Config(format!(
                    "dataset '{}': val_fraction {} must be in (0, 0.5)",
                    d.id, d.val_fraction
                )));
            }
        }
        self.model.validate()?;
        self.scheduler.validate()?;
        if let Some(c) = self.optim.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(TrainError::Config(format!(
                    "clip_norm {c} must be positive and finite"
                )));
            }
        }
        if !(self.mixture.temperature >= 1.0) {
            return Err(TrainError::Config(format!(
                "mixture temperature {} must be >= 1 (or infinite)",
                self.mixture.temperature
            )));
        }
        if self.mixture.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.early_stop.max_epochs == 0 {
            return Err(TrainError::Config("max_epochs must be >= 1".into()));
        }
        let scalar_count = self
            .datasets
            .iter()
            .filter(|d| d.scalar_target.is_some())
            .count();
        match self.mode {
            RunMode::Pretrain => {
                if self.init_checkpoint.is_some() {
                    return Err(TrainError::Config(
                        "pre-training starts fresh; use resume to continue a run".into(),
                    ));
                }
                if scalar_count > 0 {
                    return Err(TrainError::Config(
                        "scalar targets are a fine-tuning feature".into(),
                    ));
                }
                if self.resolved_force_mode() != ForceMode::Direct {
                    return Err(TrainError::Config(
                        "pre-training trains the direct force head".into(),
                    ));
                }
            }
            RunMode::Finetune => {
                if scalar_count != 0 && scalar_count != self.datasets.len() {
                    return Err(TrainError::Config(
                        "either every dataset or none may set scalar_target".into(),
                    ));
                }
                if scalar_count == 0
                    && self.resolved_force_mode() == ForceMode::Gradient
                    && !self.model.second_order
                {
                    return Err(TrainError::Config(
                        "gradient forces need model.second_order = true".into(),
                    ));
                }
                if scalar_count > 0 && self.loss.pcgrad {
                    return Err(TrainError::Config(
                        "pcgrad applies to energy-force training only".into(),
                    ));
                }
            }
        }
        if self.loss.gated {
            if scalar_count > 0 {
                return Err(TrainError::Config(
                    "threshold gating applies to energy-force training only".into(),
                ));
            }
            for d in &self.datasets {
                if d.margins.is_none() {
                    return Err(TrainError::Config(format!(
                        "loss.gated needs margins on every dataset; '{}' has none",
                        d.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Stable fingerprint of a run configuration; checkpoints embed it so a
/// resume against different settings is rejected instead of drifting.
pub fn config_hash(config: &RunConfig) -> Result<String, TrainError> {
    let json = serde_json::to_string(config)?;
    let digest = Sha256::digest(json.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn load_run_config(path: impl AsRef<Path>) -> Result<RunConfig, TrainError> {
    let text = fs::read_to_string(path.as_ref())?;
    let config: RunConfig = toml::from_str(&text)?;
    config.validate()?;
    Ok(config)
}

/// Apply `key.path=value` overrides to a TOML document in place. Each key
/// must name an existing scalar field (numeric segments index arrays); the
/// value is parsed as that field's current TOML type.
pub fn apply_toml_overrides(
    root: &mut toml::Value,
    overrides: &[(String, String)],
) -> Result<(), TrainError> {
    for (key, raw) in overrides {
        let mut node = &mut *root;
        for part in key.split('.') {
            node = match node {
                toml::Value::Table(t) => t.get_mut(part).ok_or_else(|| {
                    TrainError::Config(format!("unknown config key '{key}'"))
                })?,
                toml::Value::Array(a) => {
                    let i: usize = part.parse().map_err(|_| {
                        TrainError::Config(format!(
                            "override '{key}': '{part}' is not an array index"
                        ))
                    })?;
                    a.get_mut(i).ok_or_else(|| {
                        TrainError::Config(format!("override '{key}': index {i} out of range"))
                    })?
                }
                _ => {
                    return Err(TrainError::Config(format!(
                        "override '{key}' descends into a scalar value"
                    )))
                }
            };
        }
        *node = coerce_override(node, raw, key)?;
    }
    Ok(())
}

/// Apply overrides on top of a run config and re-validate the result.
pub fn apply_overrides(
    config: &RunConfig,
    overrides: &[(String, String)],
) -> Result<RunConfig, TrainError> {
    let mut root = toml::Value::try_from(config)?;
    apply_toml_overrides(&mut root, overrides)?;
    let config: RunConfig = root.try_into()?;
    config.validate()?;
    Ok(config)
}

fn coerce_override(
    current: &toml::Value,
    raw: &str,
    key: &str,
) -> Result<toml::Value, TrainError> {
    let parse_err =
        |want: &str| TrainError::Config(format!("override '{key}': '{raw}' is not a {want}"));
    Ok(match current {
        toml::Value::Float(_) => {
            toml::Value::Float(raw.parse().map_err(|_| parse_err("float"))?)
        }
        toml::Value::Integer(_) => {
            toml::Value::Integer(raw.parse().map_err(|_| parse_err("integer"))?)
        }
        toml::Value::Boolean(_) => {
            toml::Value::Boolean(raw.parse().map_err(|_| parse_err("boolean"))?)
        }
        toml::Value::String(_) => toml::Value::String(raw.to_string()),
        _ => {
            return Err(TrainError::Config(format!(
                "override '{key}' must target a scalar field"
            )))
        }
    })
}

/// How a dataset's raw labels map to the normalized values the network
/// trains on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetFit {
    EnergyForce {
        reference: ReferenceModel,
        stats: NormStats,
    },
    Scalar {
        name: String,
        reference: Option<ReferenceModel>,
        stats: NormStats,
    },
}

/// A dataset after splitting and fitting: train/val systems plus everything
/// needed to normalize labels and weight its loss terms.
#[derive(Debug, Clone)]
pub struct FittedDataset {
    pub meta: DatasetMeta,
    pub fit: TargetFit,
    pub train: Dataset,
    pub val: Dataset,
}

/// Split every referenced dataset and fit its reference and statistics on
/// the train split. Deterministic in the run seed, so resuming a run refits
/// identical artifacts.
pub fn prepare_datasets(config: &RunConfig) -> Result<Vec<FittedDataset>, TrainError> {
    let mut out = Vec::with_capacity(config.datasets.len());
    for dref in &config.datasets {
        let mut ds = load_dataset_file(&dref.path)?;
        ds.meta.dataset_id = dref.id.clone();
        if config.mode == RunMode::Pretrain && !(ds.schema.energy && ds.schema.forces) {
            return Err(TrainError::Config(format!(
                "pre-training dataset '{}' must carry energies and forces",
                dref.id
            )));
        }
        let spec = SplitSpec {
            fractions: (1.0 - dref.val_fraction, dref.val_fraction, 0.0),
            seed: config.seed,
            mode: SplitMode::Random,
        };
        let (mut train, val, rest) = split(&ds, &spec)?;
        // The floor remainder belongs to training; only train/val exist here.
        train.systems.extend(rest.systems);
        if val.systems.is_empty() {
            return Err(TrainError::Config(format!(
                "dataset '{}' is too small to hold out a validation split",
                dref.id
            )));
        }
        let mut meta = ds.meta.clone();
        meta.size = train.systems.len();
        meta.mean_atoms = train
            .systems
            .iter()
            .map(|s| s.numbers.len() as f64)
            .sum::<f64>()
            / train.systems.len() as f64;
        let fit = match &dref.scalar_target {
            None => {
                let reference = fit_linear_reference(&train)?;
                let stats = fit_norm_stats(&train, &reference)?;
                meta.ref_coeffs = reference.coefficients.clone();
                meta.energy_mean = stats.energy_mean;
                meta.energy_std = stats.energy_std;
                meta.force_rms = stats.force_rms;
                TargetFit::EnergyForce { reference, stats }
            }
            Some(name) => {
                let (reference, stats) =
                    fit_scalar_target_reference(&train, name, dref.scalar_atomwise)?;
                if let Some(r) = &reference {
                    meta.ref_coeffs = r.coefficients.clone();
                }
                meta.energy_mean = stats.energy_mean;
                meta.energy_std = stats.energy_std;
                meta.force_rms = stats.force_rms;
                TargetFit::Scalar {
                    name: name.clone(),
                    reference,
                    stats,
                }
            }
        };
        // One multiplier pair per dataset: energies at 1, forces at the mean
        // atom count, so both terms land on a comparable scale.
        meta.lambda_e = 1.0;
        meta.lambda_f = meta.mean_atoms;
        let (em, fm) = match dref.margins {
            Some(class) => {
                let (e, f) = class.margins();
                (Some(e), Some(f))
            }
            None => (None, None),
        };
        meta.energy_margin = em;
        meta.force_margin = fm;
        train.meta = meta.clone();
        out.push(FittedDataset {
            meta,
            fit,
            train,
            val,
        });
    }
    Ok(out)
}

/// Radius graphs for every train and val system, built once per run. The
/// graph cutoff is the model's basis cutoff.
pub struct GraphCache {
    pub train: Vec<Vec<Graph>>,
    pub val: Vec<Vec<Graph>>,
}

pub fn build_graphs(
    fitted: &[FittedDataset],
    model: &ModelConfig,
) -> Result<GraphCache, TrainError> {
    let mut train = Vec::with_capacity(fitted.len());
    let mut val = Vec::with_capacity(fitted.len());
    for fd in fitted {
        let mut tg = Vec::with_capacity(fd.train.systems.len());
        for sys in &fd.train.systems {
            tg.push(build_radius_graph(sys, model.rbf_cutoff, model.max_neighbors)?);
        }
        let mut vg = Vec::with_capacity(fd.val.systems.len());
        for sys in &fd.val.systems {
            vg.push(build_radius_graph(sys, model.rbf_cutoff, model.max_neighbors)?);
        }
        train.push(tg);
        val.push(vg);
    }
    Ok(GraphCache { train, val })
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Per-dataset artifacts a checkpoint carries so evaluation needs no access
/// to the original files' statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetArtifacts {
    pub meta: DatasetMeta,
    pub fit: TargetFit,
}

/// A full training snapshot. Saving and loading is bit-exact: the manifest
/// is JSON with round-trip floats, the numeric payload raw little-endian
/// f64 blobs in manifest order.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub heads: HeadSet,
    pub datasets: Vec<DatasetArtifacts>,
    pub params: ParamStore,
    pub opt: OptState,
    pub early: EarlyStopState,
    pub sampler: Option<SamplerState>,
    pub model_rng: RngState,
    pub pcgrad_rng: RngState,
    pub step: u64,
    pub epoch: u64,
    pub mode: RunMode,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    model: ModelConfig,
    heads: HeadSet,
    datasets: Vec<DatasetArtifacts>,
    mode: RunMode,
    step: u64,
    epoch: u64,
    config_hash: String,
    opt_step: u64,
    ema_decay: f64,
    rlp: RlpState,
    early: EarlyStopState,
    sampler: Option<SamplerState>,
    model_rng: RngState,
    pcgrad_rng: RngState,
    params: Vec<ParamEntry>,
}

fn push_f64s(buf: &mut Vec<u8>, data: &[f64]) {
    for x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_f64s(bytes: &[u8], off: &mut usize, n: usize) -> Result<Vec<f64>, TrainError> {
    let need = n * 8;
    let end = off
        .checked_add(need)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| TrainError::Checkpoint("checkpoint truncated".into()))?;
    let out = bytes[*off..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    *off = end;
    Ok(out)
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<(), TrainError> {
    let names: Vec<&String> = ck.params.values().keys().collect();
    let mut entries = Vec::with_capacity(names.len());
    for name in &names {
        let shape = ck
            .params
            .shape(name)
            .ok_or_else(|| TrainError::Checkpoint(format!("missing shape for '{name}'")))?;
        entries.push(ParamEntry {
            name: (*name).clone(),
            shape: shape.to_vec(),
        });
    }
    let manifest = Manifest {
        model: ck.model.clone(),
        heads: ck.heads.clone(),
        datasets: ck.datasets.clone(),
        mode: ck.mode,
        step: ck.step,
        epoch: ck.epoch,
        config_hash: ck.config_hash.clone(),
        opt_step: ck.opt.step,
        ema_decay: ck.opt.ema_decay,
        rlp: ck.opt.rlp.clone(),
        early: ck.early.clone(),
        sampler: ck.sampler.clone(),
        model_rng: ck.model_rng.clone(),
        pcgrad_rng: ck.pcgrad_rng.clone(),
        params: entries,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&manifest_bytes);
    for name in &names {
        push_f64s(&mut buf, &ck.params.values()[*name]);
    }
    for name in &names {
        let m = ck.opt.adam.get(*name).ok_or_else(|| {
            TrainError::Checkpoint(format!("optimizer has no moments for '{name}'"))
        })?;
        push_f64s(&mut buf, &m.m);
    }
    for name in &names {
        push_f64s(&mut buf, &ck.opt.adam[*name].v);
    }
    for name in &names {
        let ema = ck.opt.ema.get(*name).ok_or_else(|| {
            TrainError::Checkpoint(format!("optimizer has no shadow weights for '{name}'"))
        })?;
        push_f64s(&mut buf, ema);
    }
    fs::write(path.as_ref(), buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, TrainError> {
    let bytes = fs::read(path.as_ref())?;
    if bytes.len() < 16 {
        return Err(TrainError::Checkpoint("checkpoint truncated".into()));
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(TrainError::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::Checkpoint(format!(
            "checkpoint format version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let manifest_end = 16usize
        .checked_add(manifest_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| TrainError::Checkpoint("checkpoint truncated".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..manifest_end])?;
    let mut off = manifest_end;
    let mut params = ParamStore::default();
    for e in &manifest.params {
        let numel: usize = e.shape.iter().product();
        let data = read_f64s(&bytes, &mut off, numel)?;
        params.insert(&e.name, e.shape.clone(), data)?;
    }
    let mut adam = BTreeMap::new();
    for e in &manifest.params {
        let numel: usize = e.shape.iter().product();
        let m = read_f64s(&bytes, &mut off, numel)?;
        adam.insert(e.name.clone(), m);
    }
    let mut moments = BTreeMap::new();
    for e in &manifest.params {
        let numel: usize = e.shape.iter().product();
        let v = read_f64s(&bytes, &mut off, numel)?;
        let m = adam.remove(&e.name).expect("first-moment pass");
        moments.insert(e.name.clone(), crate::optim::AdamMoments { m, v });
    }
    let mut ema = BTreeMap::new();
    for e in &manifest.params {
        let numel: usize = e.shape.iter().product();
        ema.insert(e.name.clone(), read_f64s(&bytes, &mut off, numel)?);
    }
    if off != bytes.len() {
        return Err(TrainError::Checkpoint(format!(
            "checkpoint has {} unexpected trailing bytes",
            bytes.len() - off
        )));
    }
    Ok(Checkpoint {
        model: manifest.model,
        heads: manifest.heads,
        datasets: manifest.datasets,
        params,
        opt: OptState {
            step: manifest.opt_step,
            adam: moments,
            ema,
            ema_decay: manifest.ema_decay,
            rlp: manifest.rlp,
        },
        early: manifest.early,
        sampler: manifest.sampler,
        model_rng: manifest.model_rng,
        pcgrad_rng: manifest.pcgrad_rng,
        step: manifest.step,
        epoch: manifest.epoch,
        mode: manifest.mode,
        config_hash: manifest.config_hash,
    })
}

/// Append-only CSV of run metrics, one row per observation.
pub struct MetricsLog {
    path: PathBuf,
    file: std::io::BufWriter<fs::File>,
}

impl MetricsLog {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, TrainError> {
        let path = path.into();
        let fresh = !path.exists();
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)?;
        let mut file = std::io::BufWriter::new(file);
        if fresh {
            writeln!(file, "step,epoch,dataset_id,split,metric,value")?;
        }
        Ok(MetricsLog { path, file })
    }

    pub fn log(
        &mut self,
        step: u64,
        epoch: u64,
        dataset_id: &str,
        split: &str,
        metric: &str,
        value: f64,
    ) -> Result<(), TrainError> {
        writeln!(
            self.file,
            "{step},{epoch},{dataset_id},{split},{metric},{value}"
        )?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), TrainError> {
        self.file.flush()?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// What a finished run hands back.
#[derive(Debug)]
pub struct RunArtifacts {
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub stop: StopReason,
    /// Validation metric the stop decision saw last (mean over datasets of
    /// each one's primary metric, in normalized units).
    pub final_metric: f64,
    pub epochs_run: u64,
    pub steps_run: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Task {
    EnergyForce,
    Scalar,
}

/// Resolved per-run training plan: the head set, loss weights, optional
/// gating spec (margins already in normalized units), and flags.
struct Plan {
    heads: HeadSet,
    task: Task,
    force_source: ForceMode,
    weights: LossWeights,
    threshold: Option<ThresholdSpec>,
    pcgrad: bool,
    form: ErrorForm,
}

impl Plan {
    fn energy_head(&self, id: &str) -> Result<&HeadSpec, TrainError> {
        self.heads
            .get(id, &TargetKind::Energy)
            .ok_or_else(|| TrainError::Config(format!("no energy head for '{id}'")))
    }

    fn force_head(&self, id: &str) -> Result<&HeadSpec, TrainError> {
        self.heads
            .get(id, &TargetKind::DirectForce)
            .ok_or_else(|| TrainError::Config(format!("no force head for '{id}'")))
    }

    fn scalar_head(&self, id: &str, name: &str) -> Result<&HeadSpec, TrainError> {
        self.heads
            .get(id, &TargetKind::Scalar(name.to_string()))
            .ok_or_else(|| TrainError::Config(format!("no scalar head for '{id}'")))
    }
}

fn build_plan(config: &RunConfig, fitted: &[FittedDataset]) -> Result<Plan, TrainError> {
    let force_source = config.resolved_force_mode();
    let scalar = fitted
        .iter()
        .any(|f| matches!(f.fit, TargetFit::Scalar { .. }));
    let mut specs = Vec::new();
    for fd in fitted {
        let id = &fd.meta.dataset_id;
        match &fd.fit {
            TargetFit::EnergyForce { .. } => {
                specs.push(HeadSpec::energy(id));
                if force_source == ForceMode::Direct {
                    specs.push(HeadSpec::direct_force(id));
                }
            }
            TargetFit::Scalar { name, .. } => {
                specs.push(HeadSpec::scalar(id, name, Pooling::Mean));
            }
        }
    }
    let heads = HeadSet::new(specs)?;
    let weights = LossWeights::new(
        fitted
            .iter()
            .map(|f| (f.meta.lambda_e, f.meta.lambda_f))
            .collect(),
    )?;
    let threshold = if config.loss.gated {
        let mut per_dataset = Vec::with_capacity(fitted.len());
        for fd in fitted {
            let TargetFit::EnergyForce { stats, .. } = &fd.fit else {
                return Err(TrainError::Config(
                    "threshold gating applies to energy-force training only".into(),
                ));
            };
            let (Some(em), Some(fm)) = (fd.meta.energy_margin, fd.meta.force_margin) else {
                return Err(TrainError::Config(format!(
                    "dataset '{}' has no margins for gating",
                    fd.meta.dataset_id
                )));
            };
            // Margins are physical; the loss sees normalized errors.
            per_dataset.push(Some((em / stats.energy_std, fm / stats.force_rms)));
        }
        Some(ThresholdSpec::new(per_dataset)?)
    } else {
        None
    };
    Ok(Plan {
        heads,
        task: if scalar { Task::Scalar } else { Task::EnergyForce },
        force_source,
        weights,
        threshold,
        pcgrad: config.loss.pcgrad,
        form: config.loss.form,
    })
}

struct LoopState {
    params: ParamStore,
    opt: OptState,
    early: EarlyStopState,
    sampler: Sampler,
    model_rng: ChaCha8Rng,
    pcgrad_rng: ChaCha8Rng,
    step: u64,
    epoch: u64,
}

const MODEL_RNG_STREAM: u64 = 101;
const PCGRAD_RNG_STREAM: u64 = 102;

fn fresh_state(
    config: &RunConfig,
    fitted: &[FittedDataset],
    params: ParamStore,
) -> Result<LoopState, TrainError> {
    let sizes: Vec<usize> = fitted.iter().map(|f| f.train.systems.len()).collect();
    let spec = MixSpec::new(
        sizes,
        config.mixture.temperature,
        config.mixture.batch_size,
        config.seed,
    )?;
    let opt = OptState::new(params.values(), config.optim.ema_decay)?;
    let mut model_rng = ChaCha8Rng::seed_from_u64(config.seed);
    model_rng.set_stream(MODEL_RNG_STREAM);
    let mut pcgrad_rng = ChaCha8Rng::seed_from_u64(config.seed);
    pcgrad_rng.set_stream(PCGRAD_RNG_STREAM);
    Ok(LoopState {
        params,
        opt,
        early: EarlyStopState::default(),
        sampler: Sampler::new(spec),
        model_rng,
        pcgrad_rng,
        step: 0,
        epoch: 0,
    })
}

/// 0/1 selectors for one dataset's systems (per system) and atoms (per
/// atom). Multiplying a head's full-batch output by these keeps foreign
/// systems at exactly zero, gradients included.
fn dataset_masks(batch: &Batch, d: usize) -> (Vec<f64>, Vec<f64>) {
    let energy: Vec<f64> = batch
        .dataset_idx
        .iter()
        .map(|&x| if x == d { 1.0 } else { 0.0 })
        .collect();
    let mut force = Vec::with_capacity(batch.n_atoms());
    for &s in &batch.batch_idx {
        force.push(if batch.dataset_idx[s] == d { 1.0 } else { 0.0 });
    }
    (energy, force)
}

fn energy_force_targets(
    fitted: &[FittedDataset],
    batch: &Batch,
) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    let mut e = vec![0.0; batch.n_systems()];
    let mut f = vec![0.0; batch.n_atoms() * 3];
    for (bi, sys) in batch.systems.iter().enumerate() {
        let fd = &fitted[batch.dataset_idx[bi]];
        let TargetFit::EnergyForce { reference, stats } = &fd.fit else {
            return Err(TrainError::Config(format!(
                "dataset '{}' is not fitted for energy-force training",
                fd.meta.dataset_id
            )));
        };
        let (en, fo) = normalize_labels(sys, reference, stats)?;
        e[bi] = en;
        let fo = fo.ok_or_else(|| {
            TrainError::Config(format!("system '{}' carries no forces", sys.id))
        })?;
        for (row, a) in fo.iter().zip(batch.node_range(bi)) {
            f[a * 3..a * 3 + 3].copy_from_slice(row);
        }
    }
    Ok((e, f))
}

/// Build the step's loss on the tape. Returns the total plus, when gradient
/// surgery is on and several datasets are present, one loss per dataset
/// whose masked terms sum back to the total.
fn build_losses(
    config: &RunConfig,
    fitted: &[FittedDataset],
    plan: &Plan,
    batch: &Batch,
    gb: &GraphBatch,
    tp: &TapedParams,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<Tensor>), TrainError> {
    let tape = tp.tape();
    let b = batch.n_systems();
    let n = batch.n_atoms();
    let present: BTreeSet<usize> = batch.dataset_idx.iter().copied().collect();
    let shape = BatchShape::from_batch(batch);
    match plan.task {
        Task::EnergyForce => {
            let mut e_pred = tape.constant(Value::zeros(&[b]));
            let mut f_pred = tape.constant(Value::zeros(&[n, 3]));
            match plan.force_source {
                ForceMode::Direct => {
                    let emb = encode(batch, gb, tp, &config.model, Mode::Train, rng)?;
                    for &d in &present {
                        let id = &fitted[d].meta.dataset_id;
                        let e_d = predict_energy(&emb, gb, tp, plan.energy_head(id)?)?;
                        let f_d = predict_forces_direct(&emb, gb, tp, plan.force_head(id)?)?;
                        let (em, am) = dataset_masks(batch, d);
                        e_pred = e_pred.add(&e_d.mul(&tape.constant(Value::new(vec![b], em)?))?)?;
                        f_pred =
                            f_pred.add(&f_d.mul(&tape.constant(Value::new(vec![n, 1], am)?))?)?;
                    }
                }
                ForceMode::Gradient => {
                    // Each dataset's pass differentiates its own energy head,
                    // so the encode runs inside the call.
                    for &d in &present {
                        let id = &fitted[d].meta.dataset_id;
                        let (e_d, f_d) = predict_forces_gradient(
                            batch,
                            gb,
                            tp,
                            &config.model,
                            plan.energy_head(id)?,
                            Mode::Train,
                            rng,
                        )?;
                        let (em, am) = dataset_masks(batch, d);
                        e_pred = e_pred.add(&e_d.mul(&tape.constant(Value::new(vec![b], em)?))?)?;
                        f_pred =
                            f_pred.add(&f_d.mul(&tape.constant(Value::new(vec![n, 1], am)?))?)?;
                    }
                }
            }
            let (e_t, f_t) = energy_force_targets(fitted, batch)?;
            let e_tgt = tape.constant(Value::new(vec![b], e_t)?);
            let f_tgt = tape.constant(Value::new(vec![n, 3], f_t)?);
            let gate = match &plan.threshold {
                Some(spec) => Some(threshold_masks(
                    &e_pred, &f_pred, &e_tgt, &f_tgt, &shape, spec,
                )?),
                None => None,
            };
            let total = match &gate {
                Some(g) => swl_loss_masked(
                    &e_pred,
                    &f_pred,
                    &e_tgt,
                    &f_tgt,
                    &shape,
                    &plan.weights,
                    plan.form,
                    g,
                )?,
                None => swl_loss(
                    &e_pred,
                    &f_pred,
                    &e_tgt,
                    &f_tgt,
                    &shape,
                    &plan.weights,
                    plan.form,
                )?,
            };
            let mut tasks = Vec::new();
            if plan.pcgrad && present.len() > 1 {
                for &d in &present {
                    let (em, am) = dataset_masks(batch, d);
                    let masks = match &gate {
                        Some(g) => LossMasks {
                            energy: em.iter().zip(&g.energy).map(|(a, b)| a * b).collect(),
                            force: am.iter().zip(&g.force).map(|(a, b)| a * b).collect(),
                        },
                        None => LossMasks {
                            energy: em,
                            force: am,
                        },
                    };
                    tasks.push(swl_loss_masked(
                        &e_pred,
                        &f_pred,
                        &e_tgt,
                        &f_tgt,
                        &shape,
                        &plan.weights,
                        plan.form,
                        &masks,
                    )?);
                }
            }
            Ok((total, tasks))
        }
        Task::Scalar => {
            let emb = encode(batch, gb, tp, &config.model, Mode::Train, rng)?;
            let mut pred = tape.constant(Value::zeros(&[b]));
            for &d in &present {
                let fd = &fitted[d];
                let TargetFit::Scalar { name, .. } = &fd.fit else {
                    return Err(TrainError::Config(format!(
                        "dataset '{}' is not fitted for a scalar target",
                        fd.meta.dataset_id
                    )));
                };
                let head = plan.scalar_head(&fd.meta.dataset_id, name)?;
                let p = predict_energy(&emb, gb, tp, head)?;
                let (em, _) = dataset_masks(batch, d);
                pred = pred.add(&p.mul(&tape.constant(Value::new(vec![b], em)?))?)?;
            }
            let mut tgt = vec![0.0; b];
            for (bi, sys) in batch.systems.iter().enumerate() {
                let fd = &fitted[batch.dataset_idx[bi]];
                let TargetFit::Scalar {
                    name,
                    reference,
                    stats,
                } = &fd.fit
                else {
                    unreachable!("scalar task over non-scalar dataset");
                };
                tgt[bi] = normalize_scalar(sys, name, reference.as_ref(), stats)?;
            }
            let loss = scalar_mae(&pred, &tape.constant(Value::new(vec![b], tgt)?))?;
            Ok((loss, Vec::new()))
        }
    }
}

fn flatten(grads: &BTreeMap<String, Vec<f64>>) -> Vec<f64> {
    grads.values().flat_map(|v| v.iter().copied()).collect()
}

fn unflatten(
    flat: &[f64],
    like: &BTreeMap<String, Vec<f64>>,
) -> Result<BTreeMap<String, Vec<f64>>, TrainError> {
    let mut out = BTreeMap::new();
    let mut off = 0;
    for (name, v) in like {
        let end = off + v.len();
        if end > flat.len() {
            return Err(TrainError::Config("gradient vector too short".into()));
        }
        out.insert(name.clone(), flat[off..end].to_vec());
        off = end;
    }
    if off != flat.len() {
        return Err(TrainError::Config("gradient vector too long".into()));
    }
    Ok(out)
}

fn train_step(
    config: &RunConfig,
    fitted: &[FittedDataset],
    cache: &GraphCache,
    plan: &Plan,
    schedule: &Schedule,
    state: &mut LoopState,
) -> Result<f64, TrainError> {
    let picks = state.sampler.next_batch();
    let mut systems = Vec::with_capacity(picks.len());
    let mut didx = Vec::with_capacity(picks.len());
    let mut grefs = Vec::with_capacity(picks.len());
    for &(d, i) in &picks {
        systems.push(&fitted[d].train.systems[i]);
        didx.push(d);
        grefs.push(&cache.train[d][i]);
    }
    let batch = collate(systems, didx)?;
    let gb = GraphBatch::collate(&grefs)?;
    let (loss_val, mut grads) = {
        let tape = Tape::new();
        let tp = TapedParams::new(&tape, &state.params);
        let (total, tasks) =
            build_losses(config, fitted, plan, &batch, &gb, &tp, &mut state.model_rng)?;
        let loss_val = total.item();
        if !loss_val.is_finite() {
            return Err(TrainError::NonFinite(format!(
                "loss at step {}",
                state.step
            )));
        }
        let grads = if tasks.len() > 1 {
            let mut flats = Vec::with_capacity(tasks.len());
            for t in &tasks {
                let g = t.backward()?;
                flats.push(flatten(&tp.gradients(&g)?));
            }
            let merged = pcgrad(&flats, &mut state.pcgrad_rng)?;
            unflatten(&merged, state.params.values())?
        } else {
            tp.gradients(&total.backward()?)?
        };
        (loss_val, grads)
    };
    if let Some(c) = config.optim.clip_norm {
        clip_gradients(&mut grads, c);
    }
    let step = state.step;
    let rlp = state.opt.rlp.clone();
    let lr_of = move |name: &str| schedule.lr_at(step, &layer_group(name), &rlp);
    let mut flat = state.params.flat();
    adamw_step(
        &mut flat,
        &grads,
        &mut state.opt,
        &lr_of,
        config.optim.beta1,
        config.optim.beta2,
        config.optim.weight_decay,
    )?;
    state.params.assign(&flat)?;
    ema_update(&mut state.opt, &flat);
    Ok(loss_val)
}

struct ValScores {
    energy_mae: f64,
    force_mae: Option<f64>,
    scalar_mae: Option<f64>,
    /// What the plateau and stop rules watch for this dataset.
    primary: f64,
}

fn validate_dataset(
    config: &RunConfig,
    plan: &Plan,
    fd: &FittedDataset,
    graphs: &[Graph],
    params: &ParamStore,
) -> Result<ValScores, TrainError> {
    let bs = config.mixture.batch_size;
    let id = &fd.meta.dataset_id;
    let mut e_sum = 0.0;
    let mut f_sum = 0.0;
    let mut s_sum = 0.0;
    let mut n_sys = 0usize;
    let mut n_atoms = 0usize;
    // Eval mode draws nothing from this.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let total = fd.val.systems.len();
    let mut start = 0;
    while start < total {
        let end = (start + bs).min(total);
        let systems: Vec<&AtomicSystem> = fd.val.systems[start..end].iter().collect();
        let grefs: Vec<&Graph> = graphs[start..end].iter().collect();
        let k = systems.len();
        let batch = collate(systems, vec![0; k])?;
        let gb = GraphBatch::collate(&grefs)?;
        let tape = Tape::new();
        let tp = TapedParams::new(&tape, params);
        match &fd.fit {
            TargetFit::EnergyForce { reference, stats } => {
                let (e_pred, f_pred) = match plan.force_source {
                    ForceMode::Direct => {
                        let emb = encode(&batch, &gb, &tp, &config.model, Mode::Eval, &mut rng)?;
                        (
                            predict_energy(&emb, &gb, &tp, plan.energy_head(id)?)?,
                            predict_forces_direct(&emb, &gb, &tp, plan.force_head(id)?)?,
                        )
                    }
                    ForceMode::Gradient => predict_forces_gradient(
                        &batch,
                        &gb,
                        &tp,
                        &config.model,
                        plan.energy_head(id)?,
                        Mode::Eval,
                        &mut rng,
                    )?,
                };
                let ep = e_pred.data().to_vec();
                let fp = f_pred.data().to_vec();
                for (bi, sys) in batch.systems.iter().enumerate() {
                    let (e_t, f_t) = normalize_labels(sys, reference, stats)?;
                    e_sum += (ep[bi] - e_t).abs();
                    n_sys += 1;
                    let f_t = f_t.ok_or_else(|| {
                        TrainError::Config(format!("system '{}' carries no forces", sys.id))
                    })?;
                    for (row, a) in f_t.iter().zip(batch.node_range(bi)) {
                        let dx = fp[a * 3] - row[0];
                        let dy = fp[a * 3 + 1] - row[1];
                        let dz = fp[a * 3 + 2] - row[2];
                        f_sum += (dx * dx + dy * dy + dz * dz).sqrt();
                        n_atoms += 1;
                    }
                }
            }
            TargetFit::Scalar {
                name,
                reference,
                stats,
            } => {
                let emb = encode(&batch, &gb, &tp, &config.model, Mode::Eval, &mut rng)?;
                let pred = predict_energy(&emb, &gb, &tp, plan.scalar_head(id, name)?)?;
                let pv = pred.data().to_vec();
                for (bi, sys) in batch.systems.iter().enumerate() {
                    let t = normalize_scalar(sys, name, reference.as_ref(), stats)?;
                    s_sum += (pv[bi] - t).abs();
                    n_sys += 1;
                }
            }
        }
        start = end;
    }
    match &fd.fit {
        TargetFit::EnergyForce { .. } => {
            let energy_mae = e_sum / n_sys as f64;
            let force_mae = f_sum / n_atoms as f64;
            Ok(ValScores {
                energy_mae,
                force_mae: Some(force_mae),
                scalar_mae: None,
                primary: force_mae,
            })
        }
        TargetFit::Scalar { .. } => {
            let scalar_mae = s_sum / n_sys as f64;
            Ok(ValScores {
                energy_mae: 0.0,
                force_mae: None,
                scalar_mae: Some(scalar_mae),
                primary: scalar_mae,
            })
        }
    }
}

fn validate_all(
    config: &RunConfig,
    plan: &Plan,
    fitted: &[FittedDataset],
    cache: &GraphCache,
    params: &ParamStore,
    metrics: &mut MetricsLog,
    step: u64,
    epoch: u64,
) -> Result<f64, TrainError> {
    let mut primaries = Vec::with_capacity(fitted.len());
    for (d, fd) in fitted.iter().enumerate() {
        let s = validate_dataset(config, plan, fd, &cache.val[d], params)?;
        let id = &fd.meta.dataset_id;
        match &fd.fit {
            TargetFit::EnergyForce { .. } => {
                metrics.log(step, epoch, id, "val", "energy_mae_norm", s.energy_mae)?;
                metrics.log(
                    step,
                    epoch,
                    id,
                    "val",
                    "force_mae_norm",
                    s.force_mae.expect("energy-force scores"),
                )?;
            }
            TargetFit::Scalar { .. } => {
                metrics.log(
                    step,
                    epoch,
                    id,
                    "val",
                    "scalar_mae_norm",
                    s.scalar_mae.expect("scalar scores"),
                )?;
            }
        }
        primaries.push(s.primary);
    }
    Ok(primaries.iter().sum::<f64>() / primaries.len() as f64)
}

fn snapshot(
    state: &LoopState,
    plan: &Plan,
    fitted: &[FittedDataset],
    config: &RunConfig,
    hash: &str,
) -> Checkpoint {
    Checkpoint {
        model: config.model.clone(),
        heads: plan.heads.clone(),
        datasets: fitted
            .iter()
            .map(|f| DatasetArtifacts {
                meta: f.meta.clone(),
                fit: f.fit.clone(),
            })
            .collect(),
        params: state.params.clone(),
        opt: state.opt.clone(),
        early: state.early.clone(),
        sampler: Some(state.sampler.state()),
        model_rng: RngState::capture(&state.model_rng),
        pcgrad_rng: RngState::capture(&state.pcgrad_rng),
        step: state.step,
        epoch: state.epoch,
        mode: config.mode,
        config_hash: hash.to_string(),
    }
}

fn run_loop(
    config: &RunConfig,
    fitted: &[FittedDataset],
    cache: &GraphCache,
    plan: &Plan,
    mut state: LoopState,
    out_dir: &Path,
) -> Result<RunArtifacts, TrainError> {
    fs::create_dir_all(out_dir)?;
    let hash = config_hash(config)?;
    fs::write(out_dir.join("config.toml"), toml::to_string_pretty(config)?)?;
    let steps_per_epoch = state.sampler.spec().steps_per_epoch() as u64;
    let schedule = Schedule::new(config.scheduler.clone(), steps_per_epoch as usize)?;
    // A fresh run starts a fresh log, so rerunning into the same directory
    // reproduces it byte for byte. Only a resume appends.
    let metrics_path = out_dir.join("metrics.csv");
    if state.step == 0 && metrics_path.exists() {
        fs::remove_file(&metrics_path)?;
    }
    let mut metrics = MetricsLog::open(metrics_path)?;
    let started = Instant::now();
    let mut last_good: Option<PathBuf> = None;

    if state.step == 0 {
        // Baseline row so improvement is measurable against the untrained net.
        validate_all(
            config,
            plan,
            fitted,
            cache,
            &state.params,
            &mut metrics,
            0,
            0,
        )?;
    }

    let (stop, final_metric) = loop {
        let step_now = state.step;
        let loss = match train_step(config, fitted, cache, plan, &schedule, &mut state) {
            Ok(l) => l,
            Err(e) if numeric_failure(&e) => {
                metrics.flush()?;
                return Err(TrainError::Aborted {
                    step: step_now,
                    last_good,
                });
            }
            Err(e) => return Err(e),
        };
        state.step += 1;
        metrics.log(state.step, state.epoch, "mix", "train", "loss", loss)?;

        if config.train.checkpoint_every > 0 && state.step % config.train.checkpoint_every == 0 {
            let path = out_dir.join(format!("step_{:08}.ckpt", state.step));
            save_checkpoint(&snapshot(&state, plan, fitted, config, &hash), &path)?;
            last_good = Some(path);
        }

        if state.step % steps_per_epoch == 0 {
            state.epoch += 1;
            let primary = validate_all(
                config,
                plan,
                fitted,
                cache,
                &state.params,
                &mut metrics,
                state.step,
                state.epoch,
            )?;
            rlp_observe(&mut state.opt.rlp, primary, &config.scheduler);
            // Group "" has no layerwise factor, so this is the global rate.
            let lr_now = schedule.lr_at(state.step, "", &state.opt.rlp);
            metrics.log(state.step, state.epoch, "mix", "train", "lr", lr_now)?;
            let elapsed = config
                .early_stop
                .max_seconds
                .map(|_| started.elapsed().as_secs_f64());
            if let Some(reason) = early_stop(
                &mut state.early,
                primary,
                state.epoch,
                lr_now,
                elapsed,
                &config.early_stop,
            ) {
                break (reason, primary);
            }
        }
    };

    let ck = snapshot(&state, plan, fitted, config, &hash);
    let checkpoint_path = out_dir.join("final.ckpt");
    save_checkpoint(&ck, &checkpoint_path)?;
    metrics.flush()?;
    Ok(RunArtifacts {
        checkpoint: ck,
        checkpoint_path,
        metrics_path: metrics.path().to_path_buf(),
        stop,
        final_metric,
        epochs_run: state.epoch,
        steps_run: state.step,
    })
}

/// Joint pre-training over every configured dataset with a fresh network.
pub fn pretrain(config: &RunConfig, out_dir: impl AsRef<Path>) -> Result<RunArtifacts, TrainError> {
    config.validate()?;
    if config.mode != RunMode::Pretrain {
        return Err(TrainError::Config(
            "pretrain called with a fine-tune config".into(),
        ));
    }
    let fitted = prepare_datasets(config)?;
    let cache = build_graphs(&fitted, &config.model)?;
    let plan = build_plan(config, &fitted)?;
    let params = init_model(&config.model, &plan.heads, config.seed)?;
    let state = fresh_state(config, &fitted, params)?;
    run_loop(config, &fitted, &cache, &plan, state, out_dir.as_ref())
}

/// The five knobs that shape parameter tensors must match between a loaded
/// backbone and the fine-tune config; regularization knobs may differ.
fn check_architecture(saved: &ModelConfig, wanted: &ModelConfig) -> Result<(), TrainError> {
    let same = saved.atom_embed_dim == wanted.atom_embed_dim
        && saved.edge_embed_dim == wanted.edge_embed_dim
        && saved.num_blocks == wanted.num_blocks
        && saved.rbf_count == wanted.rbf_count
        && saved.rbf_cutoff == wanted.rbf_cutoff;
    if !same {
        return Err(TrainError::Config(
            "checkpoint backbone architecture differs from the configured model".into(),
        ));
    }
    Ok(())
}

/// Fine-tuning: load a pre-trained backbone (or start fresh for the scratch
/// baseline), swap in new heads, and train the whole network.
pub fn finetune(config: &RunConfig, out_dir: impl AsRef<Path>) -> Result<RunArtifacts, TrainError> {
    config.validate()?;
    if config.mode != RunMode::Finetune {
        return Err(TrainError::Config(
            "finetune called with a pre-train config".into(),
        ));
    }
    let fitted = prepare_datasets(config)?;
    let cache = build_graphs(&fitted, &config.model)?;
    let plan = build_plan(config, &fitted)?;
    let params = match &config.init_checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            check_architecture(&ck.model, &config.model)?;
            swap_heads(&ck.params, &config.model, &plan.heads, config.seed)?
        }
        None => init_model(&config.model, &plan.heads, config.seed)?,
    };
    let state = fresh_state(config, &fitted, params)?;
    run_loop(config, &fitted, &cache, &plan, state, out_dir.as_ref())
}

/// Continue a run from one of its own checkpoints, bit-identically to the
/// uninterrupted run. The config must hash to what the checkpoint recorded.
pub fn resume(
    config: &RunConfig,
    checkpoint: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
) -> Result<RunArtifacts, TrainError> {
    config.validate()?;
    let ck = load_checkpoint(checkpoint.as_ref())?;
    let hash = config_hash(config)?;
    if ck.config_hash != hash {
        return Err(TrainError::Checkpoint(
            "checkpoint belongs to a different run configuration".into(),
        ));
    }
    if ck.mode != config.mode {
        return Err(TrainError::Checkpoint(format!(
            "checkpoint mode {} does not match config mode {}",
            ck.mode, config.mode
        )));
    }
    let fitted = prepare_datasets(config)?;
    let cache = build_graphs(&fitted, &config.model)?;
    let plan = build_plan(config, &fitted)?;
    if plan.heads != ck.heads {
        return Err(TrainError::Checkpoint(
            "checkpoint heads do not match the configured datasets".into(),
        ));
    }
    let sizes: Vec<usize> = fitted.iter().map(|f| f.train.systems.len()).collect();
    let spec = MixSpec::new(
        sizes,
        config.mixture.temperature,
        config.mixture.batch_size,
        config.seed,
    )?;
    let sampler = match &ck.sampler {
        Some(s) => Sampler::restore(spec, s)?,
        None => Sampler::new(spec),
    };
    let state = LoopState {
        params: ck.params.clone(),
        opt: ck.opt.clone(),
        early: ck.early.clone(),
        sampler,
        model_rng: ck.model_rng.restore(),
        pcgrad_rng: ck.pcgrad_rng.restore(),
        step: ck.step,
        epoch: ck.epoch,
    };
    run_loop(config, &fitted, &cache, &plan, state, out_dir.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{generate_synthetic, write_dataset_file, DomainSpec};
    use crate::optim::PhaseLen;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            atom_embed_dim: 12,
            edge_embed_dim: 12,
            num_blocks: 2,
            rbf_count: 6,
            rbf_cutoff: 4.0,
            max_neighbors: 12,
            dropout_p: 0.0,
            edge_dropout_p: 0.0,
            second_order: true,
        }
    }

    fn lj_domain(id: &str, count: usize, epsilon: f64, sigma: f64) -> DomainSpec {
        DomainSpec {
            dataset_id: id.to_string(),
            elements: vec![1, 6],
            count,
            n_min: 3,
            n_max: 5,
            box_side: 6.0,
            epsilon,
            sigma,
            cutoff: 4.0,
        }
    }

    fn write_domain(dir: &Path, id: &str, count: usize, eps: f64, sigma: f64, seed: u64) -> String {
        let ds = generate_synthetic(&lj_domain(id, count, eps, sigma), seed).unwrap();
        let path = dir.join(format!("{id}.jsonl"));
        write_dataset_file(&ds, &path).unwrap();
        path.to_string_lossy().into_owned()
    }

    fn tmpdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "trainer_{tag}_{}_{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .as_nanos()
        ));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn quick_scheduler() -> SchedulerConfig {
        SchedulerConfig {
            base_lr: 1e-3,
            warmup: PhaseLen::Steps(5),
            warmup_factor: 0.2,
            cosine: PhaseLen::Epochs(2.0),
            cosine_final_factor: 0.1,
            plateau_patience: u32::MAX,
            plateau_factor: 1.0,
            llrd_factors: BTreeMap::new(),
        }
    }

    fn quick_pretrain_config(dir: &Path, seed: u64) -> RunConfig {
        let a = write_domain(dir, "dom_a", 40, 0.5, 2.0, 11);
        let b = write_domain(dir, "dom_b", 30, 1.2, 2.2, 12);
        let mut cfg = RunConfig::pretrain_defaults(
            tiny_model(),
            vec![DatasetRef::new("dom_a", a), DatasetRef::new("dom_b", b)],
            seed,
        );
        cfg.mixture.batch_size = 4;
        cfg.scheduler = quick_scheduler();
        cfg.early_stop = EarlyStopConfig {
            patience: u32::MAX,
            max_epochs: 2,
            min_lr: 0.0,
            max_seconds: None,
        };
        cfg
    }

    #[test]
    fn toml_round_trip_rejects_unknown_keys() {
        let dir = tmpdir("toml");
        let cfg = quick_pretrain_config(&dir, 3);
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);

        let bad = format!("{text}\nnot_a_key = 1\n");
        assert!(toml::from_str::<RunConfig>(&bad).is_err());

        let path = dir.join("run.toml");
        fs::write(&path, &text).unwrap();
        let loaded = load_run_config(&path).unwrap();
        assert_eq!(loaded, cfg);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn overrides_walk_tables_and_arrays() {
        let dir = tmpdir("ovr");
        let cfg = quick_pretrain_config(&dir, 3);
        let out = apply_overrides(
            &cfg,
            &[
                ("scheduler.base_lr".into(), "0.5".into()),
                ("mixture.batch_size".into(), "2".into()),
                ("model.num_blocks".into(), "1".into()),
                ("datasets.1.id".into(), "renamed".into()),
                ("loss.form".into(), "squared".into()),
                ("scheduler.warmup.steps".into(), "7".into()),
            ],
        )
        .unwrap();
        assert_eq!(out.scheduler.base_lr, 0.5);
        assert_eq!(out.mixture.batch_size, 2);
        assert_eq!(out.model.num_blocks, 1);
        assert_eq!(out.datasets[1].id, "renamed");
        assert_eq!(out.loss.form, ErrorForm::Squared);
        assert_eq!(out.scheduler.warmup, PhaseLen::Steps(7));

        assert!(apply_overrides(&cfg, &[("no.such.key".into(), "1".into())]).is_err());
        assert!(apply_overrides(&cfg, &[("scheduler.base_lr".into(), "abc".into())]).is_err());
        // An invalid enum string fails when the tree re-deserializes.
        assert!(apply_overrides(&cfg, &[("loss.form".into(), "cubic".into())]).is_err());
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn validate_rejects_mode_conflicts() {
        let dir = tmpdir("val");
        let mut cfg = quick_pretrain_config(&dir, 3);
        cfg.init_checkpoint = Some("x.ckpt".into());
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))));

        let mut cfg = quick_pretrain_config(&dir, 3);
        cfg.train.force_mode = Some(ForceMode::Gradient);
        assert!(cfg.validate().is_err());

        let mut cfg = quick_pretrain_config(&dir, 3);
        cfg.loss.gated = true;
        assert!(cfg.validate().is_err(), "gating without margins");
        cfg.datasets[0].margins = Some(MarginClass::Molecular);
        cfg.datasets[1].margins = Some(MarginClass::Catalysis);
        assert!(cfg.validate().is_ok());

        let mut cfg = quick_pretrain_config(&dir, 3);
        cfg.mode = RunMode::Finetune;
        cfg.model.second_order = false;
        assert!(cfg.validate().is_err(), "gradient forces need second order");
        cfg.train.force_mode = Some(ForceMode::Direct);
        assert!(cfg.validate().is_ok());
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tmpdir("ckpt");
        let cfg = quick_pretrain_config(&dir, 5);
        let fitted = prepare_datasets(&cfg).unwrap();
        let plan = build_plan(&cfg, &fitted).unwrap();
        let params = init_model(&cfg.model, &plan.heads, cfg.seed).unwrap();
        let state = fresh_state(&cfg, &fitted, params).unwrap();
        let hash = config_hash(&cfg).unwrap();
        let ck = snapshot(&state, &plan, &fitted, &cfg, &hash);

        let p1 = dir.join("a.ckpt");
        save_checkpoint(&ck, &p1).unwrap();
        let back = load_checkpoint(&p1).unwrap();
        assert_eq!(back.params.checksum(), ck.params.checksum());
        assert_eq!(back.opt, ck.opt);
        assert_eq!(back.early, ck.early);
        assert_eq!(back.sampler, ck.sampler);
        assert_eq!(back.model_rng, ck.model_rng);
        assert_eq!(back.step, ck.step);
        assert_eq!(back.heads, ck.heads);
        assert_eq!(back.config_hash, ck.config_hash);

        // Save-load-save writes identical bytes.
        let p2 = dir.join("b.ckpt");
        save_checkpoint(&back, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn checkpoint_rejects_damage() {
        let dir = tmpdir("dmg");
        let cfg = quick_pretrain_config(&dir, 5);
        let fitted = prepare_datasets(&cfg).unwrap();
        let plan = build_plan(&cfg, &fitted).unwrap();
        let params = init_model(&cfg.model, &plan.heads, cfg.seed).unwrap();
        let state = fresh_state(&cfg, &fitted, params).unwrap();
        let hash = config_hash(&cfg).unwrap();
        let path = dir.join("x.ckpt");
        save_checkpoint(&snapshot(&state, &plan, &fitted, &cfg, &hash), &path).unwrap();
        let bytes = fs::read(&path).unwrap();

        // Truncated payload.
        fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(TrainError::Checkpoint(_))
        ));

        // Wrong magic.
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        fs::write(&path, &wrong).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(TrainError::Checkpoint(_))
        ));

        // Future format version.
        let mut newer = bytes.clone();
        newer[4..8].copy_from_slice(&2u32.to_le_bytes());
        fs::write(&path, &newer).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"));

        // Trailing garbage.
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0u8; 4]);
        fs::write(&path, &longer).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(TrainError::Checkpoint(_))
        ));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn pretrain_runs_and_logs_both_datasets() {
        let dir = tmpdir("smoke");
        let cfg = quick_pretrain_config(&dir, 7);
        let arts = pretrain(&cfg, dir.join("run")).unwrap();
        assert_eq!(arts.stop, StopReason::MaxEpochs);
        assert_eq!(arts.epochs_run, 2);
        assert!(arts.final_metric.is_finite());

        let csv = fs::read_to_string(&arts.metrics_path).unwrap();
        assert!(csv.starts_with("step,epoch,dataset_id,split,metric,value\n"));
        assert!(csv.contains(",dom_a,val,force_mae_norm,"));
        assert!(csv.contains(",dom_b,val,energy_mae_norm,"));
        assert!(csv.contains(",mix,train,loss,"));

        let ck = load_checkpoint(&arts.checkpoint_path).unwrap();
        assert_eq!(ck.step, arts.steps_run);
        assert_eq!(ck.heads.heads.len(), 4, "energy and force heads per dataset");
        // Config snapshot lands next to the outputs.
        assert!(dir.join("run").join("config.toml").exists());
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let dir = tmpdir("det");
        let cfg = quick_pretrain_config(&dir, 9);
        let a = pretrain(&cfg, dir.join("a")).unwrap();
        let b = pretrain(&cfg, dir.join("b")).unwrap();
        assert_eq!(
            a.checkpoint.params.checksum(),
            b.checkpoint.params.checksum()
        );
        assert_eq!(
            fs::read(&a.checkpoint_path).unwrap(),
            fs::read(&b.checkpoint_path).unwrap()
        );
        let ma = fs::read_to_string(&a.metrics_path).unwrap();
        let mb = fs::read_to_string(&b.metrics_path).unwrap();
        assert_eq!(ma, mb);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tmpdir("resume");
        let mut cfg = quick_pretrain_config(&dir, 13);
        // Mid-run snapshot partway through the first epoch.
        cfg.train.checkpoint_every = 7;
        let full = pretrain(&cfg, dir.join("full")).unwrap();
        let mid = dir.join("full").join(format!("step_{:08}.ckpt", 7));
        assert!(mid.exists());
        let resumed = resume(&cfg, &mid, dir.join("cont")).unwrap();
        assert_eq!(resumed.steps_run, full.steps_run);
        assert_eq!(
            fs::read(&resumed.checkpoint_path).unwrap(),
            fs::read(&full.checkpoint_path).unwrap(),
            "continued run must write the identical final checkpoint"
        );
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn resume_rejects_other_configs() {
        let dir = tmpdir("rhash");
        let mut cfg = quick_pretrain_config(&dir, 13);
        cfg.train.checkpoint_every = 7;
        pretrain(&cfg, dir.join("run")).unwrap();
        let mid = dir.join("run").join(format!("step_{:08}.ckpt", 7));
        let mut other = cfg.clone();
        other.scheduler.base_lr *= 2.0;
        let err = resume(&other, &mid, dir.join("cont")).unwrap_err();
        assert!(matches!(err, TrainError::Checkpoint(_)));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn nan_abort_reports_last_checkpoint() {
        let dir = tmpdir("nan");
        let cfg = quick_pretrain_config(&dir, 15);
        let arts = pretrain(&cfg, dir.join("run")).unwrap();
        let mut ck = load_checkpoint(&arts.checkpoint_path).unwrap();
        // Explode the embedding so the forward pass overflows immediately.
        let huge: Vec<f64> = vec![1e200; ck.params.values()["embed.table"].len()];
        ck.params.set_data("embed.table", huge).unwrap();
        let bad = dir.join("bad.ckpt");
        save_checkpoint(&ck, &bad).unwrap();
        let err = resume(&cfg, &bad, dir.join("cont")).unwrap_err();
        match err {
            TrainError::Aborted { step, .. } => assert_eq!(step, ck.step),
            other => panic!("expected abort, got {other}"),
        }
        fs::remove_dir_all(&dir).ok();
    }

    fn quick_finetune_config(dir: &Path, init: Option<String>, seed: u64) -> RunConfig {
        let c = write_domain(dir, "dom_c", 30, 0.9, 2.1, 21);
        let mut cfg = RunConfig::finetune_defaults(
            tiny_model(),
            vec![DatasetRef::new("dom_c", c)],
            init,
            seed,
        );
        cfg.mixture.batch_size = 4;
        cfg.scheduler = quick_scheduler();
        cfg.early_stop = EarlyStopConfig {
            patience: u32::MAX,
            max_epochs: 1,
            min_lr: 0.0,
            max_seconds: None,
        };
        cfg
    }

    #[test]
    fn finetune_swaps_heads_on_pretrained_backbone() {
        let dir = tmpdir("ft");
        let pre_cfg = quick_pretrain_config(&dir, 17);
        let pre = pretrain(&pre_cfg, dir.join("pre")).unwrap();

        let cfg = quick_finetune_config(
            &dir,
            Some(pre.checkpoint_path.to_string_lossy().into_owned()),
            18,
        );
        let arts = finetune(&cfg, dir.join("ft")).unwrap();
        let heads = &arts.checkpoint.heads.heads;
        assert_eq!(heads.len(), 1, "gradient mode needs only the energy head");
        assert_eq!(heads[0].dataset_id, "dom_c");
        assert_eq!(heads[0].kind, TargetKind::Energy);
        assert!(arts.final_metric.is_finite());
        // The whole backbone trains, not just the heads.
        let pre_embed = &pre.checkpoint.params.values()["embed.table"];
        let post_embed = &arts.checkpoint.params.values()["embed.table"];
        assert_ne!(pre_embed, post_embed);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn finetune_rejects_architecture_mismatch() {
        let dir = tmpdir("arch");
        let pre_cfg = quick_pretrain_config(&dir, 19);
        let pre = pretrain(&pre_cfg, dir.join("pre")).unwrap();
        let mut cfg = quick_finetune_config(
            &dir,
            Some(pre.checkpoint_path.to_string_lossy().into_owned()),
            20,
        );
        cfg.model.atom_embed_dim = 16;
        let err = finetune(&cfg, dir.join("ft")).unwrap_err();
        assert!(matches!(err, TrainError::Config(_)));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn scratch_baseline_trains_without_checkpoint() {
        let dir = tmpdir("scratch");
        let cfg = quick_finetune_config(&dir, None, 23);
        let arts = finetune(&cfg, dir.join("run")).unwrap();
        assert!(arts.final_metric.is_finite());
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn uniform_layer_factors_match_no_factors() {
        let dir = tmpdir("llrd");
        let mut plain = quick_finetune_config(&dir, None, 29);
        plain.train.force_mode = Some(ForceMode::Direct);
        let mut ones = plain.clone();
        let mut factors = BTreeMap::new();
        factors.insert("embedding".to_string(), 1.0);
        factors.insert("heads".to_string(), 1.0);
        for k in 1..=plain.model.num_blocks {
            factors.insert(format!("block_{k}"), 1.0);
        }
        ones.scheduler.llrd_factors = factors;
        let a = finetune(&plain, dir.join("plain")).unwrap();
        let b = finetune(&ones, dir.join("ones")).unwrap();
        assert_eq!(
            a.checkpoint.params.checksum(),
            b.checkpoint.params.checksum(),
            "all-ones layer factors must reproduce the uniform-rate trajectory"
        );
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn scalar_target_finetune_runs_without_forces() {
        let dir = tmpdir("scalar");
        // Synthetic systems carry energies and forces; graft a scalar on top
        // and strip the rest to prove nothing needs them.
        let spec = lj_domain("gapped", 30, 0.8, 2.0);
        let mut ds = generate_synthetic(&spec, 31).unwrap();
        for (i, sys) in ds.systems.iter_mut().enumerate() {
            sys.scalars.insert("gap".into(), 0.1 * (i % 7) as f64);
            sys.energy = None;
            sys.forces = None;
        }
        ds.schema.energy = false;
        ds.schema.forces = false;
        ds.schema.scalars = vec!["gap".into()];
        let path = dir.join("gapped.jsonl");
        write_dataset_file(&ds, &path).unwrap();

        let mut dref = DatasetRef::new("gapped", path.to_string_lossy().into_owned());
        dref.scalar_target = Some("gap".into());
        let mut cfg =
            RunConfig::finetune_defaults(tiny_model(), vec![dref], None, 32);
        cfg.mixture.batch_size = 4;
        cfg.scheduler = quick_scheduler();
        cfg.early_stop = EarlyStopConfig {
            patience: u32::MAX,
            max_epochs: 1,
            min_lr: 0.0,
            max_seconds: None,
        };
        let arts = finetune(&cfg, dir.join("run")).unwrap();
        assert_eq!(arts.checkpoint.heads.heads.len(), 1);
        assert_eq!(
            arts.checkpoint.heads.heads[0].kind,
            TargetKind::Scalar("gap".into())
        );
        let csv = fs::read_to_string(&arts.metrics_path).unwrap();
        assert!(csv.contains(",gapped,val,scalar_mae_norm,"));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn pcgrad_path_stays_deterministic() {
        let dir = tmpdir("pcg");
        let mut cfg = quick_pretrain_config(&dir, 37);
        cfg.loss.pcgrad = true;
        let a = pretrain(&cfg, dir.join("a")).unwrap();
        let b = pretrain(&cfg, dir.join("b")).unwrap();
        assert_eq!(
            a.checkpoint.params.checksum(),
            b.checkpoint.params.checksum()
        );
        // Surgery changes the trajectory relative to plain summation.
        let mut plain = cfg.clone();
        plain.loss.pcgrad = false;
        let c = pretrain(&plain, dir.join("c")).unwrap();
        assert_ne!(
            a.checkpoint.params.checksum(),
            c.checkpoint.params.checksum()
        );
        fs::remove_dir_all(&dir).ok();
    }
}
