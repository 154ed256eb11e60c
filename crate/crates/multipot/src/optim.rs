//! Optimization stack: AdamW with decoupled weight decay, weight EMA, the
//! composite learning-rate schedule (linear warmup, cosine decay, per-layer
//! factors, reduce-on-plateau), early stopping, and gradient surgery for
//! conflicting tasks.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum OptError {
    #[error("non-finite gradient in parameter '{param}'")]
    NonFiniteGrad { param: String },
    #[error("no gradient supplied for parameter '{param}'")]
    MissingGrad { param: String },
    #[error("parameter '{param}': gradient length {got}, parameter length {want}")]
    ShapeMismatch {
        param: String,
        got: usize,
        want: usize,
    },
    #[error("optimizer: {0}")]
    Invalid(String),
}

/// A schedule phase length, either directly in optimizer steps or in epochs
/// resolved against the run's steps-per-epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseLen {
    Steps(u64),
    Epochs(f64),
}

impl PhaseLen {
    pub fn resolve(&self, steps_per_epoch: usize) -> u64 {
        match *self {
            PhaseLen::Steps(n) => n,
            PhaseLen::Epochs(x) => (x * steps_per_epoch as f64).round() as u64,
        }
    }
}

/// Hyperparameters of the composite learning-rate schedule.
///
/// Warmup runs the rate linearly from `warmup_factor * base_lr * D` to
/// `base_lr * D`, where D is the layer group's entry in `llrd_factors`
/// (1 when absent). Cosine decay then anneals to `cosine_final_factor *
/// base_lr`, the same floor for every layer. After the cosine phase the
/// plateau rule multiplies that floor by `plateau_factor` whenever the
/// validation metric fails to improve for `plateau_patience` epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub base_lr: f64,
    pub warmup: PhaseLen,
    pub warmup_factor: f64,
    pub cosine: PhaseLen,
    pub cosine_final_factor: f64,
    pub plateau_patience: u32,
    pub plateau_factor: f64,
    /// Per layer-group rate factors; empty disables per-layer scaling.
    #[serde(default)]
    pub llrd_factors: BTreeMap<String, f64>,
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), OptError> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(OptError::Invalid(format!(
                "base_lr {} must be positive",
                self.base_lr
            )));
        }
        for (name, f) in [
            ("warmup_factor", self.warmup_factor),
            ("cosine_final_factor", self.cosine_final_factor),
            ("plateau_factor", self.plateau_factor),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(OptError::Invalid(format!("{name} {f} must be in (0, 1]")));
            }
        }
        for (group, d) in &self.llrd_factors {
            if !(*d > 0.0 && *d <= 1.0) {
                return Err(OptError::Invalid(format!(
                    "layer factor for '{group}' is {d}, must be in (0, 1]"
                )));
            }
        }
        Ok(())
    }

    fn factor(&self, group: &str) -> f64 {
        self.llrd_factors.get(group).copied().unwrap_or(1.0)
    }
}

/// Reduce-on-plateau bookkeeping: current multiplicative cut, best metric
/// seen, and the run of non-improving epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlpState {
    pub factor: f64,
    pub best: Option<f64>,
    pub bad_epochs: u32,
}

impl Default for RlpState {
    fn default() -> Self {
        RlpState {
            factor: 1.0,
            best: None,
            bad_epochs: 0,
        }
    }
}

/// Strict-improvement plateau rule: after `plateau_patience` consecutive
/// non-improving validation epochs, multiply the rate by `plateau_factor`
/// and restart the count. Call once per validation epoch in the plateau
/// phase.
pub fn rlp_observe(state: &mut RlpState, val_metric: f64, config: &SchedulerConfig) {
    let improved = state.best.is_none_or(|b| val_metric < b);
    if improved {
        state.best = Some(val_metric);
        state.bad_epochs = 0;
        return;
    }
    state.bad_epochs += 1;
    if state.bad_epochs >= config.plateau_patience {
        state.factor *= config.plateau_factor;
        state.bad_epochs = 0;
    }
}

/// A schedule with its phase lengths resolved to optimizer steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub config: SchedulerConfig,
    warmup_steps: u64,
    cosine_steps: u64,
}

impl Schedule {
    pub fn new(config: SchedulerConfig, steps_per_epoch: usize) -> Result<Self, OptError> {
        config.validate()?;
        if steps_per_epoch == 0 {
            return Err(OptError::Invalid("steps_per_epoch must be >= 1".into()));
        }
        let warmup_steps = config.warmup.resolve(steps_per_epoch);
        let cosine_steps = config.cosine.resolve(steps_per_epoch);
        Ok(Schedule {
            config,
            warmup_steps,
            cosine_steps,
        })
    }

    pub fn warmup_steps(&self) -> u64 {
        self.warmup_steps
    }

    pub fn cosine_steps(&self) -> u64 {
        self.cosine_steps
    }

    /// True once the warmup and cosine phases are exhausted and the plateau
    /// rule owns the rate.
    pub fn in_plateau_phase(&self, step: u64) -> bool {
        step >= self.warmup_steps + self.cosine_steps
    }

    /// Learning rate at an optimizer step for one layer group.
    ///
    /// Phases are continuous: warmup ends at `base_lr * D`, which is where
    /// the cosine starts; the cosine ends at `cosine_final_factor * base_lr`,
    /// which is where the plateau phase starts (factor 1).
    pub fn lr_at(&self, step: u64, group: &str, rlp: &RlpState) -> f64 {
        let a = self.config.base_lr;
        let d = self.config.factor(group);
        let floor = self.config.cosine_final_factor * a;
        if step < self.warmup_steps {
            let t = step as f64 / self.warmup_steps as f64;
            let fw = self.config.warmup_factor;
            return a * d * (fw + (1.0 - fw) * t);
        }
        let s = step - self.warmup_steps;
        if s < self.cosine_steps {
            let t = s as f64 / self.cosine_steps as f64;
            return floor + (a * d - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        }
        floor * rlp.factor
    }
}

/// Factor for the bottom of the network.
pub const LLRD_EMBEDDING_FACTOR: f64 = 0.30;
/// Per-block factors at the reference depth of four; other depths resample
/// this shape.
pub const LLRD_BLOCK_REFERENCE: [f64; 4] = [0.35, 0.40, 0.55, 0.625];

/// Layer-group rate factors for a backbone of `n_blocks` message-passing
/// blocks: the embedding lowest, blocks rising with depth (the final block
/// always at the reference top), heads at 1.
pub fn llrd_factors(n_blocks: usize) -> BTreeMap<String, f64> {
    let mut map = BTreeMap::new();
    map.insert("embedding".to_string(), LLRD_EMBEDDING_FACTOR);
    let table = &LLRD_BLOCK_REFERENCE;
    let top = table.len() - 1;
    for k in 0..n_blocks {
        let f = if n_blocks == 1 {
            table[top]
        } else {
            // Linear resample of the reference shape over the block axis.
            let pos = k as f64 * top as f64 / (n_blocks - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            table[lo] + (table[hi] - table[lo]) * (pos - lo as f64)
        };
        map.insert(format!("block_{}", k + 1), f);
    }
    map.insert("heads".to_string(), 1.0);
    map
}

/// First and second moment buffers for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Mutable optimizer state: moments, step count, EMA shadow weights, and the
/// plateau bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub step: u64,
    pub adam: BTreeMap<String, AdamMoments>,
    pub ema: BTreeMap<String, Vec<f64>>,
    pub ema_decay: f64,
    pub rlp: RlpState,
}

impl OptState {
    /// Fresh state: zero moments, shadow weights equal to the parameters.
    pub fn new(params: &BTreeMap<String, Vec<f64>>, ema_decay: f64) -> Result<Self, OptError> {
        if !(0.0..1.0).contains(&ema_decay) {
            return Err(OptError::Invalid(format!(
                "ema_decay {ema_decay} must be in [0, 1)"
            )));
        }
        let adam = params
            .iter()
            .map(|(k, p)| {
                (
                    k.clone(),
                    AdamMoments {
                        m: vec![0.0; p.len()],
                        v: vec![0.0; p.len()],
                    },
                )
            })
            .collect();
        let ema = params.clone();
        Ok(OptState {
            step: 0,
            adam,
            ema,
            ema_decay,
            rlp: RlpState::default(),
        })
    }
}

/// One AdamW step with decoupled weight decay and bias correction. The
/// learning rate may differ per parameter (keyed by name); the update is
/// deterministic for fixed inputs.
pub fn adamw_step(
    params: &mut BTreeMap<String, Vec<f64>>,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut OptState,
    lr_of: &dyn Fn(&str) -> f64,
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
) -> Result<(), OptError> {
    let t = state.step + 1;
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).ok_or_else(|| OptError::MissingGrad {
            param: name.clone(),
        })?;
        if g.len() != p.len() {
            return Err(OptError::ShapeMismatch {
                param: name.clone(),
                got: g.len(),
                want: p.len(),
            });
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(OptError::NonFiniteGrad {
                param: name.clone(),
            });
        }
        let moments = state
            .adam
            .get_mut(name)
            .ok_or_else(|| OptError::Invalid(format!("no optimizer state for '{name}'")))?;
        let lr = lr_of(name);
        for i in 0..p.len() {
            moments.m[i] = beta1 * moments.m[i] + (1.0 - beta1) * g[i];
            moments.v[i] = beta2 * moments.v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = moments.m[i] / bc1;
            let v_hat = moments.v[i] / bc2;
            p[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * p[i]);
        }
    }
    state.step = t;
    Ok(())
}

/// Fold the current parameters into the EMA shadow:
/// shadow <- d * shadow + (1 - d) * params.
pub fn ema_update(state: &mut OptState, params: &BTreeMap<String, Vec<f64>>) {
    let d = state.ema_decay;
    for (name, shadow) in state.ema.iter_mut() {
        if let Some(p) = params.get(name) {
            for (s, &x) in shadow.iter_mut().zip(p) {
                *s = d * *s + (1.0 - d) * x;
            }
        }
    }
}

/// Scale all gradients so their joint L2 norm does not exceed `max_norm`.
/// Returns the norm before clipping. Off by default in every preset.
pub fn clip_gradients(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm: f64 = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Project one task's gradient against the others in the given order:
/// whenever it conflicts (negative dot product), remove the component along
/// the other task's original gradient.
fn project_conflicts(i: usize, task_grads: &[Vec<f64>], order: &[usize]) -> Vec<f64> {
    let mut g = task_grads[i].clone();
    for &j in order {
        let gj = &task_grads[j];
        let nj = dot(gj, gj);
        if nj == 0.0 {
            continue;
        }
        let d = dot(&g, gj);
        if d < 0.0 {
            let scale = d / nj;
            for (x, &y) in g.iter_mut().zip(gj) {
                *x -= scale * y;
            }
        }
    }
    g
}

/// Gradient surgery for conflicting tasks: each task's gradient drops its
/// components that oppose the other tasks' original gradients (visited in a
/// seeded random order), and the projected gradients are summed. Zero-norm
/// task gradients are skipped.
pub fn pcgrad(task_grads: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Result<Vec<f64>, OptError> {
    let Some(first) = task_grads.first() else {
        return Err(OptError::Invalid("no task gradients".into()));
    };
    let len = first.len();
    if task_grads.iter().any(|g| g.len() != len) {
        return Err(OptError::Invalid(
            "task gradients must have equal lengths".into(),
        ));
    }
    if task_grads.len() == 1 {
        return Ok(first.clone());
    }
    let mut combined = vec![0.0; len];
    for i in 0..task_grads.len() {
        if dot(&task_grads[i], &task_grads[i]) == 0.0 {
            continue;
        }
        let mut order: Vec<usize> = (0..task_grads.len()).filter(|&j| j != i).collect();
        order.shuffle(rng);
        let g = project_conflicts(i, task_grads, &order);
        for (c, x) in combined.iter_mut().zip(g) {
            *c += x;
        }
    }
    Ok(combined)
}

/// Stopping rules for fine-tuning runs. The wall-clock limit has no default;
/// set it explicitly when needed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopConfig {
    /// Epochs without validation improvement before stopping.
    pub patience: u32,
    pub max_epochs: u64,
    pub min_lr: f64,
    #[serde(default)]
    pub max_seconds: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub best: Option<f64>,
    pub bad_epochs: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    NoImprovement,
    MaxEpochs,
    LrFloor,
    WallClock,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StopReason::NoImprovement => write!(f, "no validation improvement within patience"),
            StopReason::MaxEpochs => write!(f, "epoch limit reached"),
            StopReason::LrFloor => write!(f, "learning rate below floor"),
            StopReason::WallClock => write!(f, "wall-clock limit reached"),
        }
    }
}

/// Record one validation epoch and decide whether to stop: no improvement
/// for `patience` epochs, the epoch limit, the learning-rate floor, or the
/// optional wall-clock limit.
pub fn early_stop(
    state: &mut EarlyStopState,
    val_metric: f64,
    epoch: u64,
    lr: f64,
    elapsed_seconds: Option<f64>,
    config: &EarlyStopConfig,
) -> Option<StopReason> {
    if state.best.is_none_or(|b| val_metric < b) {
        state.best = Some(val_metric);
        state.bad_epochs = 0;
    } else {
        state.bad_epochs += 1;
    }
    if state.bad_epochs >= config.patience {
        return Some(StopReason::NoImprovement);
    }
    if epoch >= config.max_epochs {
        return Some(StopReason::MaxEpochs);
    }
    if lr < config.min_lr {
        return Some(StopReason::LrFloor);
    }
    if let (Some(limit), Some(used)) = (config.max_seconds, elapsed_seconds) {
        if used >= limit {
            return Some(StopReason::WallClock);
        }
    }
    None
}

/// AdamW and EMA constants that pair with a scheduler preset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

/// Named schedule presets. `n_blocks` sizes the per-layer factor map for the
/// fine-tuning presets; the others ignore it.
pub fn scheduler_preset(name: &str, n_blocks: usize) -> Option<SchedulerConfig> {
    let cfg = match name {
        "pretrain-default" => SchedulerConfig {
            base_lr: 2e-4,
            warmup: PhaseLen::Steps(2000),
            warmup_factor: 0.2,
            cosine: PhaseLen::Epochs(2.0),
            cosine_final_factor: 0.1,
            plateau_patience: u32::MAX,
            plateau_factor: 1.0,
            llrd_factors: BTreeMap::new(),
        },
        "finetune-default" => SchedulerConfig {
            base_lr: 8e-5,
            warmup: PhaseLen::Epochs(5.0),
            warmup_factor: 0.1,
            cosine: PhaseLen::Epochs(32.0),
            cosine_final_factor: 0.1,
            plateau_patience: 5,
            plateau_factor: 0.1,
            llrd_factors: llrd_factors(n_blocks),
        },
        // Tiny train sets decay longer and lower.
        "finetune-rmd17" => SchedulerConfig {
            cosine: PhaseLen::Epochs(128.0),
            cosine_final_factor: 1e-2,
            ..scheduler_preset("finetune-default", n_blocks)?
        },
        "scratch-baseline" => SchedulerConfig {
            base_lr: 2e-4,
            warmup: PhaseLen::Steps(0),
            warmup_factor: 1.0,
            cosine: PhaseLen::Steps(0),
            cosine_final_factor: 1.0,
            plateau_patience: 3,
            plateau_factor: 0.8,
            llrd_factors: BTreeMap::new(),
        },
        _ => return None,
    };
    Some(cfg)
}

pub fn optim_preset(name: &str) -> Option<OptimHyper> {
    let h = match name {
        "pretrain-default" | "finetune-default" | "finetune-rmd17" => OptimHyper {
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            ema_decay: 0.99,
            clip_norm: None,
        },
        "scratch-baseline" => OptimHyper {
            weight_decay: 0.01,
            ..optim_preset("pretrain-default")?
        },
        _ => return None,
    };
    Some(h)
}

pub fn early_stop_preset(name: &str) -> Option<EarlyStopConfig> {
    let cfg = match name {
        "pretrain-default" => EarlyStopConfig {
            patience: u32::MAX,
            max_epochs: 2,
            min_lr: 0.0,
            max_seconds: None,
        },
        "finetune-default" | "scratch-baseline" => EarlyStopConfig {
            patience: 50,
            max_epochs: 500,
            min_lr: 1e-8,
            max_seconds: None,
        },
        "finetune-rmd17" => EarlyStopConfig {
            patience: 1000,
            max_epochs: 100_000,
            min_lr: 1e-8,
            max_seconds: None,
        },
        _ => return None,
    };
    Some(cfg)
}
