//! Training losses over mixed-dataset batches.
//!
//! The structure-wise reduction averages the force error inside each system
//! first, then weights systems by their dataset's multipliers, so a 200-atom
//! slab and a 4-atom molecule pull on the objective with comparable strength.
//! The naive reduction (kept for ablations) pools all atoms of the batch into
//! one average, which lets large systems dominate. Threshold gating zeroes
//! contributions already inside a per-dataset error margin.

use serde::{Deserialize, Serialize};
use tapegrad::{Tensor, Value};

use crate::system::{Batch, DatasetMeta};

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("loss weights: {0}")]
    Weight(String),
    #[error("threshold config: {0}")]
    Config(String),
    #[error("loss shapes: {0}")]
    Shape(String),
    #[error(transparent)]
    Tape(#[from] tapegrad::Error),
}

/// Distance applied to the per-system energy error and per-atom force norm.
/// `Absolute` is the default; `Squared` replaces |e| with e^2 and the force
/// norm with its square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorForm {
    #[default]
    Absolute,
    Squared,
}

/// Per-dataset loss multipliers, indexed by dataset id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// (energy, force) multiplier per dataset.
    pub per_dataset: Vec<(f64, f64)>,
}

impl LossWeights {
    pub fn new(per_dataset: Vec<(f64, f64)>) -> Result<Self, LossError> {
        for (d, &(le, lf)) in per_dataset.iter().enumerate() {
            if !(le > 0.0 && le.is_finite() && lf > 0.0 && lf.is_finite()) {
                return Err(LossError::Weight(format!(
                    "dataset {d}: multipliers ({le}, {lf}) must be positive and finite"
                )));
            }
        }
        Ok(LossWeights { per_dataset })
    }

    pub fn uniform(n_datasets: usize) -> Self {
        LossWeights {
            per_dataset: vec![(1.0, 1.0); n_datasets],
        }
    }

    fn get(&self, dataset: usize) -> Result<(f64, f64), LossError> {
        self.per_dataset.get(dataset).copied().ok_or_else(|| {
            LossError::Weight(format!(
                "dataset index {dataset} out of range ({} configured)",
                self.per_dataset.len()
            ))
        })
    }
}

/// Energy multiplier 1, force multiplier = mean atom count of the dataset's
/// train split. That scale keeps the per-system force term commensurate with
/// the energy term across very different system sizes.
pub fn default_weights(metas: &[DatasetMeta]) -> LossWeights {
    LossWeights {
        per_dataset: metas.iter().map(|m| (1.0, m.mean_atoms)).collect(),
    }
}

/// Batch layout the loss needs: who owns each system and each atom.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchShape {
    /// Per-system dataset id, length B.
    pub dataset_idx: Vec<usize>,
    /// Per-atom owning system, length N.
    pub batch_idx: Vec<usize>,
    atom_counts: Vec<usize>,
}

impl BatchShape {
    pub fn new(dataset_idx: Vec<usize>, batch_idx: Vec<usize>) -> Result<Self, LossError> {
        if dataset_idx.is_empty() {
            return Err(LossError::Shape("batch has no systems".into()));
        }
        let b = dataset_idx.len();
        let mut atom_counts = vec![0usize; b];
        for &s in &batch_idx {
            if s >= b {
                return Err(LossError::Shape(format!(
                    "atom assigned to system {s}, batch has {b}"
                )));
            }
            atom_counts[s] += 1;
        }
        if let Some(empty) = atom_counts.iter().position(|&c| c == 0) {
            return Err(LossError::Shape(format!("system {empty} has no atoms")));
        }
        Ok(BatchShape {
            dataset_idx,
            batch_idx,
            atom_counts,
        })
    }

    pub fn from_batch(batch: &Batch) -> Self {
        BatchShape {
            dataset_idx: batch.dataset_idx.clone(),
            batch_idx: batch.batch_idx.clone(),
            atom_counts: batch.atom_counts.clone(),
        }
    }

    pub fn n_systems(&self) -> usize {
        self.dataset_idx.len()
    }

    pub fn n_atoms(&self) -> usize {
        self.batch_idx.len()
    }

    pub fn atom_counts(&self) -> &[usize] {
        &self.atom_counts
    }
}

/// Keep/drop factors from threshold gating: one per system for the energy
/// term, one per atom for the force term. Entries are exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMasks {
    pub energy: Vec<f64>,
    pub force: Vec<f64>,
}

impl LossMasks {
    /// Masks that keep everything.
    pub fn keep_all(shape: &BatchShape) -> Self {
        LossMasks {
            energy: vec![1.0; shape.n_systems()],
            force: vec![1.0; shape.n_atoms()],
        }
    }
}

/// Error margins per dataset id, in the units of the tensors fed to the
/// loss. `None` marks a dataset with no configured margins; gating a batch
/// that contains it is a configuration error. The energy gate compares the
/// total energy error of a system, not a per-atom one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    /// (energy_margin, force_margin) per dataset.
    pub per_dataset: Vec<Option<(f64, f64)>>,
}

/// Margins for small-molecule energies and forces, in eV and eV/Å. Divide by
/// the normalization constants before gating normalized errors.
pub const MOLECULAR_MARGINS: (f64, f64) = (0.043, 0.01);
/// Margins for adsorption/catalysis data, in eV and eV/Å.
pub const CATALYSIS_MARGINS: (f64, f64) = (0.1, 0.03);

impl ThresholdSpec {
    pub fn new(per_dataset: Vec<Option<(f64, f64)>>) -> Result<Self, LossError> {
        for (d, m) in per_dataset.iter().enumerate() {
            if let Some((e, f)) = m {
                if !(*e >= 0.0 && e.is_finite() && *f >= 0.0 && f.is_finite()) {
                    return Err(LossError::Config(format!(
                        "dataset {d}: margins ({e}, {f}) must be nonnegative and finite"
                    )));
                }
            }
        }
        Ok(ThresholdSpec { per_dataset })
    }

    fn get(&self, dataset: usize) -> Result<(f64, f64), LossError> {
        self.per_dataset
            .get(dataset)
            .copied()
            .flatten()
            .ok_or_else(|| {
                LossError::Config(format!("no margins configured for dataset {dataset}"))
            })
    }
}

fn check_shapes(
    e_pred: &Tensor,
    f_pred: &Tensor,
    e_tgt: &Tensor,
    f_tgt: &Tensor,
    shape: &BatchShape,
) -> Result<(), LossError> {
    let b = shape.n_systems();
    let n = shape.n_atoms();
    for (name, t, want) in [
        ("energy predictions", e_pred, vec![b]),
        ("energy targets", e_tgt, vec![b]),
        ("force predictions", f_pred, vec![n, 3]),
        ("force targets", f_tgt, vec![n, 3]),
    ] {
        if t.shape() != want.as_slice() {
            return Err(LossError::Shape(format!(
                "{name}: shape {:?}, batch needs {want:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

/// Constant per-system and per-atom weight vectors that fold together the
/// 1/B prefactor, the dataset multipliers, the per-system 1/N_b force
/// average, and any gating masks.
fn weight_vectors(
    shape: &BatchShape,
    weights: &LossWeights,
    masks: Option<&LossMasks>,
) -> Result<(Vec<f64>, Vec<f64>), LossError> {
    let b = shape.n_systems() as f64;
    let mut w_energy = Vec::with_capacity(shape.n_systems());
    for (s, &d) in shape.dataset_idx.iter().enumerate() {
        let (le, _) = weights.get(d)?;
        let m = masks.map_or(1.0, |m| m.energy[s]);
        w_energy.push(le * m / b);
    }
    let mut w_force = Vec::with_capacity(shape.n_atoms());
    for (i, &s) in shape.batch_idx.iter().enumerate() {
        let (_, lf) = weights.get(shape.dataset_idx[s])?;
        let m = masks.map_or(1.0, |m| m.force[i]);
        w_force.push(lf * m / (b * shape.atom_counts[s] as f64));
    }
    Ok((w_energy, w_force))
}

fn energy_distance(e_pred: &Tensor, e_tgt: &Tensor, form: ErrorForm) -> tapegrad::Result<Tensor> {
    let diff = e_pred.sub(e_tgt)?;
    match form {
        ErrorForm::Absolute => diff.abs(),
        ErrorForm::Squared => diff.square(),
    }
}

fn force_distance(f_pred: &Tensor, f_tgt: &Tensor, form: ErrorForm) -> tapegrad::Result<Tensor> {
    let diff = f_pred.sub(f_tgt)?;
    match form {
        ErrorForm::Absolute => diff.norm_rows(),
        ErrorForm::Squared => diff.square()?.sum_axis(1),
    }
}

fn swl_parts_inner(
    e_pred: &Tensor,
    f_pred: &Tensor,
    e_tgt: &Tensor,
    f_tgt: &Tensor,
    shape: &BatchShape,
    weights: &LossWeights,
    form: ErrorForm,
    masks: Option<&LossMasks>,
) -> Result<(Tensor, Tensor), LossError> {
    check_shapes(e_pred, f_pred, e_tgt, f_tgt, shape)?;
    if let Some(m) = masks {
        if m.energy.len() != shape.n_systems() || m.force.len() != shape.n_atoms() {
            return Err(LossError::Shape("mask lengths do not fit the batch".into()));
        }
    }
    let (w_energy, w_force) = weight_vectors(shape, weights, masks)?;
    let tape = e_pred.tape();
    let we = tape.constant(Value::vector(w_energy));
    let wf = tape.constant(Value::vector(w_force));
    let energy = energy_distance(e_pred, e_tgt, form)?.mul(&we)?.sum_all()?;
    let force = force_distance(f_pred, f_tgt, form)?.mul(&wf)?.sum_all()?;
    Ok((energy, force))
}

/// Structure-wise loss: energy term (1/B) Σ_b λ_E |ΔE_b|, force term
/// (1/B) Σ_b λ_F (1/N_b) Σ_{i in b} ‖ΔF_i‖, with λs taken per dataset.
/// Inputs are expected in normalized units. Returns energy + force.
pub fn swl_loss(
    e_pred: &Tensor,
    f_pred: &Tensor,
    e_tgt: &Tensor,
    f_tgt: &Tensor,
    shape: &BatchShape,
    weights: &LossWeights,
    form: ErrorForm,
) -> Result<Tensor, LossError> {
    let (e, f) = swl_loss_parts(e_pred, f_pred, e_tgt, f_tgt, shape, weights, form)?;
    Ok(e.add(&f)?)
}

/// Energy and force terms of the structure-wise loss, separately, for
/// logging and per-term diagnostics.
pub fn swl_loss_parts(
    e_pred: &Tensor,
    f_pred: &Tensor,
    e_tgt: &Tensor,
    f_tgt: &Tensor,
    shape: &BatchShape,
    weights: &LossWeights,
    form: ErrorForm,
) -> Result<(Tensor, Tensor), LossError> {
    swl_parts_inner(e_pred, f_pred, e_tgt, f_tgt, shape, weights, form, None)
}

/// Structure-wise loss with gating masks folded in. Denominators stay those
/// of the full batch; masked systems and atoms contribute exactly zero.
pub fn swl_loss_masked(
    e_pred: &Tensor,
    f_pred: &Tensor,
    e_tgt: &Tensor,
    f_tgt: &Tensor,
    shape: &BatchShape,
    weights: &LossWeights,
    form: ErrorForm,
    masks: &LossMasks,
) -> Result<Tensor, LossError> {
    let (e, f) = swl_parts_inner(
        e_pred,
        f_pred,
        e_tgt,
        f_tgt,
        shape,
        weights,
        form,
        Some(masks),
    )?;
    Ok(e.add(&f)?)
}

/// Atom-pooled reduction kept for ablations: the energy term matches the
/// structure-wise one, but the force term averages every atom of the batch
/// together, λ_F (1/Σ N_b) Σ_i ‖ΔF_i‖, with one shared λ_F. All datasets
/// present in the batch must therefore carry the same force multiplier.
pub fn naive_loss(
    e_pred: &Tensor,
    f_pred: &Tensor,
    e_tgt: &Tensor,
    f_tgt: &Tensor,
    shape: &BatchShape,
    weights: &LossWeights,
    form: ErrorForm,
) -> Result<Tensor, LossError> {
    check_shapes(e_pred, f_pred, e_tgt, f_tgt, shape)?;
    let mut global_lf: Option<f64> = None;
    for &d in &shape.dataset_idx {
        let (_, lf) = weights.get(d)?;
        match global_lf {
            None => global_lf = Some(lf),
            Some(prev) if prev != lf => {
                return Err(LossError::Weight(format!(
                    "atom-pooled reduction needs one shared force multiplier, got {prev} and {lf}"
                )));
            }
            Some(_) => {}
        }
    }
    let lf = global_lf.expect("batch is non-empty");
    let b = shape.n_systems() as f64;
    let w_energy: Vec<f64> = shape
        .dataset_idx
        .iter()
        .map(|&d| weights.get(d).map(|(le, _)| le / b))
        .collect::<Result<_, _>>()?;
    let tape = e_pred.tape();
    let we = tape.constant(Value::vector(w_energy));
    let energy = energy_distance(e_pred, e_tgt, form)?.mul(&we)?.sum_all()?;
    let scale = lf / shape.n_atoms() as f64;
    let force = force_distance(f_pred, f_tgt, form)?
        .sum_all()?
        .mul_scalar(scale)?;
    Ok(energy.add(&force)?)
}

/// Gate decisions from current prediction values: keep a system's energy
/// contribution only when |ΔE| is at or beyond its dataset's energy margin,
/// and an atom's force contribution only when ‖ΔF‖ is at or beyond the force
/// margin. Margins of zero keep everything.
pub fn threshold_masks(
    e_pred: &Tensor,
    f_pred: &Tensor,
    e_tgt: &Tensor,
    f_tgt: &Tensor,
    shape: &BatchShape,
    spec: &ThresholdSpec,
) -> Result<LossMasks, LossError> {
    check_shapes(e_pred, f_pred, e_tgt, f_tgt, shape)?;
    let mut energy = Vec::with_capacity(shape.n_systems());
    for (s, &d) in shape.dataset_idx.iter().enumerate() {
        let (e_margin, _) = spec.get(d)?;
        let err = (e_pred.data()[s] - e_tgt.data()[s]).abs();
        energy.push(if err >= e_margin { 1.0 } else { 0.0 });
    }
    let fp = f_pred.data();
    let ft = f_tgt.data();
    let mut force = Vec::with_capacity(shape.n_atoms());
    for (i, &s) in shape.batch_idx.iter().enumerate() {
        let (_, f_margin) = spec.get(shape.dataset_idx[s])?;
        let norm: f64 = (0..3)
            .map(|c| (fp[i * 3 + c] - ft[i * 3 + c]).powi(2))
            .sum::<f64>()
            .sqrt();
        force.push(if norm >= f_margin { 1.0 } else { 0.0 });
    }
    Ok(LossMasks { energy, force })
}

/// Structure-wise loss with threshold gating: contributions already inside
/// their dataset's margins are dropped. The gate takes the zero subgradient
/// below the margin and the identity above it.
pub fn threshold_wrap(
    e_pred: &Tensor,
    f_pred: &Tensor,
    e_tgt: &Tensor,
    f_tgt: &Tensor,
    shape: &BatchShape,
    weights: &LossWeights,
    spec: &ThresholdSpec,
    form: ErrorForm,
) -> Result<Tensor, LossError> {
    let masks = threshold_masks(e_pred, f_pred, e_tgt, f_tgt, shape, spec)?;
    swl_loss_masked(e_pred, f_pred, e_tgt, f_tgt, shape, weights, form, &masks)
}

/// Mean absolute error over all elements; the fine-tuning loss for scalar
/// targets.
pub fn scalar_mae(pred: &Tensor, tgt: &Tensor) -> Result<Tensor, LossError> {
    if pred.shape() != tgt.shape() {
        return Err(LossError::Shape(format!(
            "scalar_mae: {:?} vs {:?}",
            pred.shape(),
            tgt.shape()
        )));
    }
    Ok(pred.sub(tgt)?.abs()?.mean_all()?)
}

/// Per-row Euclidean distance; the fine-tuning loss for vector targets.
pub fn vector_l2(pred: &Tensor, tgt: &Tensor) -> Result<Tensor, LossError> {
    if pred.shape() != tgt.shape() || pred.shape().len() != 2 {
        return Err(LossError::Shape(format!(
            "vector_l2: {:?} vs {:?}, rank-2 required",
            pred.shape(),
            tgt.shape()
        )));
    }
    Ok(pred.sub(tgt)?.norm_rows()?)
}
