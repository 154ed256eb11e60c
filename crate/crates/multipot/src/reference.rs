//! Per-dataset energy referencing and label normalization.
//!
//! Referencing subtracts a least-squares per-element baseline from total
//! energies so residuals are comparable across systems; the residuals are then
//! normalized to a unit Gaussian, and forces are divided by the corpus RMS
//! force component. Everything is fitted on the train split only; fitted
//! models are immutable, so applying them to val/test can never leak.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::{Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::ingest::Dataset;
use crate::system::AtomicSystem;

/// Statistics are never allowed to collapse below this.
pub const STD_FLOOR: f64 = 1e-8;

/// Tikhonov damping on the normal-equation diagonal; handles rank deficiency
/// such as two elements that always co-occur in fixed ratio.
const RIDGE: f64 = 1e-10;

#[derive(Debug, thiserror::Error)]
pub enum ReferenceError {
    #[error("fit error: {0}")]
    Fit(String),
    #[error("system {id} has no {what} label")]
    Label { id: String, what: String },
    #[error("normalization statistics are unfitted")]
    State,
}

/// Least-squares per-element baseline, in eV per atom of each element.
/// Elements absent from the fit have no entry and contribute zero on apply
/// (with a one-time warning per element per dataset).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceModel {
    pub coefficients: BTreeMap<u32, f64>,
    pub fitted_on: String,
    pub residual_rms: f64,
}

/// Unit-Gaussian statistics of referenced energies plus the pooled RMS force
/// component. Both floored at [`STD_FLOOR`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub energy_mean: f64,
    pub energy_std: f64,
    pub force_rms: f64,
}

impl NormStats {
    fn check(&self) -> Result<(), ReferenceError> {
        if self.energy_std >= STD_FLOOR && self.force_rms >= STD_FLOOR {
            Ok(())
        } else {
            Err(ReferenceError::State)
        }
    }
}

/// Solves the symmetric positive system (A + ridge*I) x = b by Gaussian
/// elimination with partial pivoting. At most 118 unknowns, so no fancier
/// machinery is warranted.
fn solve_damped(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>, ReferenceError> {
    let n = b.len();
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += RIDGE;
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-300 {
            return Err(ReferenceError::Fit("singular normal equations".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut s = b[col];
        for k in (col + 1)..n {
            s -= a[col][k] * x[k];
        }
        x[col] = s / a[col][col];
    }
    Ok(x)
}

/// Fits per-element coefficients minimizing sum_s (y_s - sum_z c_z n_z(s))^2
/// over the provided (system, value) pairs.
fn fit_composition_ls(
    pairs: &[(&AtomicSystem, f64)],
    fitted_on: &str,
) -> Result<ReferenceModel, ReferenceError> {
    if pairs.is_empty() {
        return Err(ReferenceError::Fit(format!(
            "no labeled systems in {fitted_on}"
        )));
    }
    let elements: Vec<u32> = pairs
        .iter()
        .flat_map(|(s, _)| s.numbers.iter().copied())
        .collect::<BTreeSet<u32>>()
        .into_iter()
        .collect();
    let col: BTreeMap<u32, usize> = elements.iter().enumerate().map(|(i, &z)| (z, i)).collect();
    let m = elements.len();

    // Normal equations accumulated directly; the design matrix never exists.
    let mut ata = vec![vec![0.0; m]; m];
    let mut atb = vec![0.0; m];
    let mut counts = vec![0.0; m];
    for (sys, y) in pairs {
        counts.iter_mut().for_each(|c| *c = 0.0);
        for &z in &sys.numbers {
            counts[col[&z]] += 1.0;
        }
        for i in 0..m {
            if counts[i] == 0.0 {
                continue;
            }
            atb[i] += counts[i] * y;
            for j in 0..m {
                ata[i][j] += counts[i] * counts[j];
            }
        }
    }
    let solution = solve_damped(ata, atb)?;
    let coefficients: BTreeMap<u32, f64> = elements
        .iter()
        .zip(&solution)
        .map(|(&z, &c)| (z, c))
        .collect();

    let mut sq = 0.0;
    for (sys, y) in pairs {
        let baseline: f64 = sys.numbers.iter().map(|z| coefficients[z]).sum();
        sq += (y - baseline) * (y - baseline);
    }
    Ok(ReferenceModel {
        coefficients,
        fitted_on: fitted_on.to_string(),
        residual_rms: (sq / pairs.len() as f64).sqrt(),
    })
}

/// Fits the per-element energy baseline of a training split.
pub fn fit_linear_reference(train: &Dataset) -> Result<ReferenceModel, ReferenceError> {
    let pairs: Vec<(&AtomicSystem, f64)> = train
        .systems
        .iter()
        .filter_map(|s| s.energy.map(|e| (s, e)))
        .collect();
    fit_composition_ls(&pairs, &train.meta.dataset_id)
}

fn warn_once_missing(dataset: &str, z: u32) {
    static SEEN: OnceLock<Mutex<HashSet<(String, u32)>>> = OnceLock::new();
    let seen = SEEN.get_or_init(|| Mutex::new(HashSet::new()));
    let mut seen = seen.lock().unwrap();
    if seen.insert((dataset.to_string(), z)) {
        log::warn!(
            "dataset {dataset}: element {z} has no reference coefficient, using 0"
        );
    }
}

/// The composition baseline sum_z c_z n_z of one system. Elements without a
/// coefficient contribute zero.
pub fn composition_baseline(system: &AtomicSystem, model: &ReferenceModel) -> f64 {
    let mut total = 0.0;
    for &z in &system.numbers {
        match model.coefficients.get(&z) {
            Some(c) => total += c,
            None => warn_once_missing(&model.fitted_on, z),
        }
    }
    total
}

/// Referenced energy: the labeled energy minus the composition baseline.
pub fn reference_energy(
    system: &AtomicSystem,
    model: &ReferenceModel,
) -> Result<f64, ReferenceError> {
    let e = system.energy.ok_or_else(|| ReferenceError::Label {
        id: system.id.clone(),
        what: "energy".into(),
    })?;
    Ok(e - composition_baseline(system, model))
}

fn floored(value: f64, what: &str, dataset: &str) -> f64 {
    if value < STD_FLOOR {
        log::warn!("dataset {dataset}: degenerate {what} {value:.3e}, floored to {STD_FLOOR:.0e}");
        STD_FLOOR
    } else {
        value
    }
}

/// Population statistics (divisor n) of the referenced train energies, plus
/// the RMS force component pooled over all atoms and all three axes.
pub fn fit_norm_stats(
    train: &Dataset,
    model: &ReferenceModel,
) -> Result<NormStats, ReferenceError> {
    let mut refs = Vec::with_capacity(train.len());
    for sys in &train.systems {
        if sys.energy.is_some() {
            refs.push(reference_energy(sys, model)?);
        }
    }
    if refs.is_empty() {
        return Err(ReferenceError::Fit(format!(
            "no labeled systems in {}",
            train.meta.dataset_id
        )));
    }
    let n = refs.len() as f64;
    let mean = refs.iter().sum::<f64>() / n;
    let var = refs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    let std = floored(var.sqrt(), "energy std", &train.meta.dataset_id);

    let mut sq = 0.0;
    let mut count = 0usize;
    for sys in &train.systems {
        if let Some(forces) = &sys.forces {
            for f in forces {
                sq += f[0] * f[0] + f[1] * f[1] + f[2] * f[2];
                count += 3;
            }
        }
    }
    // Datasets without force labels keep the identity scale.
    let force_rms = if count == 0 {
        1.0
    } else {
        floored((sq / count as f64).sqrt(), "force rms", &train.meta.dataset_id)
    };
    Ok(NormStats {
        energy_mean: mean,
        energy_std: std,
        force_rms,
    })
}

/// Normalized labels of one system: dimensionless energy, and forces when the
/// system has them.
pub fn normalize_labels(
    system: &AtomicSystem,
    model: &ReferenceModel,
    stats: &NormStats,
) -> Result<(f64, Option<Vec<[f64; 3]>>), ReferenceError> {
    stats.check()?;
    let e_norm = (reference_energy(system, model)? - stats.energy_mean) / stats.energy_std;
    let f_norm = system.forces.as_ref().map(|forces| {
        forces
            .iter()
            .map(|f| {
                [
                    f[0] / stats.force_rms,
                    f[1] / stats.force_rms,
                    f[2] / stats.force_rms,
                ]
            })
            .collect()
    });
    Ok((e_norm, f_norm))
}

/// Exact inverse of [`normalize_labels`], re-adding the composition baseline.
/// Returns (energy in eV, forces in eV per angstrom).
pub fn denormalize_prediction(
    system: &AtomicSystem,
    e_norm: f64,
    f_norm: Option<&[[f64; 3]]>,
    model: &ReferenceModel,
    stats: &NormStats,
) -> Result<(f64, Option<Vec<[f64; 3]>>), ReferenceError> {
    stats.check()?;
    let energy = e_norm * stats.energy_std + stats.energy_mean + composition_baseline(system, model);
    let forces = f_norm.map(|rows| {
        rows.iter()
            .map(|f| {
                [
                    f[0] * stats.force_rms,
                    f[1] * stats.force_rms,
                    f[2] * stats.force_rms,
                ]
            })
            .collect()
    });
    Ok((energy, forces))
}

/// Fits normalization for a named scalar target. With `atomwise` a per-element
/// linear reference is removed first (extensive targets); otherwise the target
/// is Gaussian-normalized as is.
pub fn fit_scalar_target_reference(
    train: &Dataset,
    target: &str,
    atomwise: bool,
) -> Result<(Option<ReferenceModel>, NormStats), ReferenceError> {
    let mut pairs = Vec::with_capacity(train.len());
    for sys in &train.systems {
        let v = sys.scalars.get(target).ok_or_else(|| ReferenceError::Label {
            id: sys.id.clone(),
            what: format!("scalar {target}"),
        })?;
        pairs.push((sys, *v));
    }
    if pairs.is_empty() {
        return Err(ReferenceError::Fit(format!("no systems carry {target}")));
    }
    let model = if atomwise {
        Some(fit_composition_ls(&pairs, &train.meta.dataset_id)?)
    } else {
        None
    };
    let residuals: Vec<f64> = pairs
        .iter()
        .map(|(sys, v)| match &model {
            Some(m) => v - composition_baseline(sys, m),
            None => *v,
        })
        .collect();
    let n = residuals.len() as f64;
    let mean = residuals.iter().sum::<f64>() / n;
    let var = residuals.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    let std = floored(var.sqrt(), &format!("{target} std"), &train.meta.dataset_id);
    Ok((
        model,
        NormStats {
            energy_mean: mean,
            energy_std: std,
            force_rms: 1.0,
        },
    ))
}

/// Normalized value of a scalar target.
pub fn normalize_scalar(
    system: &AtomicSystem,
    target: &str,
    model: Option<&ReferenceModel>,
    stats: &NormStats,
) -> Result<f64, ReferenceError> {
    stats.check()?;
    let v = system.scalars.get(target).ok_or_else(|| ReferenceError::Label {
        id: system.id.clone(),
        what: format!("scalar {target}"),
    })?;
    let referenced = match model {
        Some(m) => v - composition_baseline(system, m),
        None => *v,
    };
    Ok((referenced - stats.energy_mean) / stats.energy_std)
}

/// Exact inverse of [`normalize_scalar`].
pub fn denormalize_scalar(
    system: &AtomicSystem,
    v_norm: f64,
    model: Option<&ReferenceModel>,
    stats: &NormStats,
) -> Result<f64, ReferenceError> {
    stats.check()?;
    let referenced = v_norm * stats.energy_std + stats.energy_mean;
    Ok(match model {
        Some(m) => referenced + composition_baseline(system, m),
        None => referenced,
    })
}
