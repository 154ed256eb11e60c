//! Core domain types: atomic systems, dataset metadata, batches, compositions.
//!
//! Everything here is immutable after construction and safe to share across
//! threads. Positions and labels are f64 throughout; finite-difference force
//! checks need the headroom.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub const MAX_ATOMIC_NUMBER: u32 = 118;

#[derive(Debug, thiserror::Error)]
pub enum SystemError {
    #[error("system {id}: {msg}")]
    InvalidSystem { id: String, msg: String },
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
}

/// One labeled structure: atomic numbers, positions, optional periodic cell,
/// optional energy/forces, and named scalar targets.
///
/// `cell` rows are lattice vectors in angstrom. `cell` is present iff any
/// `pbc` flag is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicSystem {
    pub id: String,
    pub numbers: Vec<u32>,
    pub positions: Vec<[f64; 3]>,
    pub cell: Option<[[f64; 3]; 3]>,
    pub pbc: [bool; 3],
    pub energy: Option<f64>,
    pub forces: Option<Vec<[f64; 3]>>,
    pub scalars: BTreeMap<String, f64>,
}

impl AtomicSystem {
    /// Builds an unlabeled system and checks the structural invariants.
    pub fn new(
        id: impl Into<String>,
        numbers: Vec<u32>,
        positions: Vec<[f64; 3]>,
        cell: Option<[[f64; 3]; 3]>,
        pbc: [bool; 3],
    ) -> Result<Self, SystemError> {
        let sys = AtomicSystem {
            id: id.into(),
            numbers,
            positions,
            cell,
            pbc,
            energy: None,
            forces: None,
            scalars: BTreeMap::new(),
        };
        sys.validate()?;
        Ok(sys)
    }

    pub fn n_atoms(&self) -> usize {
        self.numbers.len()
    }

    pub fn is_periodic(&self) -> bool {
        self.pbc.iter().any(|&b| b)
    }

    /// Checks every structural invariant; label invariants included when labels
    /// are present.
    pub fn validate(&self) -> Result<(), SystemError> {
        let fail = |msg: String| {
            Err(SystemError::InvalidSystem {
                id: self.id.clone(),
                msg,
            })
        };
        let n = self.numbers.len();
        if n == 0 {
            return fail("no atoms".into());
        }
        if self.positions.len() != n {
            return fail(format!(
                "{} atomic numbers but {} position rows",
                n,
                self.positions.len()
            ));
        }
        for &z in &self.numbers {
            if z == 0 || z > MAX_ATOMIC_NUMBER {
                return fail(format!("atomic number {z} outside [1, {MAX_ATOMIC_NUMBER}]"));
            }
        }
        if self.is_periodic() != self.cell.is_some() {
            return fail("cell must be present exactly when a pbc flag is set".into());
        }
        if let Some(cell) = &self.cell {
            // Row independence via the scalar triple product.
            let v = cell_volume(cell);
            if !v.is_finite() || v.abs() < 1e-12 {
                return fail(format!("cell rows are linearly dependent (volume {v:.3e})"));
            }
        }
        for row in &self.positions {
            if row.iter().any(|x| !x.is_finite()) {
                return fail("non-finite position".into());
            }
        }
        if let Some(e) = self.energy {
            if !e.is_finite() {
                return fail("non-finite energy".into());
            }
        }
        if let Some(forces) = &self.forces {
            if forces.len() != n {
                return fail(format!("{} atoms but {} force rows", n, forces.len()));
            }
            for row in forces {
                if row.iter().any(|x| !x.is_finite()) {
                    return fail("non-finite force".into());
                }
            }
        }
        for (name, v) in &self.scalars {
            if !v.is_finite() {
                return fail(format!("non-finite scalar {name}"));
            }
        }
        Ok(())
    }
}

/// Signed volume of the parallelepiped spanned by the cell rows.
pub fn cell_volume(cell: &[[f64; 3]; 3]) -> f64 {
    let [a, b, c] = cell;
    let cross = [
        b[1] * c[2] - b[2] * c[1],
        b[2] * c[0] - b[0] * c[2],
        b[0] * c[1] - b[1] * c[0],
    ];
    a[0] * cross[0] + a[1] * cross[1] + a[2] * cross[2]
}

/// Element multiplicities of a system. Used to detect composition overlap
/// between datasets and to build composition-disjoint splits.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CompositionVector {
    pub counts: BTreeMap<u32, u32>,
}

pub fn composition_vector(system: &AtomicSystem) -> CompositionVector {
    let mut counts = BTreeMap::new();
    for &z in &system.numbers {
        *counts.entry(z).or_insert(0) += 1;
    }
    CompositionVector { counts }
}

impl CompositionVector {
    pub fn total(&self) -> u32 {
        self.counts.values().sum()
    }
}

/// Per-dataset record: identity, size statistics, fitted reference and
/// normalization constants, loss weights, and optional threshold margins.
///
/// Statistics are unfitted right after loading; the trainer fills them from
/// the train split before use. `lambda_e`/`lambda_f` must stay positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub dataset_id: String,
    pub size: usize,
    pub mean_atoms: f64,
    pub ref_coeffs: BTreeMap<u32, f64>,
    pub energy_mean: f64,
    pub energy_std: f64,
    pub force_rms: f64,
    pub lambda_e: f64,
    pub lambda_f: f64,
    pub energy_margin: Option<f64>,
    pub force_margin: Option<f64>,
}

impl DatasetMeta {
    pub fn unfitted(dataset_id: impl Into<String>, size: usize, mean_atoms: f64) -> Self {
        DatasetMeta {
            dataset_id: dataset_id.into(),
            size,
            mean_atoms,
            ref_coeffs: BTreeMap::new(),
            energy_mean: 0.0,
            energy_std: 0.0,
            force_rms: 0.0,
            lambda_e: 1.0,
            lambda_f: 1.0,
            energy_margin: None,
            force_margin: None,
        }
    }
}

/// A collated minibatch of system views. Node ordering within each system is
/// preserved; `batch_idx[i]` is the system index of node `i` and is sorted and
/// contiguous over `[0, B)`.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub systems: Vec<&'a AtomicSystem>,
    pub dataset_idx: Vec<usize>,
    pub batch_idx: Vec<usize>,
    pub atom_counts: Vec<usize>,
}

impl<'a> Batch<'a> {
    pub fn n_systems(&self) -> usize {
        self.systems.len()
    }

    pub fn n_atoms(&self) -> usize {
        self.batch_idx.len()
    }

    /// Concatenated atomic numbers in batch order.
    pub fn numbers(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.n_atoms());
        for sys in &self.systems {
            out.extend_from_slice(&sys.numbers);
        }
        out
    }

    /// Concatenated positions in batch order, flattened row-major [n, 3].
    pub fn positions_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_atoms() * 3);
        for sys in &self.systems {
            for p in &sys.positions {
                out.extend_from_slice(p);
            }
        }
        out
    }

    /// Node index range of system `b` in the concatenated ordering.
    pub fn node_range(&self, b: usize) -> std::ops::Range<usize> {
        let start: usize = self.atom_counts[..b].iter().sum();
        start..start + self.atom_counts[b]
    }
}

/// Collates system views into a batch. Fails on an empty list or mismatched
/// dataset index count.
pub fn collate<'a>(
    systems: Vec<&'a AtomicSystem>,
    dataset_idx: Vec<usize>,
) -> Result<Batch<'a>, SystemError> {
    if systems.is_empty() {
        return Err(SystemError::InvalidBatch("empty system list".into()));
    }
    if dataset_idx.len() != systems.len() {
        return Err(SystemError::InvalidBatch(format!(
            "{} systems but {} dataset indices",
            systems.len(),
            dataset_idx.len()
        )));
    }
    let mut batch_idx = Vec::new();
    let mut atom_counts = Vec::with_capacity(systems.len());
    for (b, sys) in systems.iter().enumerate() {
        atom_counts.push(sys.n_atoms());
        batch_idx.extend(std::iter::repeat(b).take(sys.n_atoms()));
    }
    Ok(Batch {
        systems,
        dataset_idx,
        batch_idx,
        atom_counts,
    })
}
