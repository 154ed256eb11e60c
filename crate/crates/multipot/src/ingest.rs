//! Dataset files, train/val/test splits, composition-overlap filtering, and
//! synthetic dataset generation.
//!
//! The on-disk format is UTF-8 JSON Lines: the first line is a header object
//! `{format_version, dataset_id, label_schema}` and every following line is
//! one record. The writer emits floats with 17 significant digits so values
//! round-trip bit-exactly.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::system::{composition_vector, AtomicSystem, CompositionVector, DatasetMeta};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("split error: {0}")]
    Split(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which labels every record of a dataset carries.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSchema {
    #[serde(default)]
    pub energy: bool,
    #[serde(default)]
    pub forces: bool,
    #[serde(default)]
    pub scalars: Vec<String>,
}

impl LabelSchema {
    pub fn energy_forces() -> Self {
        LabelSchema {
            energy: true,
            forces: true,
            scalars: Vec::new(),
        }
    }
}

/// An ordered collection of systems plus dataset-level metadata. Statistics in
/// `meta` are unfitted right after loading; the trainer fits them on the train
/// split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub schema: LabelSchema,
    pub systems: Vec<AtomicSystem>,
}

impl Dataset {
    pub fn from_systems(
        dataset_id: impl Into<String>,
        schema: LabelSchema,
        systems: Vec<AtomicSystem>,
    ) -> Self {
        let n = systems.len();
        let mean_atoms = if n == 0 {
            0.0
        } else {
            systems.iter().map(|s| s.n_atoms() as f64).sum::<f64>() / n as f64
        };
        Dataset {
            meta: DatasetMeta::unfitted(dataset_id, n, mean_atoms),
            schema,
            systems,
        }
    }

    pub fn len(&self) -> usize {
        self.systems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.systems.is_empty()
    }

    /// Drops systems with fewer than `min` atoms. Off by default everywhere;
    /// exists for corpora whose small fragments are not worth modeling.
    pub fn filter_min_atoms(&self, min: usize) -> Dataset {
        let kept: Vec<AtomicSystem> = self
            .systems
            .iter()
            .filter(|s| s.n_atoms() >= min)
            .cloned()
            .collect();
        Dataset::from_systems(self.meta.dataset_id.clone(), self.schema.clone(), kept)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    format_version: u32,
    dataset_id: String,
    label_schema: LabelSchema,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    numbers: Vec<u32>,
    positions: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cell: Option<[[f64; 3]; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pbc: Option<[bool; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    energy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    forces: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    scalars: BTreeMap<String, f64>,
}

/// Parses a dataset stream. Malformed input reports its 1-based line number.
pub fn parse_dataset(reader: impl BufRead) -> Result<Dataset, IngestError> {
    let mut lines = reader.lines().enumerate();
    let at = |line: usize, msg: String| IngestError::Parse { line, msg };

    let (_, first) = lines
        .next()
        .ok_or_else(|| at(1, "empty stream, expected header line".into()))?;
    let first = first?;
    let header: HeaderLine =
        serde_json::from_str(&first).map_err(|e| at(1, format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(at(
            1,
            format!(
                "format_version {} unsupported, expected {}",
                header.format_version, FORMAT_VERSION
            ),
        ));
    }

    let mut systems = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine =
            serde_json::from_str(&line).map_err(|e| at(line_no, e.to_string()))?;
        let system = AtomicSystem {
            id: rec.id,
            numbers: rec.numbers,
            positions: rec.positions,
            cell: rec.cell,
            pbc: rec.pbc.unwrap_or([false; 3]),
            energy: rec.energy,
            forces: rec.forces,
            scalars: rec.scalars,
        };
        system
            .validate()
            .map_err(|e| at(line_no, e.to_string()))?;
        check_schema(&system, &header.label_schema)
            .map_err(|msg| at(line_no, msg))?;
        systems.push(system);
    }
    Ok(Dataset::from_systems(
        header.dataset_id,
        header.label_schema,
        systems,
    ))
}

fn check_schema(system: &AtomicSystem, schema: &LabelSchema) -> Result<(), String> {
    if system.energy.is_some() != schema.energy {
        return Err(format!(
            "system {}: energy label {} but schema says {}",
            system.id,
            if system.energy.is_some() { "present" } else { "missing" },
            schema.energy
        ));
    }
    if system.forces.is_some() != schema.forces {
        return Err(format!(
            "system {}: force label {} but schema says {}",
            system.id,
            if system.forces.is_some() { "present" } else { "missing" },
            schema.forces
        ));
    }
    let declared: HashSet<&str> = schema.scalars.iter().map(|s| s.as_str()).collect();
    let got: HashSet<&str> = system.scalars.keys().map(|s| s.as_str()).collect();
    if declared != got {
        return Err(format!(
            "system {}: scalar labels {:?} do not match schema {:?}",
            system.id,
            got.iter().collect::<Vec<_>>(),
            schema.scalars
        ));
    }
    Ok(())
}

/// serde_json formatter that prints every float with 17 significant digits,
/// enough to reproduce any f64 exactly on re-parse.
struct SigFig17;

impl serde_json::ser::Formatter for SigFig17 {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.16e}")
    }
}

fn to_json_line<T: Serialize>(value: &T) -> Result<String, IngestError> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SigFig17);
    value
        .serialize(&mut ser)
        .map_err(|e| IngestError::Generation(format!("serialize: {e}")))?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

/// Writes a dataset in the JSON Lines format parsed by [`parse_dataset`].
pub fn write_dataset(dataset: &Dataset, mut writer: impl Write) -> Result<(), IngestError> {
    let header = HeaderLine {
        format_version: FORMAT_VERSION,
        dataset_id: dataset.meta.dataset_id.clone(),
        label_schema: dataset.schema.clone(),
    };
    writeln!(writer, "{}", to_json_line(&header)?)?;
    for sys in &dataset.systems {
        let rec = RecordLine {
            id: sys.id.clone(),
            numbers: sys.numbers.clone(),
            positions: sys.positions.clone(),
            cell: sys.cell,
            pbc: if sys.is_periodic() { Some(sys.pbc) } else { None },
            energy: sys.energy,
            forces: sys.forces.clone(),
            scalars: sys.scalars.clone(),
        };
        writeln!(writer, "{}", to_json_line(&rec)?)?;
    }
    Ok(())
}

pub fn load_dataset_file(path: impl AsRef<std::path::Path>) -> Result<Dataset, IngestError> {
    let file = std::fs::File::open(path)?;
    parse_dataset(std::io::BufReader::new(file))
}

pub fn write_dataset_file(
    dataset: &Dataset,
    path: impl AsRef<std::path::Path>,
) -> Result<(), IngestError> {
    let file = std::fs::File::create(path)?;
    write_dataset(dataset, std::io::BufWriter::new(file))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Random,
    /// No composition in val/test appears anywhere in train. Whole groups of
    /// identical composition are assigned together; the only construction
    /// that guarantees the property.
    CompositionDisjoint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fractions: (f64, f64, f64),
    pub seed: u64,
    pub mode: SplitMode,
}

impl SplitSpec {
    pub fn new(fractions: (f64, f64, f64), seed: u64, mode: SplitMode) -> Result<Self, IngestError> {
        let (a, b, c) = fractions;
        for f in [a, b, c] {
            if !(f > 0.0 && f < 1.0) {
                return Err(IngestError::Split(format!(
                    "fraction {f} outside (0, 1)"
                )));
            }
        }
        if (a + b + c - 1.0).abs() > 1e-12 {
            return Err(IngestError::Split(format!(
                "fractions sum to {}, expected 1",
                a + b + c
            )));
        }
        Ok(SplitSpec {
            fractions,
            seed,
            mode,
        })
    }
}

/// Splits a dataset into train/val/test.
///
/// Counts follow floor(f_train*n), floor(f_val*n), remainder. Composition-
/// disjoint mode fills the targets with whole composition groups and fails
/// when any partition would end up empty.
pub fn split(
    dataset: &Dataset,
    spec: &SplitSpec,
) -> Result<(Dataset, Dataset, Dataset), IngestError> {
    if dataset.is_empty() {
        return Err(IngestError::Split("cannot split an empty dataset".into()));
    }
    let n = dataset.len();
    let target_train = (spec.fractions.0 * n as f64).floor() as usize;
    let target_val = (spec.fractions.1 * n as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let (mut train_idx, mut val_idx, mut test_idx): (Vec<usize>, Vec<usize>, Vec<usize>) =
        match spec.mode {
            SplitMode::Random => {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                let train = order[..target_train].to_vec();
                let val = order[target_train..target_train + target_val].to_vec();
                let test = order[target_train + target_val..].to_vec();
                (train, val, test)
            }
            SplitMode::CompositionDisjoint => {
                let mut groups: BTreeMap<CompositionVector, Vec<usize>> = BTreeMap::new();
                for (i, sys) in dataset.systems.iter().enumerate() {
                    groups.entry(composition_vector(sys)).or_default().push(i);
                }
                let mut group_list: Vec<Vec<usize>> = groups.into_values().collect();
                group_list.shuffle(&mut rng);
                let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
                for group in group_list {
                    if train.len() < target_train {
                        train.extend(group);
                    } else if val.len() < target_val {
                        val.extend(group);
                    } else {
                        test.extend(group);
                    }
                }
                if train.is_empty() || val.is_empty() || test.is_empty() {
                    return Err(IngestError::Split(format!(
                        "too few distinct compositions for a composition-disjoint \
                         {}/{}/{} split",
                        train.len(),
                        val.len(),
                        test.len()
                    )));
                }
                (train, val, test)
            }
        };

    // Keep the original record order inside each partition.
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |idx: &[usize]| -> Dataset {
        Dataset::from_systems(
            dataset.meta.dataset_id.clone(),
            dataset.schema.clone(),
            idx.iter().map(|&i| dataset.systems[i].clone()).collect(),
        )
    };
    Ok((pick(&train_idx), pick(&val_idx), pick(&test_idx)))
}

/// Partitions `probe` by whether each system's composition occurs anywhere in
/// `reference`. The two outputs together are exactly `probe`.
pub fn overlap_partition(probe: &Dataset, reference: &Dataset) -> (Dataset, Dataset) {
    let known: HashSet<CompositionVector> = reference
        .systems
        .iter()
        .map(composition_vector)
        .collect();
    let (mut hit, mut miss) = (Vec::new(), Vec::new());
    for sys in &probe.systems {
        if known.contains(&composition_vector(sys)) {
            hit.push(sys.clone());
        } else {
            miss.push(sys.clone());
        }
    }
    let make = |systems| {
        Dataset::from_systems(probe.meta.dataset_id.clone(), probe.schema.clone(), systems)
    };
    (make(hit), make(miss))
}

/// A cutoff-smoothed Lennard-Jones pair potential. Both the energy and its
/// derivative are shifted to zero at the cutoff, so truncation introduces no
/// discontinuity in either.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LjPotential {
    pub epsilon: f64,
    pub sigma: f64,
    pub cutoff: f64,
}

impl LjPotential {
    pub fn new(epsilon: f64, sigma: f64, cutoff: f64) -> Result<Self, IngestError> {
        if !(epsilon > 0.0 && sigma > 0.0) {
            return Err(IngestError::Generation(
                "epsilon and sigma must be positive".into(),
            ));
        }
        if cutoff <= 1.5 * sigma {
            return Err(IngestError::Generation(format!(
                "cutoff {cutoff} must exceed 1.5 sigma = {}",
                1.5 * sigma
            )));
        }
        Ok(LjPotential {
            epsilon,
            sigma,
            cutoff,
        })
    }

    fn bare(&self, r: f64) -> f64 {
        let s6 = (self.sigma / r).powi(6);
        4.0 * self.epsilon * (s6 * s6 - s6)
    }

    fn bare_deriv(&self, r: f64) -> f64 {
        let s6 = (self.sigma / r).powi(6);
        24.0 * self.epsilon * (s6 - 2.0 * s6 * s6) / r
    }

    /// Smoothed pair energy; zero at and beyond the cutoff.
    pub fn energy(&self, r: f64) -> f64 {
        if r >= self.cutoff {
            return 0.0;
        }
        self.bare(r) - self.bare(self.cutoff) - (r - self.cutoff) * self.bare_deriv(self.cutoff)
    }

    /// Derivative of the smoothed pair energy; zero at and beyond the cutoff.
    pub fn deriv(&self, r: f64) -> f64 {
        if r >= self.cutoff {
            return 0.0;
        }
        self.bare_deriv(r) - self.bare_deriv(self.cutoff)
    }

    /// Separation where the smoothed potential is stationary (force of an
    /// isolated pair vanishes). Slightly above the bare LJ minimum because the
    /// force shift tilts the well.
    pub fn minimum_separation(&self) -> f64 {
        // deriv < 0 at sigma, > 0 at 1.3 sigma (guaranteed by cutoff > 1.5 sigma).
        let (mut lo, mut hi) = (self.sigma, 1.3 * self.sigma);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.deriv(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Total energy and analytic forces of a set of positions.
    pub fn labels(&self, positions: &[[f64; 3]]) -> (f64, Vec<[f64; 3]>) {
        let n = positions.len();
        let mut energy = 0.0;
        let mut forces = vec![[0.0; 3]; n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = [
                    positions[i][0] - positions[j][0],
                    positions[i][1] - positions[j][1],
                    positions[i][2] - positions[j][2],
                ];
                let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                if r >= self.cutoff {
                    continue;
                }
                energy += self.energy(r);
                let g = self.deriv(r) / r;
                for k in 0..3 {
                    // F_i = -dV/dR_i; the pair term pulls i along -(R_i-R_j)*V'/r.
                    forces[i][k] -= g * d[k];
                    forces[j][k] += g * d[k];
                }
            }
        }
        (energy, forces)
    }
}

/// Recipe for one synthetic domain: element labels, system sizes, a cubic box,
/// and the pair potential that labels every sample. Different (epsilon, sigma)
/// pairs per domain mimic multi-fidelity corpora that differ in scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub dataset_id: String,
    pub elements: Vec<u32>,
    pub count: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub box_side: f64,
    pub epsilon: f64,
    pub sigma: f64,
    pub cutoff: f64,
}

/// Generated atoms keep at least this many sigmas of separation. Anything
/// below 0.5 sigma counts as an overlap and is always resampled; the stricter
/// spacing keeps the repulsive wall within a trainable dynamic range.
const MIN_SEPARATION_SIGMA: f64 = 1.0;
const PLACEMENT_ATTEMPTS: usize = 1000;

/// Generates a labeled dataset from a domain recipe. Deterministic per seed.
pub fn generate_synthetic(spec: &DomainSpec, seed: u64) -> Result<Dataset, IngestError> {
    if spec.elements.is_empty() {
        return Err(IngestError::Generation("element set is empty".into()));
    }
    if spec.n_min < 2 || spec.n_max < spec.n_min {
        return Err(IngestError::Generation(format!(
            "bad size range [{}, {}]",
            spec.n_min, spec.n_max
        )));
    }
    let lj = LjPotential::new(spec.epsilon, spec.sigma, spec.cutoff)?;
    let min_sep = MIN_SEPARATION_SIGMA * spec.sigma;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut systems = Vec::with_capacity(spec.count);
    for index in 0..spec.count {
        let n = rng.gen_range(spec.n_min..=spec.n_max);
        let mut positions: Vec<[f64; 3]> = Vec::with_capacity(n);
        for atom in 0..n {
            let mut placed = false;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let p = [
                    rng.gen_range(0.0..spec.box_side),
                    rng.gen_range(0.0..spec.box_side),
                    rng.gen_range(0.0..spec.box_side),
                ];
                let ok = positions.iter().all(|q| {
                    let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
                    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() >= min_sep
                });
                if ok {
                    positions.push(p);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(IngestError::Generation(format!(
                    "could not place atom {atom} of system {index} after \
                     {PLACEMENT_ATTEMPTS} attempts; box too small for {n} atoms"
                )));
            }
        }
        let numbers: Vec<u32> = (0..n)
            .map(|_| spec.elements[rng.gen_range(0..spec.elements.len())])
            .collect();
        let (energy, forces) = lj.labels(&positions);
        let mut system = AtomicSystem::new(
            format!("{}-{:05}", spec.dataset_id, index),
            numbers,
            positions,
            None,
            [false; 3],
        )
        .map_err(|e| IngestError::Generation(e.to_string()))?;
        system.energy = Some(energy);
        system.forces = Some(forces);
        systems.push(system);
    }
    Ok(Dataset::from_systems(
        spec.dataset_id.clone(),
        LabelSchema::energy_forces(),
        systems,
    ))
}
