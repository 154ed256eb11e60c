//! Physical-unit metrics over checkpointed models, relative-improvement
//! arithmetic for ablation tables, and diagnostic embedding exports.
//!
//! Everything here reports in the labels' own units: predictions come off
//! the network normalized, are pushed back through the dataset's reference
//! and statistics, and only then compared. Metrics are therefore invariant
//! to whatever normalization constants training happened to use, and
//! independent of evaluation batch size.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tapegrad::Tape;

use crate::graph::{build_radius_graph, Graph, GraphError};
use crate::model::{
    encode, mean_embeddings, predict_energy, predict_forces_direct, predict_forces_gradient,
    GraphBatch, HeadSpec, Mode, ModelError, TapedParams, TargetKind,
};
use crate::reference::{denormalize_prediction, denormalize_scalar, ReferenceError};
use crate::system::{collate, AtomicSystem, SystemError};
use crate::trainer::{Checkpoint, DatasetArtifacts, TargetFit};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("metric: {0}")]
    Metric(String),
    #[error("label: {0}")]
    Label(String),
    #[error("eval config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Reference(#[from] ReferenceError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Tape(#[from] tapegrad::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// What to score. Forces are compared atom by atom on the Euclidean norm of
/// the error vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTarget {
    Energy,
    Forces,
    Scalar(String),
}

impl fmt::Display for EvalTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalTarget::Energy => f.write_str("energy"),
            EvalTarget::Forces => f.write_str("forces"),
            EvalTarget::Scalar(name) => write!(f, "scalar_{name}"),
        }
    }
}

/// The targets a checkpoint can score for one of its datasets.
pub fn default_targets(ck: &Checkpoint, dataset_id: &str) -> Vec<EvalTarget> {
    match ck.datasets.iter().find(|a| a.meta.dataset_id == dataset_id) {
        Some(a) => match &a.fit {
            TargetFit::EnergyForce { .. } => vec![EvalTarget::Energy, EvalTarget::Forces],
            TargetFit::Scalar { name, .. } => vec![EvalTarget::Scalar(name.clone())],
        },
        None => Vec::new(),
    }
}

/// One scored (dataset, split, target) triple, in physical units. `count`
/// is systems for energy and scalar targets, atoms for forces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub dataset_id: String,
    pub split: String,
    pub target: String,
    pub mae: f64,
    pub rmse: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
    pub runtime_seconds: f64,
}

impl EvalReport {
    pub fn get(&self, dataset_id: &str, target: &str) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.dataset_id == dataset_id && r.target == target)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset_id,split,target,mae,rmse,count\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.dataset_id, r.split, r.target, r.mae, r.rmse, r.count
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String, EvalError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Merge rows from another report, keeping the summed runtime.
    pub fn extend(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
        self.runtime_seconds += other.runtime_seconds;
    }
}

fn find_artifacts<'a>(ck: &'a Checkpoint, dataset_id: &str) -> Result<&'a DatasetArtifacts, EvalError> {
    ck.datasets
        .iter()
        .find(|a| a.meta.dataset_id == dataset_id)
        .ok_or_else(|| {
            EvalError::Config(format!("checkpoint knows no dataset '{dataset_id}'"))
        })
}

struct Accum {
    abs: f64,
    sq: f64,
    count: usize,
}

impl Accum {
    fn new() -> Self {
        Accum {
            abs: 0.0,
            sq: 0.0,
            count: 0,
        }
    }

    fn push(&mut self, err: f64) {
        self.abs += err.abs();
        self.sq += err * err;
        self.count += 1;
    }

    fn row(&self, dataset_id: &str, split: &str, target: &EvalTarget) -> MetricRow {
        MetricRow {
            dataset_id: dataset_id.to_string(),
            split: split.to_string(),
            target: target.to_string(),
            mae: self.abs / self.count as f64,
            rmse: (self.sq / self.count as f64).sqrt(),
            count: self.count,
        }
    }
}

/// Score a checkpoint on a set of systems. Deterministic, and independent of
/// `batch_size`: systems decouple in the forward pass, and errors accumulate
/// in system order either way.
pub fn evaluate(
    ck: &Checkpoint,
    dataset_id: &str,
    split: &str,
    systems: &[AtomicSystem],
    targets: &[EvalTarget],
    batch_size: usize,
) -> Result<EvalReport, EvalError> {
    let started = Instant::now();
    if batch_size == 0 {
        return Err(EvalError::Config("batch_size must be >= 1".into()));
    }
    if systems.is_empty() {
        return Err(EvalError::Config("no systems to evaluate".into()));
    }
    if targets.is_empty() {
        return Err(EvalError::Config("no targets requested".into()));
    }
    let arts = find_artifacts(ck, dataset_id)?;
    let want_energy = targets.contains(&EvalTarget::Energy);
    let want_forces = targets.contains(&EvalTarget::Forces);
    let scalar_names: Vec<&String> = targets
        .iter()
        .filter_map(|t| match t {
            EvalTarget::Scalar(n) => Some(n),
            _ => None,
        })
        .collect();

    let energy_head = ck.heads.get(dataset_id, &TargetKind::Energy);
    if (want_energy || want_forces) && energy_head.is_none() {
        return Err(EvalError::Config(format!(
            "checkpoint has no energy head for '{dataset_id}'"
        )));
    }
    let force_head = ck.heads.get(dataset_id, &TargetKind::DirectForce);
    if want_forces && force_head.is_none() && !ck.model.second_order {
        return Err(EvalError::Config(format!(
            "no direct force head for '{dataset_id}' and gradients are off"
        )));
    }
    let mut scalar_heads: Vec<(&String, &HeadSpec)> = Vec::new();
    for name in &scalar_names {
        let head = ck
            .heads
            .get(dataset_id, &TargetKind::Scalar((*name).clone()))
            .ok_or_else(|| {
                EvalError::Label(format!("no head for scalar '{name}' on '{dataset_id}'"))
            })?;
        scalar_heads.push((name, head));
    }

    let mut energy_acc = Accum::new();
    let mut force_acc = Accum::new();
    let mut scalar_accs: Vec<Accum> = scalar_names.iter().map(|_| Accum::new()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut start = 0;
    while start < systems.len() {
        let end = (start + batch_size).min(systems.len());
        let chunk: Vec<&AtomicSystem> = systems[start..end].iter().collect();
        let graphs: Vec<Graph> = chunk
            .iter()
            .map(|s| build_radius_graph(s, ck.model.rbf_cutoff, ck.model.max_neighbors))
            .collect::<Result<_, _>>()?;
        let grefs: Vec<&Graph> = graphs.iter().collect();
        let k = chunk.len();
        let batch = collate(chunk, vec![0; k])?;
        let gb = GraphBatch::collate(&grefs)?;
        let tape = Tape::new();
        let tp = TapedParams::new(&tape, &ck.params);

        let (e_pred, f_pred) = if want_energy || want_forces {
            let head = energy_head.expect("checked above");
            if want_forces && force_head.is_none() {
                let (e, f) = predict_forces_gradient(
                    &batch,
                    &gb,
                    &tp,
                    &ck.model,
                    head,
                    Mode::Eval,
                    &mut rng,
                )?;
                (Some(e.data().to_vec()), Some(f.data().to_vec()))
            } else {
                let emb = encode(&batch, &gb, &tp, &ck.model, Mode::Eval, &mut rng)?;
                let e = predict_energy(&emb, &gb, &tp, head)?.data().to_vec();
                let f = if want_forces {
                    Some(
                        predict_forces_direct(&emb, &gb, &tp, force_head.expect("checked"))?
                            .data()
                            .to_vec(),
                    )
                } else {
                    None
                };
                (Some(e), f)
            }
        } else {
            (None, None)
        };

        let scalar_preds: Vec<Vec<f64>> = if scalar_heads.is_empty() {
            Vec::new()
        } else {
            let emb = encode(&batch, &gb, &tp, &ck.model, Mode::Eval, &mut rng)?;
            scalar_heads
                .iter()
                .map(|(_, head)| Ok(predict_energy(&emb, &gb, &tp, head)?.data().to_vec()))
                .collect::<Result<_, EvalError>>()?
        };

        for (bi, sys) in batch.systems.iter().enumerate() {
            if want_energy || want_forces {
                let TargetFit::EnergyForce { reference, stats } = &arts.fit else {
                    return Err(EvalError::Label(format!(
                        "'{dataset_id}' was fitted for a scalar target, not energies"
                    )));
                };
                let e_norm = e_pred.as_ref().expect("energies computed")[bi];
                let f_norm: Option<Vec<[f64; 3]>> = f_pred.as_ref().map(|f| {
                    batch
                        .node_range(bi)
                        .map(|a| [f[a * 3], f[a * 3 + 1], f[a * 3 + 2]])
                        .collect()
                });
                let (e_phys, f_phys) =
                    denormalize_prediction(sys, e_norm, f_norm.as_deref(), reference, stats)?;
                if want_energy {
                    let label = sys.energy.ok_or_else(|| {
                        EvalError::Label(format!("system '{}' has no energy label", sys.id))
                    })?;
                    energy_acc.push(e_phys - label);
                }
                if want_forces {
                    let labels = sys.forces.as_ref().ok_or_else(|| {
                        EvalError::Label(format!("system '{}' has no force labels", sys.id))
                    })?;
                    let rows = f_phys.expect("forces computed");
                    for (p, t) in rows.iter().zip(labels) {
                        let d0 = p[0] - t[0];
                        let d1 = p[1] - t[1];
                        let d2 = p[2] - t[2];
                        force_acc.push((d0 * d0 + d1 * d1 + d2 * d2).sqrt());
                    }
                }
            }
            for (si, (name, _)) in scalar_heads.iter().enumerate() {
                let TargetFit::Scalar {
                    name: fit_name,
                    reference,
                    stats,
                } = &arts.fit
                else {
                    return Err(EvalError::Label(format!(
                        "'{dataset_id}' was not fitted for scalar targets"
                    )));
                };
                if fit_name != *name {
                    return Err(EvalError::Label(format!(
                        "'{dataset_id}' was fitted for scalar '{fit_name}', not '{name}'"
                    )));
                }
                let v_norm = scalar_preds[si][bi];
                let v_phys = denormalize_scalar(sys, v_norm, reference.as_ref(), stats)?;
                let label = sys.scalars.get(*name).ok_or_else(|| {
                    EvalError::Label(format!("system '{}' has no scalar '{name}'", sys.id))
                })?;
                scalar_accs[si].push(v_phys - label);
            }
        }
        start = end;
    }

    let mut rows = Vec::new();
    for t in targets {
        let acc = match t {
            EvalTarget::Energy => &energy_acc,
            EvalTarget::Forces => &force_acc,
            EvalTarget::Scalar(name) => {
                let si = scalar_names
                    .iter()
                    .position(|n| *n == name)
                    .expect("collected above");
                &scalar_accs[si]
            }
        };
        rows.push(acc.row(dataset_id, split, t));
    }
    Ok(EvalReport {
        rows,
        runtime_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Improvement of `new` over `base` in percent: 100 (base - new) / base.
/// Positive means better; a non-positive baseline has no meaningful ratio.
pub fn relative_improvement(base: f64, new: f64) -> Result<f64, EvalError> {
    if !(base > 0.0) || !base.is_finite() || !new.is_finite() {
        return Err(EvalError::Metric(format!(
            "relative improvement needs a positive finite baseline, got base {base}, new {new}"
        )));
    }
    Ok(100.0 * (base - new) / base)
}

/// Unweighted mean of per-task relative improvements.
pub fn mean_relative_improvement(pairs: &[(f64, f64)]) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Metric(
            "mean relative improvement over zero tasks".into(),
        ));
    }
    let mut sum = 0.0;
    for &(base, new) in pairs {
        sum += relative_improvement(base, new)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Markdown table of relative improvements: one row per variant, one column
/// per task, and an unweighted mean column. `base` and every variant metric
/// vector must align with `task_names`.
pub fn ablation_markdown(
    task_names: &[String],
    base: &[f64],
    variants: &[(String, Vec<f64>)],
) -> Result<String, EvalError> {
    if task_names.is_empty() || variants.is_empty() {
        return Err(EvalError::Metric("empty ablation table".into()));
    }
    if base.len() != task_names.len() {
        return Err(EvalError::Metric(format!(
            "{} tasks but {} baseline metrics",
            task_names.len(),
            base.len()
        )));
    }
    let mut out = String::from("| variant |");
    for t in task_names {
        out.push_str(&format!(" {t} |"));
    }
    out.push_str(" mean RI |\n|---|");
    for _ in task_names {
        out.push_str("---|");
    }
    out.push_str("---|\n");
    for (label, metrics) in variants {
        if metrics.len() != task_names.len() {
            return Err(EvalError::Metric(format!(
                "variant '{label}' has {} metrics for {} tasks",
                metrics.len(),
                task_names.len()
            )));
        }
        out.push_str(&format!("| {label} |"));
        let mut pairs = Vec::with_capacity(metrics.len());
        for (b, m) in base.iter().zip(metrics) {
            let ri = relative_improvement(*b, *m)?;
            out.push_str(&format!(" {ri:.1}% |"));
            pairs.push((*b, *m));
        }
        let mean = mean_relative_improvement(&pairs)?;
        out.push_str(&format!(" {mean:.1}% |\n"));
    }
    Ok(out)
}

/// Per-system mean embeddings as CSV, for external projection tools.
#[derive(Debug, Clone)]
pub struct EmbeddingExport {
    pub csv: String,
    /// Systems left out because they have no edges at the model cutoff.
    pub skipped: Vec<String>,
}

/// Export mean node and edge embeddings for up to `sample_count` systems,
/// sampled without replacement (all of them when the dataset is smaller).
/// Selection order is the dataset's own; sampling is deterministic per seed.
pub fn export_embeddings(
    ck: &Checkpoint,
    dataset_id: &str,
    systems: &[AtomicSystem],
    sample_count: usize,
    seed: u64,
) -> Result<EmbeddingExport, EvalError> {
    if systems.is_empty() {
        return Err(EvalError::Config("no systems to export".into()));
    }
    let mut indices: Vec<usize> = (0..systems.len()).collect();
    if sample_count < systems.len() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        indices.shuffle(&mut rng);
        indices.truncate(sample_count);
        indices.sort_unstable();
    }

    let mut skipped = Vec::new();
    let mut selected: Vec<(&AtomicSystem, Graph)> = Vec::new();
    for &i in &indices {
        let sys = &systems[i];
        match build_radius_graph(sys, ck.model.rbf_cutoff, ck.model.max_neighbors) {
            Ok(g) if g.n_edges() == 0 => skipped.push(sys.id.clone()),
            Ok(g) => selected.push((sys, g)),
            Err(GraphError::TooFewAtoms { id }) => skipped.push(id),
            Err(e) => return Err(e.into()),
        }
    }

    let a = ck.model.atom_embed_dim;
    let e = ck.model.edge_embed_dim;
    let mut csv = String::from("system_id,dataset_id");
    for j in 0..a {
        csv.push_str(&format!(",h{j}"));
    }
    for j in 0..e {
        csv.push_str(&format!(",m{j}"));
    }
    csv.push('\n');

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut start = 0;
    while start < selected.len() {
        let end = (start + 32).min(selected.len());
        let chunk = &selected[start..end];
        let refs: Vec<&AtomicSystem> = chunk.iter().map(|(s, _)| *s).collect();
        let grefs: Vec<&Graph> = chunk.iter().map(|(_, g)| g).collect();
        let k = refs.len();
        let batch = collate(refs, vec![0; k])?;
        let gb = GraphBatch::collate(&grefs)?;
        let tape = Tape::new();
        let tp = TapedParams::new(&tape, &ck.params);
        let emb = encode(&batch, &gb, &tp, &ck.model, Mode::Eval, &mut rng)?;
        let (h_mean, m_mean) = mean_embeddings(&emb, &gb)?;
        for (bi, (sys, _)) in chunk.iter().enumerate() {
            csv.push_str(&sys.id);
            csv.push(',');
            csv.push_str(dataset_id);
            for v in &h_mean[bi] {
                csv.push_str(&format!(",{v}"));
            }
            for v in &m_mean[bi] {
                csv.push_str(&format!(",{v}"));
            }
            csv.push('\n');
        }
        start = end;
    }
    Ok(EmbeddingExport { csv, skipped })
}
