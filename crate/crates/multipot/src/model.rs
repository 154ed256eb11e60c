//! Message-passing energy and force model over radius graphs.
//!
//! One shared backbone (element embedding plus `num_blocks` edge-message
//! blocks) feeds fully separate per-dataset output heads. Node state lives in
//! `h`, edge state in `m`; energies come from a per-node MLP pooled per
//! system, forces either directly from edge messages projected on unit
//! vectors or as the negative gradient of the summed energy.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tapegrad::{Gradients, Tape, Tensor, Value};

use crate::graph::Graph;
use crate::params::{glorot_uniform, param_rng, ParamError, ParamStore};
use crate::system::Batch;

pub const EMBED_ROWS: usize = 118;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error("head: {0}")]
    Head(String),
    #[error("capability: {0}")]
    Capability(String),
    #[error("embedding: {0}")]
    Embedding(String),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Tape(#[from] tapegrad::Error),
}

/// Backbone hyperparameters. `rbf_cutoff` must equal the cutoff the graphs
/// were built with; `encode` rejects mismatches so radial features never
/// extrapolate past the neighbor list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub atom_embed_dim: usize,
    pub edge_embed_dim: usize,
    pub num_blocks: usize,
    pub rbf_count: usize,
    pub rbf_cutoff: f64,
    pub max_neighbors: usize,
    /// Dropout on the hidden layer of each node update, train mode only.
    pub dropout_p: f64,
    /// Probability of masking out an edge for a whole forward pass.
    pub edge_dropout_p: f64,
    /// Whether reverse passes may run through force predictions that are
    /// themselves gradients. Disabling declares a first-order-only setup and
    /// makes `predict_forces_gradient` fail fast.
    pub second_order: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            atom_embed_dim: 64,
            edge_embed_dim: 64,
            num_blocks: 3,
            rbf_count: 32,
            rbf_cutoff: 12.0,
            max_neighbors: 30,
            dropout_p: 0.0,
            edge_dropout_p: 0.0,
            second_order: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.atom_embed_dim == 0 || self.edge_embed_dim == 0 {
            return Err(ModelError::Config("embedding dims must be positive".into()));
        }
        if self.num_blocks == 0 {
            return Err(ModelError::Config("num_blocks must be positive".into()));
        }
        if self.rbf_count < 2 {
            return Err(ModelError::Config(
                "rbf_count must be at least 2 so the basis has finite width".into(),
            ));
        }
        if !(self.rbf_cutoff > 0.0) || !self.rbf_cutoff.is_finite() {
            return Err(ModelError::Config("rbf_cutoff must be positive".into()));
        }
        if self.max_neighbors == 0 {
            return Err(ModelError::Config("max_neighbors must be positive".into()));
        }
        for (name, p) in [("dropout_p", self.dropout_p), ("edge_dropout_p", self.edge_dropout_p)] {
            if !(0.0..1.0).contains(&p) {
                return Err(ModelError::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Energy,
    DirectForce,
    Scalar(String),
}

impl TargetKind {
    /// Stable tag used in parameter names, one per head kind.
    pub fn tag(&self) -> String {
        match self {
            TargetKind::Energy => "energy".into(),
            TargetKind::DirectForce => "force".into(),
            TargetKind::Scalar(name) => format!("scalar_{name}"),
        }
    }
}

/// One output head: a dataset, a target kind, and how per-node values pool
/// into a per-system value. Pooling is ignored by force heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub dataset_id: String,
    pub kind: TargetKind,
    pub pooling: Pooling,
}

impl HeadSpec {
    pub fn energy(dataset_id: impl Into<String>) -> Self {
        HeadSpec {
            dataset_id: dataset_id.into(),
            kind: TargetKind::Energy,
            pooling: Pooling::Sum,
        }
    }

    pub fn direct_force(dataset_id: impl Into<String>) -> Self {
        HeadSpec {
            dataset_id: dataset_id.into(),
            kind: TargetKind::DirectForce,
            pooling: Pooling::Sum,
        }
    }

    pub fn scalar(dataset_id: impl Into<String>, name: impl Into<String>, pooling: Pooling) -> Self {
        HeadSpec {
            dataset_id: dataset_id.into(),
            kind: TargetKind::Scalar(name.into()),
            pooling,
        }
    }

    /// Prefix of this head's four parameters in the store.
    pub fn param_prefix(&self) -> String {
        format!("head.{}.{}", self.dataset_id, self.kind.tag())
    }

    /// Width of the head input: node state for pooled targets, edge state for
    /// direct forces.
    pub fn input_dim(&self, config: &ModelConfig) -> usize {
        match self.kind {
            TargetKind::DirectForce => config.edge_embed_dim,
            _ => config.atom_embed_dim,
        }
    }
}

/// The set of heads a parameter store carries. Each (dataset, kind) pair may
/// appear once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct HeadSet {
    pub heads: Vec<HeadSpec>,
}

impl HeadSet {
    pub fn new(heads: Vec<HeadSpec>) -> Result<Self, ModelError> {
        let set = HeadSet { heads };
        set.validate()?;
        Ok(set)
    }

    /// Energy plus direct-force head for every dataset, the pre-training
    /// layout.
    pub fn pretraining<S: AsRef<str>>(dataset_ids: &[S]) -> Self {
        let mut heads = Vec::new();
        for id in dataset_ids {
            heads.push(HeadSpec::energy(id.as_ref()));
            heads.push(HeadSpec::direct_force(id.as_ref()));
        }
        HeadSet { heads }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let mut seen = BTreeSet::new();
        for head in &self.heads {
            if head.dataset_id.is_empty() {
                return Err(ModelError::Head("empty dataset id".into()));
            }
            if let TargetKind::Scalar(name) = &head.kind {
                if name.is_empty() {
                    return Err(ModelError::Head("empty scalar target name".into()));
                }
            }
            if !seen.insert(head.param_prefix()) {
                return Err(ModelError::Head(format!(
                    "duplicate head {}",
                    head.param_prefix()
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, dataset_id: &str, kind: &TargetKind) -> Option<&HeadSpec> {
        self.heads
            .iter()
            .find(|h| h.dataset_id == dataset_id && &h.kind == kind)
    }
}

/// Several per-system graphs packed into one edge list with node indices
/// offset so systems stay disconnected.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub cutoff: f64,
    pub n_nodes: usize,
    pub n_edges: usize,
    pub edge_src: Vec<usize>,
    pub edge_dst: Vec<usize>,
    pub edge_dist: Vec<f64>,
    /// Row-major [n_edges, 3] unit vectors from src to dst.
    pub edge_unit: Vec<f64>,
    /// Row-major [n_edges, 3] periodic image offsets in cartesian units.
    pub shift_cart: Vec<f64>,
    /// System boundaries in node index space, length n_systems + 1.
    pub node_offset: Vec<usize>,
    pub edge_offset: Vec<usize>,
    /// Owning system of each node.
    pub node_sys: Vec<usize>,
}

impl GraphBatch {
    pub fn collate(graphs: &[&Graph]) -> Result<Self, ModelError> {
        let first = graphs
            .first()
            .ok_or_else(|| ModelError::Config("empty graph batch".into()))?;
        let cutoff = first.cutoff;
        let mut gb = GraphBatch {
            cutoff,
            n_nodes: 0,
            n_edges: 0,
            edge_src: Vec::new(),
            edge_dst: Vec::new(),
            edge_dist: Vec::new(),
            edge_unit: Vec::new(),
            shift_cart: Vec::new(),
            node_offset: vec![0],
            edge_offset: vec![0],
            node_sys: Vec::new(),
        };
        for (b, g) in graphs.iter().enumerate() {
            if g.cutoff != cutoff {
                return Err(ModelError::Config(format!(
                    "graph {b} cutoff {} differs from {cutoff}",
                    g.cutoff
                )));
            }
            let base = gb.n_nodes;
            for e in 0..g.n_edges() {
                gb.edge_src.push(base + g.edge_src[e]);
                gb.edge_dst.push(base + g.edge_dst[e]);
                gb.edge_dist.push(g.edge_dist[e]);
                gb.edge_unit.extend_from_slice(&g.edge_unit[e]);
                gb.shift_cart.extend_from_slice(&g.shift_cart[e]);
            }
            gb.n_nodes += g.n_nodes;
            gb.n_edges += g.n_edges();
            gb.node_offset.push(gb.n_nodes);
            gb.edge_offset.push(gb.n_edges);
            gb.node_sys.extend(std::iter::repeat(b).take(g.n_nodes));
        }
        Ok(gb)
    }

    pub fn n_systems(&self) -> usize {
        self.node_offset.len() - 1
    }

    pub fn node_range(&self, b: usize) -> std::ops::Range<usize> {
        self.node_offset[b]..self.node_offset[b + 1]
    }

    pub fn edge_range(&self, b: usize) -> std::ops::Range<usize> {
        self.edge_offset[b]..self.edge_offset[b + 1]
    }

    pub fn atom_counts(&self) -> Vec<usize> {
        (0..self.n_systems()).map(|b| self.node_range(b).len()).collect()
    }
}

/// Parameter leaves materialized on one tape. Every parameter becomes at most
/// one tape variable no matter how many ops consume it, so the gradient of a
/// loss with respect to a named parameter is a single well-defined adjoint.
pub struct TapedParams<'a> {
    tape: &'a Tape,
    store: &'a ParamStore,
    leaves: RefCell<BTreeMap<String, Tensor>>,
}

impl<'a> TapedParams<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore) -> Self {
        TapedParams {
            tape,
            store,
            leaves: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn tape(&self) -> &Tape {
        self.tape
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// The tape variable for a named parameter, created on first use.
    pub fn get(&self, name: &str) -> Result<Tensor, ModelError> {
        if let Some(t) = self.leaves.borrow().get(name) {
            return Ok(t.clone());
        }
        let t = self.store.var(self.tape, name)?;
        self.leaves.borrow_mut().insert(name.to_string(), t.clone());
        Ok(t)
    }

    /// Adjoints for every parameter in the store: the backward result where a
    /// leaf was used, exact zeros where it never reached the tape.
    pub fn gradients(&self, grads: &Gradients) -> Result<BTreeMap<String, Vec<f64>>, ModelError> {
        let leaves = self.leaves.borrow();
        let mut out = BTreeMap::new();
        for (name, values) in self.store.values() {
            let g = match leaves.get(name) {
                Some(leaf) => grads.get(leaf)?.data().to_vec(),
                None => vec![0.0; values.len()],
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Forward-pass outputs: node state `h`, last-block edge messages `m`, and
/// the geometry tensors heads consume. When the pass ran on taped positions
/// these all carry gradients back to the coordinates.
pub struct Embeddings {
    pub h: Tensor,
    pub m: Tensor,
    pub edge_dist: Tensor,
    pub edge_unit: Tensor,
}

/// Per-edge inverted-keep-probability mask, or None when dropout is off.
/// Survivors are scaled by 1/(1-p) so the expected edge weight is one.
pub fn edge_dropout_mask(
    n_edges: usize,
    p: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Vec<f64>>, ModelError> {
    if !(0.0..1.0).contains(&p) {
        return Err(ModelError::Config("edge dropout p must lie in [0, 1)".into()));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(None);
    }
    Ok(Some(dropout_mask(n_edges, p, rng)))
}

fn dropout_mask(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    use rand::Rng;
    let scale = 1.0 / (1.0 - p);
    (0..n)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
        .collect()
}

fn backbone_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (a, e, r) = (config.atom_embed_dim, config.edge_embed_dim, config.rbf_count);
    let mut shapes = vec![("embed.table".to_string(), vec![EMBED_ROWS, a])];
    for k in 1..=config.num_blocks {
        shapes.push((format!("block{k}.edge.w1"), vec![2 * a + r, e]));
        shapes.push((format!("block{k}.edge.b1"), vec![e]));
        shapes.push((format!("block{k}.edge.w2"), vec![e, e]));
        shapes.push((format!("block{k}.edge.b2"), vec![e]));
        shapes.push((format!("block{k}.update.w1"), vec![e, a]));
        shapes.push((format!("block{k}.update.b1"), vec![a]));
        shapes.push((format!("block{k}.update.w2"), vec![a, a]));
        shapes.push((format!("block{k}.update.b2"), vec![a]));
    }
    shapes
}

fn head_shapes(config: &ModelConfig, head: &HeadSpec) -> Vec<(String, Vec<usize>)> {
    let d = head.input_dim(config);
    let p = head.param_prefix();
    vec![
        (format!("{p}.w1"), vec![d, d]),
        (format!("{p}.b1"), vec![d]),
        (format!("{p}.w2"), vec![d, 1]),
        (format!("{p}.b2"), vec![1]),
    ]
}

fn init_into(store: &mut ParamStore, seed: u64, shapes: &[(String, Vec<usize>)]) -> Result<(), ModelError> {
    for (name, shape) in shapes {
        let data = if shape.len() == 1 {
            vec![0.0; shape[0]]
        } else {
            let mut rng = param_rng(seed, name);
            glorot_uniform(shape, &mut rng)
        };
        store.insert(name, shape.clone(), data)?;
    }
    Ok(())
}

/// Fresh parameter store: glorot weights drawn from a per-name stream, zero
/// biases. Initialization of any one tensor depends only on (seed, name), so
/// adding heads never shifts the backbone draw.
pub fn init_model(config: &ModelConfig, heads: &HeadSet, seed: u64) -> Result<ParamStore, ModelError> {
    config.validate()?;
    heads.validate()?;
    let mut store = ParamStore::new();
    init_into(&mut store, seed, &backbone_shapes(config))?;
    for head in &heads.heads {
        init_into(&mut store, seed, &head_shapes(config, head))?;
    }
    Ok(store)
}

/// Replaces every head with freshly initialized ones while copying backbone
/// parameters bit for bit.
pub fn swap_heads(
    params: &ParamStore,
    config: &ModelConfig,
    new_heads: &HeadSet,
    seed: u64,
) -> Result<ParamStore, ModelError> {
    config.validate()?;
    new_heads.validate()?;
    let mut out = params.filtered(|name| !name.starts_with("head."));
    for head in &new_heads.heads {
        init_into(&mut out, seed, &head_shapes(config, head))?;
    }
    Ok(out)
}

fn mlp2(x: &Tensor, tp: &TapedParams, prefix: &str) -> Result<Tensor, ModelError> {
    let w1 = tp.get(&format!("{prefix}.w1"))?;
    let b1 = tp.get(&format!("{prefix}.b1"))?;
    let w2 = tp.get(&format!("{prefix}.w2"))?;
    let b2 = tp.get(&format!("{prefix}.b2"))?;
    let hidden = x.matmul(&w1)?.add(&b1)?.silu()?;
    Ok(hidden.matmul(&w2)?.add(&b2)?)
}

fn check_batch(batch: &Batch, gb: &GraphBatch, config: &ModelConfig) -> Result<(), ModelError> {
    config.validate()?;
    if gb.cutoff != config.rbf_cutoff {
        return Err(ModelError::Config(format!(
            "graph cutoff {} does not match rbf_cutoff {}",
            gb.cutoff, config.rbf_cutoff
        )));
    }
    if batch.n_atoms() != gb.n_nodes || batch.n_systems() != gb.n_systems() {
        return Err(ModelError::Config(format!(
            "batch has {} atoms in {} systems but graphs have {} in {}",
            batch.n_atoms(),
            batch.n_systems(),
            gb.n_nodes,
            gb.n_systems()
        )));
    }
    Ok(())
}

/// Distances and unit vectors, either frozen from the graph batch or rebuilt
/// on the tape from a position tensor using the same src->dst convention as
/// the graph builder.
fn geometry(
    tape: &Tape,
    gb: &GraphBatch,
    positions: Option<&Tensor>,
) -> Result<(Tensor, Tensor), ModelError> {
    match positions {
        None => {
            let d = tape.constant(Value::new(vec![gb.n_edges], gb.edge_dist.clone())?);
            let u = tape.constant(Value::new(vec![gb.n_edges, 3], gb.edge_unit.clone())?);
            Ok((d, u))
        }
        Some(pos) => {
            if pos.shape() != [gb.n_nodes, 3] {
                return Err(ModelError::Config(format!(
                    "positions shape {:?} does not match {} nodes",
                    pos.shape(),
                    gb.n_nodes
                )));
            }
            let src = pos.gather_rows(&gb.edge_src)?;
            let dst = pos.gather_rows(&gb.edge_dst)?;
            let shift = tape.constant(Value::new(vec![gb.n_edges, 3], gb.shift_cart.clone())?);
            let vec = dst.add(&shift)?.sub(&src)?;
            let dist = vec.norm_rows()?;
            let unit = vec.div(&dist.reshape(&[gb.n_edges, 1])?)?;
            Ok((dist, unit))
        }
    }
}

fn forward(
    batch: &Batch,
    gb: &GraphBatch,
    tp: &TapedParams,
    config: &ModelConfig,
    mode: Mode,
    rng: &mut ChaCha8Rng,
    positions: Option<&Tensor>,
) -> Result<Embeddings, ModelError> {
    check_batch(batch, gb, config)?;
    let tape = tp.tape();
    let (n, eg) = (gb.n_nodes, gb.n_edges);
    let (dist, unit) = geometry(tape, gb, positions)?;

    // Gaussian radial basis on an even grid over [0, cutoff]; width equals
    // the grid spacing.
    let r = config.rbf_count;
    let delta = config.rbf_cutoff / (r - 1) as f64;
    let centers: Vec<f64> = (0..r).map(|k| k as f64 * delta).collect();
    let centers = tape.constant(Value::new(vec![r], centers)?);
    let diff = dist.reshape(&[eg, 1])?.sub(&centers)?;
    let rbf = diff.square()?.mul_scalar(-1.0 / (2.0 * delta * delta))?.exp()?;

    // Cosine envelope takes messages smoothly to zero at the cutoff; the
    // per-pass edge dropout mask rides on the same per-edge scale.
    let mut scale = dist
        .mul_scalar(PI / config.rbf_cutoff)?
        .cos()?
        .affine(0.5, 0.5)?
        .reshape(&[eg, 1])?;
    if let Some(mask) = edge_dropout_mask(eg, config.edge_dropout_p, mode, rng)? {
        scale = scale.mul(&tape.constant(Value::new(vec![eg, 1], mask)?))?;
    }

    let table = tp.get("embed.table")?;
    let z_idx: Vec<usize> = batch.numbers().iter().map(|&z| (z - 1) as usize).collect();
    let mut h = table.gather_rows(&z_idx)?;

    let node_dropout = mode == Mode::Train && config.dropout_p > 0.0;
    let mut m_last = None;
    for k in 1..=config.num_blocks {
        let h_src = h.gather_rows(&gb.edge_src)?;
        let h_dst = h.gather_rows(&gb.edge_dst)?;
        let x = Tensor::concat(&[&h_src, &h_dst, &rbf], 1)?;
        let m = mlp2(&x, tp, &format!("block{k}.edge"))?.mul(&scale)?;
        let agg = tape
            .constant(Value::zeros(&[n, config.edge_embed_dim]))
            .scatter_add_rows(&gb.edge_dst, &m)?;

        let prefix = format!("block{k}.update");
        let w1 = tp.get(&format!("{prefix}.w1"))?;
        let b1 = tp.get(&format!("{prefix}.b1"))?;
        let w2 = tp.get(&format!("{prefix}.w2"))?;
        let b2 = tp.get(&format!("{prefix}.b2"))?;
        let mut u = agg.matmul(&w1)?.add(&b1)?.silu()?;
        if node_dropout {
            let mask = dropout_mask(n * config.atom_embed_dim, config.dropout_p, rng);
            u = u.mul(&tape.constant(Value::new(vec![n, config.atom_embed_dim], mask)?))?;
        }
        h = h.add(&u.matmul(&w2)?.add(&b2)?)?;
        m_last = Some(m);
    }

    Ok(Embeddings {
        h,
        m: m_last.expect("num_blocks must be positive"),
        edge_dist: dist,
        edge_unit: unit,
    })
}

/// Runs the backbone with frozen geometry. Train mode draws dropout masks
/// from `rng`; eval mode leaves the generator untouched.
pub fn encode(
    batch: &Batch,
    gb: &GraphBatch,
    tp: &TapedParams,
    config: &ModelConfig,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<Embeddings, ModelError> {
    forward(batch, gb, tp, config, mode, rng, None)
}

/// Runs the backbone with geometry rebuilt from a taped position tensor, so
/// everything downstream is differentiable in the coordinates.
pub fn encode_on_positions(
    batch: &Batch,
    gb: &GraphBatch,
    tp: &TapedParams,
    config: &ModelConfig,
    mode: Mode,
    rng: &mut ChaCha8Rng,
    positions: &Tensor,
) -> Result<Embeddings, ModelError> {
    forward(batch, gb, tp, config, mode, rng, Some(positions))
}

fn require_head(tp: &TapedParams, head: &HeadSpec) -> Result<String, ModelError> {
    let prefix = head.param_prefix();
    if !tp.store().contains(&format!("{prefix}.w1")) {
        return Err(ModelError::Head(format!("no parameters for {prefix}")));
    }
    Ok(prefix)
}

/// Per-system predictions from a pooled per-node head, in normalized units.
/// Returns a length n_systems tensor.
pub fn predict_energy(
    emb: &Embeddings,
    gb: &GraphBatch,
    tp: &TapedParams,
    head: &HeadSpec,
) -> Result<Tensor, ModelError> {
    if head.kind == TargetKind::DirectForce {
        return Err(ModelError::Head(format!(
            "{} is a direct force head, not a pooled one",
            head.param_prefix()
        )));
    }
    let prefix = require_head(tp, head)?;
    let tape = tp.tape();
    let y = mlp2(&emb.h, tp, &prefix)?;
    let b = gb.n_systems();
    let pooled = match head.pooling {
        Pooling::Sum => y.segment_sum(&gb.node_sys, b)?,
        Pooling::Mean => {
            let inv: Vec<f64> = gb.atom_counts().iter().map(|&c| 1.0 / c as f64).collect();
            let inv = tape.constant(Value::new(vec![b, 1], inv)?);
            y.segment_sum(&gb.node_sys, b)?.mul(&inv)?
        }
        Pooling::Max => y.segment_max(&gb.node_sys, b)?,
    };
    Ok(pooled.reshape(&[b])?)
}

/// Forces read straight off the edge state: each edge contributes a scalar
/// times its unit vector to the destination atom. Returns [n_atoms, 3].
pub fn predict_forces_direct(
    emb: &Embeddings,
    gb: &GraphBatch,
    tp: &TapedParams,
    head: &HeadSpec,
) -> Result<Tensor, ModelError> {
    if head.kind != TargetKind::DirectForce {
        return Err(ModelError::Head(format!(
            "{} is not a direct force head",
            head.param_prefix()
        )));
    }
    let prefix = require_head(tp, head)?;
    let tape = tp.tape();
    let s = mlp2(&emb.m, tp, &prefix)?;
    let per_edge = emb.edge_unit.mul(&s)?;
    let zeros = tape.constant(Value::zeros(&[gb.n_nodes, 3]));
    Ok(zeros.scatter_add_rows(&gb.edge_dst, &per_edge)?)
}

/// Energy-conserving forces: minus the gradient of the summed head energies
/// with respect to atom positions, built as a live graph so a loss on them
/// can still reach the parameters. Returns (energies [n_systems],
/// forces [n_atoms, 3]).
pub fn predict_forces_gradient(
    batch: &Batch,
    gb: &GraphBatch,
    tp: &TapedParams,
    config: &ModelConfig,
    head: &HeadSpec,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor), ModelError> {
    if !config.second_order {
        return Err(ModelError::Capability(
            "gradient forces need second_order enabled in the model config".into(),
        ));
    }
    let tape = tp.tape();
    let positions = tape.var(Value::new(vec![gb.n_nodes, 3], batch.positions_flat())?)?;
    let emb = encode_on_positions(batch, gb, tp, config, mode, rng, &positions)?;
    let energies = predict_energy(&emb, gb, tp, head)?;
    let forces = energies.sum_all()?.grad_as_graph(&positions)?.neg()?;
    Ok((energies, forces))
}

/// Per-system means of node and edge state, as plain vectors for export.
/// A system with no edges has no mean edge state and is an error here.
pub fn mean_embeddings(
    emb: &Embeddings,
    gb: &GraphBatch,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), ModelError> {
    let a = emb.h.shape()[1];
    let e = emb.m.shape()[1];
    let h = emb.h.data();
    let m = emb.m.data();
    let mut h_mean = Vec::with_capacity(gb.n_systems());
    let mut m_mean = Vec::with_capacity(gb.n_systems());
    for b in 0..gb.n_systems() {
        let edges = gb.edge_range(b);
        if edges.is_empty() {
            return Err(ModelError::Embedding(format!(
                "system {b} has no edges, so it has no mean edge state"
            )));
        }
        let nodes = gb.node_range(b);
        let nn = nodes.len() as f64;
        let mut hv = vec![0.0; a];
        for i in nodes {
            for (j, slot) in hv.iter_mut().enumerate() {
                *slot += h[i * a + j];
            }
        }
        hv.iter_mut().for_each(|x| *x /= nn);
        let ne = edges.len() as f64;
        let mut mv = vec![0.0; e];
        for i in edges {
            for (j, slot) in mv.iter_mut().enumerate() {
                *slot += m[i * e + j];
            }
        }
        mv.iter_mut().for_each(|x| *x /= ne);
        h_mean.push(hv);
        m_mean.push(mv);
    }
    Ok((h_mean, m_mean))
}
