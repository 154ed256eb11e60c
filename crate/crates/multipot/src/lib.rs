//! Joint multi-domain training for compact atomic energy/force models.
//!
//! The crate covers the full loop for supervised pre-training across several
//! labeled atomistic datasets at once and fine-tuning the result on a new
//! target: dataset files and splits, per-dataset energy referencing and
//! normalization, temperature-based dataset mixing, a pair-distance
//! message-passing model with per-dataset heads, structure-wise loss
//! reduction, the full optimizer/schedule stack, and evaluation utilities.
//!
//! Modules are layered bottom-up:
//!
//! - [`system`]: core immutable domain types (systems, batches, metadata)
//! - [`graph`]: radius graphs with periodic images and neighbor capping
//! - [`ingest`]: dataset files, splits, overlap filtering, synthetic data
//! - [`reference`]: per-element energy references and normalization stats
//! - [`sampler`]: temperature-based mixing of datasets into batches
//! - [`loss`]: structure-wise and naive loss reductions, threshold gating
//! - [`optim`]: AdamW, weight EMA, the composite LR schedule, PCGrad
//! - [`params`]: named parameter store with deterministic initialization
//! - [`model`]: message-passing encoder and per-dataset prediction heads
//! - [`trainer`]: pre-training / fine-tuning orchestration and checkpoints
//! - [`eval`]: physical-unit metrics, relative improvement, embedding export
//! - [`cli`]: the command-line front end

pub mod cli;
pub mod eval;
pub mod graph;
pub mod ingest;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod reference;
pub mod rng;
pub mod sampler;
pub mod system;
pub mod trainer;
