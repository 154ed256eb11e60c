//! Temperature-based mixing of several datasets into training batches.
//!
//! Datasets are drawn per batch slot with probability proportional to
//! (size share)^(1/T); examples inside a dataset come from a cyclic shuffled
//! stream that reshuffles once exhausted, so nothing repeats within a cycle.
//! The whole sampler is deterministic per (seed, step) and snapshotable for
//! checkpoint resume.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rng::RngState;

#[derive(Debug, thiserror::Error)]
pub enum SamplerError {
    #[error("sampler: {0}")]
    Invalid(String),
}

/// Mixing recipe: dataset sizes, temperature (1 = proportional, infinity =
/// uniform), batch size, and the seed of the draw stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub sizes: Vec<usize>,
    pub temperature: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl MixSpec {
    pub fn new(
        sizes: Vec<usize>,
        temperature: f64,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self, SamplerError> {
        if sizes.is_empty() {
            return Err(SamplerError::Invalid("no datasets".into()));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(SamplerError::Invalid("empty dataset".into()));
        }
        if !(temperature >= 1.0) {
            return Err(SamplerError::Invalid(format!(
                "temperature {temperature} must be >= 1 (or infinite)"
            )));
        }
        if batch_size == 0 {
            return Err(SamplerError::Invalid("batch_size must be >= 1".into()));
        }
        Ok(MixSpec {
            sizes,
            temperature,
            batch_size,
            seed,
        })
    }

    /// One epoch is the total corpus size in samples.
    pub fn epoch_samples(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// Steps per epoch under this batch size, rounding up.
    pub fn steps_per_epoch(&self) -> usize {
        self.epoch_samples().div_ceil(self.batch_size)
    }
}

/// p_i = w_i / sum(w), w_i = (|D_i| / sum|D|)^(1/T). An infinite temperature
/// makes the exponent zero, hence uniform.
pub fn mixture_probabilities(spec: &MixSpec) -> Vec<f64> {
    let total: f64 = spec.sizes.iter().map(|&s| s as f64).sum();
    let exponent = 1.0 / spec.temperature;
    let weights: Vec<f64> = spec
        .sizes
        .iter()
        .map(|&s| (s as f64 / total).powf(exponent))
        .collect();
    let norm: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / norm).collect()
}

/// Cyclic shuffled index stream over one dataset.
#[derive(Debug, Clone)]
struct Stream {
    perm: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Stream {
    fn new(len: usize, seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        let mut perm: Vec<usize> = (0..len).collect();
        perm.shuffle(&mut rng);
        Stream { perm, pos: 0, rng }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.perm.len() {
            self.perm.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.perm[self.pos];
        self.pos += 1;
        out
    }
}

/// Serializable sampler state for exact resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerState {
    pub select_rng: RngState,
    pub streams: Vec<StreamState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamState {
    pub perm: Vec<usize>,
    pub pos: usize,
    pub rng: RngState,
}

/// Draws (dataset index, example index) pairs for batch construction.
#[derive(Debug, Clone)]
pub struct Sampler {
    spec: MixSpec,
    probs: Vec<f64>,
    select_rng: ChaCha8Rng,
    streams: Vec<Stream>,
}

impl Sampler {
    pub fn new(spec: MixSpec) -> Self {
        let probs = mixture_probabilities(&spec);
        // Stream 0 selects datasets; streams 1.. shuffle each dataset.
        let mut select_rng = ChaCha8Rng::seed_from_u64(spec.seed);
        select_rng.set_stream(0);
        let streams = spec
            .sizes
            .iter()
            .enumerate()
            .map(|(i, &len)| Stream::new(len, spec.seed, i as u64 + 1))
            .collect();
        Sampler {
            spec,
            probs,
            select_rng,
            streams,
        }
    }

    pub fn spec(&self) -> &MixSpec {
        &self.spec
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    /// The next batch of (dataset, example) indices. Each slot draws a dataset
    /// independently, then takes the next example from that dataset's cyclic
    /// stream.
    pub fn next_batch(&mut self) -> Vec<(usize, usize)> {
        (0..self.spec.batch_size)
            .map(|_| {
                let d = self.draw_dataset();
                (d, self.streams[d].next())
            })
            .collect()
    }

    fn draw_dataset(&mut self) -> usize {
        let u: f64 = self.select_rng.gen();
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.len() - 1
    }

    pub fn state(&self) -> SamplerState {
        SamplerState {
            select_rng: RngState::capture(&self.select_rng),
            streams: self
                .streams
                .iter()
                .map(|s| StreamState {
                    perm: s.perm.clone(),
                    pos: s.pos,
                    rng: RngState::capture(&s.rng),
                })
                .collect(),
        }
    }

    pub fn restore(spec: MixSpec, state: &SamplerState) -> Result<Self, SamplerError> {
        if state.streams.len() != spec.sizes.len() {
            return Err(SamplerError::Invalid(format!(
                "snapshot has {} streams, spec has {} datasets",
                state.streams.len(),
                spec.sizes.len()
            )));
        }
        let probs = mixture_probabilities(&spec);
        let streams = state
            .streams
            .iter()
            .zip(&spec.sizes)
            .map(|(s, &len)| {
                if s.perm.len() != len {
                    return Err(SamplerError::Invalid(format!(
                        "snapshot permutation over {} examples, dataset has {len}",
                        s.perm.len()
                    )));
                }
                Ok(Stream {
                    perm: s.perm.clone(),
                    pos: s.pos,
                    rng: s.rng.restore(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Sampler {
            spec,
            probs,
            select_rng: state.select_rng.restore(),
            streams,
        })
    }
}
