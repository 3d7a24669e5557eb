//! Identity-balanced batch construction: `P` identities times `L` samples.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::stream_seed;
use crate::error::{HatError, Result};

/// Stream tag for batch sampling.
pub const SAMPLER_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub p_ids: usize,
    pub l: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { p_ids: 16, l: 4 }
    }
}

impl SamplerConfig {
    pub fn batch_size(&self) -> usize {
        self.p_ids * self.l
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.p_ids < 2 {
            errs.push(format!("data.sampler.p_ids: need at least 2 identities per batch, got {}", self.p_ids));
        }
        if self.l < 2 {
            errs.push(format!("data.sampler.l: need at least 2 samples per identity, got {}", self.l));
        }
        errs
    }
}

/// One epoch of batches as sample indices. Each identity's samples are
/// shuffled and cut into chunks of `L` (drawn with replacement when an
/// identity has fewer than `L`); batches take one chunk from each of `P`
/// randomly chosen identities that still have chunks left.
pub fn pk_batches(labels: &[usize], cfg: &SamplerConfig, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_id.entry(l).or_default().push(i);
    }
    if by_id.len() < cfg.p_ids {
        return Err(HatError::Config(format!(
            "dataset has {} identities, fewer than the {} sampled per batch",
            by_id.len(),
            cfg.p_ids
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &[SAMPLER_STREAM, epoch as u64]));
    let mut chunks: BTreeMap<usize, VecDeque<Vec<usize>>> = BTreeMap::new();
    for (&id, idxs) in &by_id {
        let mut pool: Vec<usize> = if idxs.len() < cfg.l {
            (0..cfg.l).map(|_| *idxs.choose(&mut rng).unwrap()).collect()
        } else {
            idxs.clone()
        };
        pool.shuffle(&mut rng);
        let q: VecDeque<Vec<usize>> = pool.chunks_exact(cfg.l).map(|c| c.to_vec()).collect();
        chunks.insert(id, q);
    }
    let mut available: Vec<usize> = chunks.keys().copied().collect();
    let mut batches = Vec::new();
    while available.len() >= cfg.p_ids {
        let picked: Vec<usize> = available.choose_multiple(&mut rng, cfg.p_ids).copied().collect();
        let mut batch = Vec::with_capacity(cfg.batch_size());
        for id in picked {
            let q = chunks.get_mut(&id).unwrap();
            batch.extend(q.pop_front().unwrap());
            if q.is_empty() {
                available.retain(|&a| a != id);
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}
