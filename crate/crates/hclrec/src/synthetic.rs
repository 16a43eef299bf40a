//! Deterministic toy dataset for smoke runs: items live in clusters and
//! users mostly walk each cluster's successor ring, so the next item is
//! highly predictable and a working model must learn it quickly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{SplitDataset, UserSequence};
use crate::error::{Error, Result};
use crate::rng::{mix, stream};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    /// Chance each step follows the ring; the rest jump uniformly.
    pub follow_prob: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_users: 200,
            n_items: 50,
            n_clusters: 5,
            follow_prob: 0.9,
            min_len: 14,
            max_len: 26,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_items == 0 || self.n_clusters == 0 {
            return Err(Error::Config("synthetic sizes must be positive".into()));
        }
        if self.n_items % self.n_clusters != 0 {
            return Err(Error::Config(format!(
                "{} items do not divide into {} clusters",
                self.n_items, self.n_clusters
            )));
        }
        if self.min_len < 3 || self.max_len < self.min_len {
            return Err(Error::Config("need 3 <= min_len <= max_len".into()));
        }
        if !(0.0..=1.0).contains(&self.follow_prob) {
            return Err(Error::Config("follow_prob must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// Next item on the ring inside `item`'s cluster. Items are 1-based.
pub fn ring_successor(item: usize, n_items: usize, n_clusters: usize) -> usize {
    let per = n_items / n_clusters;
    let base = ((item - 1) / per) * per; // 0-based cluster start
    base + ((item - 1 - base) + 1) % per + 1
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SplitDataset> {
    cfg.validate()?;
    let mut sequences = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let mut rng = stream(mix(cfg.seed, u as u64));
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut items = Vec::with_capacity(len);
        let mut current = rng.random_range(1..=cfg.n_items);
        items.push(current);
        for _ in 1..len {
            current = if rng.random_range(0.0..1.0) < cfg.follow_prob {
                ring_successor(current, cfg.n_items, cfg.n_clusters)
            } else {
                rng.random_range(1..=cfg.n_items)
            };
            items.push(current);
        }
        sequences.push(UserSequence {
            user_index: u as u32,
            items,
        });
    }
    Ok(SplitDataset::from_sequences(sequences, cfg.n_items))
}
