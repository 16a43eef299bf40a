//! Full-catalog ranking evaluation: every real item competes for the
//! target's rank, no candidate sampling. Reports Hit@K and NDCG@K overall
//! and, optionally, split into short/long user cohorts by prefix length.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::{cap_to_recent, SplitDataset};
use crate::error::{Error, Result};
use crate::model::{embed, encode, predict_scores, DropoutCtx, ModelParams};

/// 1-based rank of `target` among all non-excluded items. Ties count
/// against the target so equal scores never flatter the model.
pub fn rank_target(scores: &[f64], target: usize, exclude: &HashSet<usize>) -> Result<usize> {
    if target == 0 || target >= scores.len() {
        return Err(Error::Data(format!("target {target} outside catalog")));
    }
    if exclude.contains(&target) {
        return Err(Error::Data(format!("target {target} is in the exclusion set")));
    }
    let st = scores[target];
    if st.is_nan() {
        return Err(Error::Numeric("target score is NaN".into()));
    }
    let mut rank = 1;
    for (v, &s) in scores.iter().enumerate() {
        if v == target || exclude.contains(&v) {
            continue;
        }
        if s >= st {
            rank += 1;
        }
    }
    Ok(rank)
}

pub fn hit_at_k(rank: usize, k: usize) -> f64 {
    debug_assert!(rank >= 1 && k >= 1);
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

/// Single-relevant-item form: 1/log2(rank+1) inside the cutoff, else 0.
pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    debug_assert!(rank >= 1 && k >= 1);
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalTarget {
    Validation,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Cutoffs for Hit@K / NDCG@K.
    pub ks: Vec<usize>,
    /// Remove items from the user's prefix from the candidate set.
    pub exclude_seen: bool,
    /// Prefix lengths below this go to the "short" cohort.
    pub cohort_threshold: Option<usize>,
    /// Users scored per forward pass.
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![5, 10],
            exclude_seen: true,
            cohort_threshold: None,
            batch_size: 256,
        }
    }
}

/// Aggregated ranking outcome for one user population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub cohort: Option<String>,
    pub n_users: usize,
    /// user index → 1-based rank of the held-out target.
    pub per_user_rank: BTreeMap<u32, usize>,
    /// "hit@5", "ndcg@10", ... → value in [0,1].
    pub metrics: BTreeMap<String, f64>,
}

pub fn metric_key(metric: &str, k: usize) -> String {
    format!("{metric}@{k}")
}

impl RankingReport {
    pub fn from_ranks(
        ranks: &BTreeMap<u32, usize>,
        ks: &[usize],
        cohort: Option<String>,
    ) -> RankingReport {
        let n = ranks.len();
        // Summing over sorted rank values keeps the aggregate bit-identical
        // no matter how users were numbered or visited.
        let mut sorted: Vec<usize> = ranks.values().copied().collect();
        sorted.sort_unstable();
        let mut metrics = BTreeMap::new();
        for &k in ks {
            let (mut hit, mut ndcg) = (0.0, 0.0);
            for &r in &sorted {
                hit += hit_at_k(r, k);
                ndcg += ndcg_at_k(r, k);
            }
            let denom = n.max(1) as f64;
            metrics.insert(metric_key("hit", k), hit / denom);
            metrics.insert(metric_key("ndcg", k), ndcg / denom);
        }
        RankingReport {
            cohort,
            n_users: n,
            per_user_rank: ranks.clone(),
            metrics,
        }
    }

    pub fn metric(&self, name: &str, k: usize) -> Option<f64> {
        self.metrics.get(&metric_key(name, k)).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRankRecord {
    pub user: u32,
    pub prefix_len: usize,
    pub rank: usize,
    pub cohort: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub overall: RankingReport,
    pub short: Option<RankingReport>,
    pub long: Option<RankingReport>,
    pub records: Vec<UserRankRecord>,
}

fn batch_from_prefixes(prefixes: &[&[usize]], max_len: usize) -> Array2<usize> {
    let mut batch = Array2::zeros((prefixes.len(), max_len));
    for (row, prefix) in prefixes.iter().enumerate() {
        let recent = cap_to_recent(prefix, max_len);
        let start = max_len - recent.len();
        for (j, &item) in recent.iter().enumerate() {
            batch[[row, start + j]] = item;
        }
    }
    batch
}

/// Rank every user's held-out target with the encoder only; block
/// parameters never participate, so stripped checkpoints score identically.
pub fn evaluate(
    params: &ModelParams,
    split: &SplitDataset,
    which: EvalTarget,
    cfg: &EvalConfig,
) -> Result<EvalOutput> {
    if split.n_users() == 0 {
        return Err(Error::Data("no users to evaluate".into()));
    }
    if cfg.ks.is_empty() || cfg.ks.contains(&0) {
        return Err(Error::Config("metric cutoffs must be positive".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("evaluation batch size must be positive".into()));
    }
    let max_len = params.dims.max_len;
    let drop = DropoutCtx::disabled();
    let mut ranks: BTreeMap<u32, usize> = BTreeMap::new();
    let mut records = Vec::with_capacity(split.n_users());
    let users: Vec<usize> = (0..split.n_users()).collect();
    for chunk in users.chunks(cfg.batch_size) {
        let prefixes: Vec<&[usize]> = chunk
            .iter()
            .map(|&u| match which {
                EvalTarget::Validation => split.valid_prefix(u),
                EvalTarget::Test => split.test_prefix(u),
            })
            .collect();
        let batch = batch_from_prefixes(&prefixes, max_len);
        let h0 = embed(&batch, params)?;
        let (h, _) = encode(&h0, params, &drop, "eval");
        let scores = predict_scores(&h, params)?;
        for (row, &u) in chunk.iter().enumerate() {
            let target = match which {
                EvalTarget::Validation => split.valid_target(u),
                EvalTarget::Test => split.test_target(u),
            };
            let prefix = prefixes[row];
            let mut exclude: HashSet<usize> = HashSet::new();
            exclude.insert(0);
            if cfg.exclude_seen {
                exclude.extend(prefix.iter().copied());
            }
            exclude.remove(&target);
            let row_scores = scores.row(row);
            let rank = rank_target(
                row_scores.as_slice().expect("contiguous row"),
                target,
                &exclude,
            )?;
            let user = split.sequences()[u].user_index;
            ranks.insert(user, rank);
            let cohort = cfg.cohort_threshold.map(|t| {
                if prefix.len() < t {
                    "short".to_string()
                } else {
                    "long".to_string()
                }
            });
            records.push(UserRankRecord {
                user,
                prefix_len: prefix.len(),
                rank,
                cohort,
            });
        }
    }
    let overall = RankingReport::from_ranks(&ranks, &cfg.ks, None);
    let (short, long) = match cfg.cohort_threshold {
        None => (None, None),
        Some(_) => {
            let mut short_ranks = BTreeMap::new();
            let mut long_ranks = BTreeMap::new();
            for rec in &records {
                match rec.cohort.as_deref() {
                    Some("short") => short_ranks.insert(rec.user, rec.rank),
                    _ => long_ranks.insert(rec.user, rec.rank),
                };
            }
            (
                Some(RankingReport::from_ranks(
                    &short_ranks,
                    &cfg.ks,
                    Some("short".into()),
                )),
                Some(RankingReport::from_ranks(
                    &long_ranks,
                    &cfg.ks,
                    Some("long".into()),
                )),
            )
        }
    };
    Ok(EvalOutput {
        overall,
        short,
        long,
        records,
    })
}

/// One row per user: user, prefix_len, rank, cohort (blank without a
/// cohort threshold).
pub fn write_per_user_csv(path: &Path, records: &[UserRankRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    w.write_record(["user", "prefix_len", "rank", "cohort"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for r in records {
        w.write_record([
            r.user.to_string(),
            r.prefix_len.to_string(),
            r.rank.to_string(),
            r.cohort.clone().unwrap_or_default(),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
