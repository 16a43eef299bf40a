//! Item-item co-occurrence similarity, used by the insert and substitute
//! augmentations.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::UserSequence;
use crate::error::{Error, Result};

/// How much one user's sequence contributes to each co-occurring pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// `1 / ln(1 + |s_u|)`: damps users with long histories.
    IufLog,
    /// Every user counts 1.
    Uniform,
}

impl Weighting {
    fn weight(self, seq_len: usize) -> f64 {
        match self {
            Weighting::IufLog => 1.0 / (1.0 + seq_len as f64).ln(),
            Weighting::Uniform => 1.0,
        }
    }
}

impl std::str::FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iuf-log" => Ok(Weighting::IufLog),
            "uniform" => Ok(Weighting::Uniform),
            other => Err(Error::Config(format!("unknown similarity weighting `{other}`"))),
        }
    }
}

/// Symmetric sparse co-occurrence scores plus per-item ranked neighbor
/// lists. Read-only after construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityIndex {
    n_items: usize,
    k: usize,
    weighting: Weighting,
    /// `scores[i]` holds (j, score) sorted by item index; slot 0 unused.
    scores: Vec<Vec<(usize, f64)>>,
    /// `top_k[i]`: up to k neighbor indices, descending score, ties to the
    /// lower index.
    top_k: Vec<Vec<usize>>,
}

impl SimilarityIndex {
    /// score(i, j); zero when the pair never co-occurs. Symmetric.
    pub fn score(&self, i: usize, j: usize) -> f64 {
        if i == j || i == 0 || j == 0 || i > self.n_items || j > self.n_items {
            return 0.0;
        }
        match self.scores[i].binary_search_by_key(&j, |&(jj, _)| jj) {
            Ok(pos) => self.scores[i][pos].1,
            Err(_) => 0.0,
        }
    }

    /// Ranked neighbors of `item`, best first. Empty when nothing ever
    /// co-occurred with it.
    pub fn neighbors(&self, item: usize) -> &[usize] {
        if item == 0 || item > self.n_items {
            return &[];
        }
        &self.top_k[item]
    }

    /// The single most similar item, if any.
    pub fn top_one(&self, item: usize) -> Option<usize> {
        self.neighbors(item).first().copied()
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

/// Build the index from training portions only. `score(i,j)` sums, over
/// users whose sequence contains both items, the user's weight; the
/// diagonal stays zero.
pub fn build_index(
    train_sequences: &[UserSequence],
    n_items: usize,
    k: usize,
    weighting: Weighting,
) -> Result<SimilarityIndex> {
    if train_sequences.is_empty() {
        return Err(Error::Data("similarity index needs a non-empty training split".into()));
    }
    if k == 0 {
        return Err(Error::Config("similarity top-k must be positive".into()));
    }
    // Each pair collects its users' weights and sums them in sorted order,
    // so scores (and hence tie ranking) never depend on input ordering.
    let mut maps: Vec<HashMap<usize, Vec<f64>>> = vec![HashMap::new(); n_items + 1];
    let mut distinct: Vec<usize> = Vec::new();
    for seq in train_sequences {
        let w = weighting.weight(seq.items.len());
        distinct.clear();
        distinct.extend_from_slice(&seq.items);
        distinct.sort_unstable();
        distinct.dedup();
        for (a_pos, &a) in distinct.iter().enumerate() {
            debug_assert!(a >= 1 && a <= n_items, "item index out of vocabulary");
            for &b in &distinct[a_pos + 1..] {
                maps[a].entry(b).or_default().push(w);
            }
        }
    }
    for a in 1..=n_items {
        // Accumulation always stored the sorted direction (a < b); mirror
        // those entries only, or previously-mirrored ones double up.
        let entries: Vec<(usize, Vec<f64>)> = maps[a]
            .iter()
            .filter(|(&b, _)| b > a)
            .map(|(&b, ws)| (b, ws.clone()))
            .collect();
        for (b, ws) in entries {
            maps[b].entry(a).or_default().extend(ws);
        }
    }
    let mut scores = Vec::with_capacity(n_items + 1);
    let mut top_k = Vec::with_capacity(n_items + 1);
    scores.push(Vec::new());
    top_k.push(Vec::new());
    for i in 1..=n_items {
        let mut row: Vec<(usize, f64)> = maps[i]
            .drain()
            .map(|(j, mut ws)| {
                ws.sort_by(f64::total_cmp);
                (j, ws.iter().sum::<f64>())
            })
            .collect();
        row.sort_unstable_by_key(|&(j, _)| j);
        let mut ranked: Vec<(usize, f64)> = row.clone();
        // Descending score; equal scores fall back to ascending index.
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        top_k.push(ranked.into_iter().map(|(j, _)| j).collect());
        scores.push(row);
    }
    Ok(SimilarityIndex {
        n_items,
        k,
        weighting,
        scores,
        top_k,
    })
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    key: String,
    index: SimilarityIndex,
}

/// Persist the index under a cache key (dataset hash + config digest).
pub fn save_cache(index: &SimilarityIndex, key: &str, path: &Path) -> Result<()> {
    let file = CacheFile {
        key: key.to_string(),
        index: index.clone(),
    };
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(f, &file)?;
    Ok(())
}

/// Load a cached index; `None` when the file is absent or was built for a
/// different key.
pub fn load_cache(key: &str, path: &Path) -> Result<Option<SimilarityIndex>> {
    if !path.exists() {
        return Ok(None);
    }
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let file: CacheFile = serde_json::from_reader(f)?;
    if file.key != key {
        return Ok(None);
    }
    Ok(Some(file.index))
}

/// Cache key for a dataset digest + build parameters.
pub fn cache_key(dataset_hash: &str, k: usize, weighting: Weighting) -> String {
    let tag = match weighting {
        Weighting::IufLog => "iuf-log",
        Weighting::Uniform => "uniform",
    };
    format!("{dataset_hash}:k={k}:w={tag}")
}
