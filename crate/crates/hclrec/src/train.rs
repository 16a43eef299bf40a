//! Training loop: epoch batching, the warm-up gate for the contrastive
//! terms, Adam over every parameter group, per-step loss logging, and
//! checkpointing. All randomness flows through purpose-keyed streams so two
//! serial runs with one seed produce identical logs.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{generate_flat_views, generate_multilevel_views, AugmentationPolicy, MultiLevelViews};
use crate::corpus::SplitDataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, metric_key, EvalConfig, EvalTarget};
use crate::model::{
    embed, embed_backward, encode, encode_backward, hierarchical_backward,
    hierarchical_forward, save_checkpoint, sequence_representation,
    sequence_representation_backward, Aggregation, DropoutCtx, ModelDims, ModelParams,
};
use crate::objective::{
    final_loss, info_nce_with_grad, next_item_loss_with_grad, total_contrastive,
    ContrastiveSim, LossWeights,
};
use crate::rng::{mix, mix_str, stream};
use crate::similarity::SimilarityIndex;

pub const SEED_ENV: &str = "HCLREC_SEED";

/// Seed override from the environment, when set and parseable.
pub fn seed_from_env() -> Option<u64> {
    std::env::var(SEED_ENV).ok()?.trim().parse().ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
    /// M: maximum view level.
    pub levels: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    /// Global-norm gradient clip; absent = no clipping.
    pub grad_clip: Option<f64>,
    pub weights: LossWeights,
    pub sim: ContrastiveSim,
    pub aggregation: Aggregation,
    pub eval_ks: Vec<usize>,
    pub augment: AugmentationPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            epochs: 100,
            warmup_epochs: 5,
            learning_rate: 0.001,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            d: 64,
            heads: 2,
            layers: 2,
            max_len: 50,
            levels: 3,
            dropout: 0.2,
            seed: 42,
            early_stop_patience: 10,
            grad_clip: None,
            weights: LossWeights::default(),
            sim: ContrastiveSim::Dot,
            aggregation: Aggregation::Last,
            eval_ks: vec![5, 10],
            augment: AugmentationPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0,1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0,1)".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return Err(Error::Config("eval_ks must be non-empty and positive".into()));
        }
        // Dims validation covers d/heads/layers/max_len/levels positivity.
        ModelDims {
            n_items: 1,
            d: self.d,
            heads: self.heads,
            layers: self.layers,
            max_len: self.max_len,
            levels: self.levels,
        }
        .validate()?;
        self.weights.validate(self.levels)?;
        self.augment.intensities.validate()?;
        Ok(())
    }

    /// Parse a config file: JSON when the content starts with '{', else
    /// flat `key=value` lines (# comments allowed).
    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path)?;
        if text.trim_start().starts_with('{') {
            let cfg: TrainConfig = serde_json::from_str(&text)?;
            Ok(cfg)
        } else {
            let mut cfg = TrainConfig::default();
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: "expected key=value".into(),
                })?;
                cfg.apply_override(key.trim(), value.trim())?;
            }
            Ok(cfg)
        }
    }

    /// Set one field by dotted key, as used for `--override k=v` flags.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::Config(format!("cannot parse {value:?} for key {key}"))
            })
        }
        fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
            value
                .split(',')
                .map(|v| parse(key, v.trim()))
                .collect()
        }
        match key {
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "d" => self.d = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "levels" => self.levels = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "early_stop_patience" => self.early_stop_patience = parse(key, value)?,
            "grad_clip" => {
                self.grad_clip = if value.eq_ignore_ascii_case("none") {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "sim" => {
                self.sim = match value {
                    "dot" => ContrastiveSim::Dot,
                    "cosine" => ContrastiveSim::Cosine,
                    other => return Err(Error::Config(format!("unknown sim {other:?}"))),
                }
            }
            "aggregation" => {
                self.aggregation = match value {
                    "last" => Aggregation::Last,
                    "mean" => Aggregation::Mean,
                    other => {
                        return Err(Error::Config(format!("unknown aggregation {other:?}")))
                    }
                }
            }
            "eval_ks" => self.eval_ks = parse_list(key, value)?,
            "weights.lambdas" => self.weights.lambdas = parse_list(key, value)?,
            "weights.temperatures" => self.weights.temperatures = parse_list(key, value)?,
            "augment.threshold" => self.augment.threshold = parse(key, value)?,
            "augment.short_set" => self.augment.short_set = parse_list(key, value)?,
            "augment.long_set" => self.augment.long_set = parse_list(key, value)?,
            "augment.intensities.insert" => self.augment.intensities.insert = parse(key, value)?,
            "augment.intensities.substitute" => {
                self.augment.intensities.substitute = parse(key, value)?
            }
            "augment.intensities.mask" => self.augment.intensities.mask = parse(key, value)?,
            "augment.intensities.reorder" => {
                self.augment.intensities.reorder = parse(key, value)?
            }
            "augment.intensities.crop" => self.augment.intensities.crop = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Contrast every level at the encoder output; allocate no blocks.
    pub no_blocks: bool,
    /// One view pair made by composing all M operators at once.
    pub flat_aug: bool,
    /// Force warmup_epochs to zero.
    pub no_warmup: bool,
    /// Single-level views, one operator each.
    pub coserec_mode: bool,
}

impl AblationFlags {
    pub fn active_names(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.no_blocks {
            out.push("no_blocks");
        }
        if self.flat_aug {
            out.push("flat_aug");
        }
        if self.no_warmup {
            out.push("no_warmup");
        }
        if self.coserec_mode {
            out.push("coserec_mode");
        }
        out
    }
}

/// Number of contrastive levels the run in fact trains.
pub fn effective_levels(cfg: &TrainConfig, flags: &AblationFlags) -> usize {
    if flags.coserec_mode || flags.flat_aug {
        1
    } else {
        cfg.levels
    }
}

/// Whether any block parameters exist in this run.
pub fn uses_blocks(cfg: &TrainConfig, flags: &AblationFlags) -> bool {
    !flags.no_blocks && !flags.flat_aug && !flags.coserec_mode && cfg.levels > 1
}

fn effective_weights(cfg: &TrainConfig, flags: &AblationFlags) -> LossWeights {
    if flags.coserec_mode || flags.flat_aug {
        LossWeights {
            lambdas: vec![cfg.weights.lambdas[0]],
            temperatures: vec![cfg.weights.temperatures[0]],
        }
    } else {
        cfg.weights.clone()
    }
}

fn effective_policy(cfg: &TrainConfig, flags: &AblationFlags) -> AugmentationPolicy {
    let mut p = cfg.augment.clone();
    p.max_level = if flags.coserec_mode { 1 } else { cfg.levels };
    p.max_len = cfg.max_len;
    p.rng_seed = cfg.seed;
    p
}

/// One optimization step's worth of data.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    /// Dataset indices of the sampled users.
    pub users: Vec<usize>,
    pub inputs: Array2<usize>,
    /// Next item per position; 0 where no supervision exists.
    pub targets: Array2<usize>,
    pub negatives: Array2<usize>,
    /// Empty while the warm-up gate holds.
    pub views: Vec<MultiLevelViews>,
}

/// Assemble padded inputs, shifted targets, sampled negatives, and (past
/// warm-up) the view pairs for `users`.
pub fn build_batch(
    split: &SplitDataset,
    users: &[usize],
    cfg: &TrainConfig,
    policy: &AugmentationPolicy,
    index: &SimilarityIndex,
    flags: &AblationFlags,
    epoch: usize,
    with_views: bool,
) -> Result<TrainBatch> {
    if users.is_empty() {
        return Err(Error::Data("empty user batch".into()));
    }
    let t = cfg.max_len;
    let n_items = split.n_items();
    let b = users.len();
    let mut inputs = Array2::zeros((b, t));
    let mut targets = Array2::zeros((b, t));
    let mut negatives = Array2::zeros((b, t));
    let mut views = Vec::new();
    for (row, &u) in users.iter().enumerate() {
        let train = split.train_items(u);
        // SR pairs come from the last max_len+1 training items: inputs are
        // all but the final one, each position predicting its successor.
        let tail_start = train.len().saturating_sub(t + 1);
        let tail = &train[tail_start..];
        let seen: HashSet<usize> = split.items(u).iter().copied().collect();
        let input_items: &[usize] = if tail.len() >= 2 { &tail[..tail.len() - 1] } else { tail };
        let start = t - input_items.len().min(t);
        for (j, &item) in input_items.iter().enumerate() {
            inputs[[row, start + j]] = item;
        }
        if tail.len() >= 2 {
            let mut neg_rng = stream(mix(mix(mix_str(cfg.seed, "neg"), epoch as u64), u as u64));
            for j in 0..tail.len() - 1 {
                let pos = tail[j + 1];
                targets[[row, start + j]] = pos;
                let mut attempts = 0;
                let neg = loop {
                    let cand = neg_rng.random_range(1..=n_items);
                    if !seen.contains(&cand) {
                        break cand;
                    }
                    attempts += 1;
                    if attempts > 10_000 {
                        return Err(Error::Data(format!(
                            "cannot sample a negative for user {u}: catalog too small"
                        )));
                    }
                };
                negatives[[row, start + j]] = neg;
            }
        }
        if with_views {
            let mut view_rng =
                stream(mix(mix(mix_str(cfg.seed, "view"), epoch as u64), u as u64));
            let user_id = split.sequences()[u].user_index;
            let mlv = if flags.flat_aug {
                let pair =
                    generate_flat_views(user_id, input_items, policy, index, &mut view_rng)?;
                MultiLevelViews {
                    user_index: user_id,
                    pairs: vec![pair],
                    chains: [Vec::new(), Vec::new()],
                }
            } else {
                generate_multilevel_views(user_id, input_items, policy, index, &mut view_rng)?
            };
            views.push(mlv);
        }
    }
    Ok(TrainBatch {
        users: users.to_vec(),
        inputs,
        targets,
        negatives,
        views,
    })
}

fn pad_views(seqs: &[&[usize]], t: usize) -> Array2<usize> {
    let mut out = Array2::zeros((seqs.len(), t));
    for (row, seq) in seqs.iter().enumerate() {
        let keep = &seq[seq.len().saturating_sub(t)..];
        let start = t - keep.len();
        for (j, &item) in keep.iter().enumerate() {
            out[[row, start + j]] = item;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sr: f64,
    /// Per-level contrastive losses; empty when the gate is closed.
    pub l_cl: Vec<f64>,
    pub total: f64,
}

/// Per-level count of blocks each view pass traversed.
pub type RoutingCounts = BTreeMap<usize, usize>;

/// L_final over one batch, with gradients for every parameter when
/// `grads` is given. Views route through their level's blocks unless an
/// ablation flattens routing to the encoder output.
pub fn joint_loss(
    params: &ModelParams,
    batch: &TrainBatch,
    weights: &LossWeights,
    cfg: &TrainConfig,
    flags: &AblationFlags,
    drop: &DropoutCtx,
    site: &str,
) -> Result<LossBreakdown> {
    run_joint(params, batch, weights, cfg, flags, drop, site, None, None)
}

pub fn joint_loss_and_grad(
    params: &ModelParams,
    batch: &TrainBatch,
    weights: &LossWeights,
    cfg: &TrainConfig,
    flags: &AblationFlags,
    drop: &DropoutCtx,
    site: &str,
    routing: Option<&mut RoutingCounts>,
) -> Result<(LossBreakdown, ModelParams)> {
    let mut grads = params.zeros_like();
    let breakdown = run_joint(
        params,
        batch,
        weights,
        cfg,
        flags,
        drop,
        site,
        Some(&mut grads),
        routing,
    )?;
    Ok((breakdown, grads))
}

#[allow(clippy::too_many_arguments)]
fn run_joint(
    params: &ModelParams,
    batch: &TrainBatch,
    weights: &LossWeights,
    cfg: &TrainConfig,
    flags: &AblationFlags,
    drop: &DropoutCtx,
    site: &str,
    mut grads: Option<&mut ModelParams>,
    mut routing: Option<&mut RoutingCounts>,
) -> Result<LossBreakdown> {
    // Next-item term on the original sequences.
    let h0 = embed(&batch.inputs, params)?;
    let sr_site = format!("{site}.sr");
    let (h, enc_cache) = encode(&h0, params, drop, &sr_site);
    let l_sr = match grads.as_deref_mut() {
        Some(g) => {
            let (l, dh) =
                next_item_loss_with_grad(&h, &batch.targets, &batch.negatives, params, g)?;
            let dh0 = encode_backward(&dh, &enc_cache, params, g, drop, &sr_site);
            embed_backward(&dh0, &batch.inputs, g);
            l
        }
        None => crate::objective::next_item_loss(&h, &batch.targets, &batch.negatives, params)?,
    };
    if !l_sr.is_finite() {
        return Err(Error::Numeric(format!("non-finite next-item loss at {site}")));
    }

    let mut l_cl = Vec::new();
    if !batch.views.is_empty() {
        let m_eff = weights.lambdas.len();
        let flatten = flags.no_blocks || flags.flat_aug || flags.coserec_mode;
        for m in 1..=m_eff {
            let seqs_a: Vec<&[usize]> = batch
                .views
                .iter()
                .map(|v| v.pairs[m - 1].a.as_slice())
                .collect();
            let seqs_b: Vec<&[usize]> = batch
                .views
                .iter()
                .map(|v| v.pairs[m - 1].b.as_slice())
                .collect();
            let va = pad_views(&seqs_a, cfg.max_len);
            let vb = pad_views(&seqs_b, cfg.max_len);
            let m_route = if flatten { 1 } else { m };
            let forward = |v: &Array2<usize>, tag: &str| -> Result<_> {
                let h0 = embed(v, params)?;
                let enc_site = format!("{site}.cl{m}.{tag}.enc");
                let (h1, cache1) = encode(&h0, params, drop, &enc_site);
                let hier_site = format!("{site}.cl{m}.{tag}.hier");
                let (h2, cache2) = hierarchical_forward(&h1, m_route, params, drop, &hier_site)?;
                let rep = sequence_representation(&h2, cfg.aggregation)?;
                Ok((h2, cache1, cache2, rep, enc_site, hier_site))
            };
            let (h2a, ca1, ca2, rep_a, site_a_enc, site_a_hier) = forward(&va, "a")?;
            let (h2b, cb1, cb2, rep_b, site_b_enc, site_b_hier) = forward(&vb, "b")?;
            if let Some(r) = routing.as_deref_mut() {
                let traversed = ca2.len();
                if let Some(prev) = r.insert(m, traversed) {
                    debug_assert_eq!(prev, traversed);
                }
            }
            let tau = weights.temperatures[m - 1];
            let lambda = weights.lambdas[m - 1];
            if let Some(g) = grads.as_deref_mut() {
                let (l_m, da, db) = info_nce_with_grad(&rep_a, &rep_b, tau, cfg.sim)?;
                l_cl.push(l_m);
                for (drep, h2, cache1, cache2, v, enc_site, hier_site) in [
                    (da, &h2a, &ca1, &ca2, &va, &site_a_enc, &site_a_hier),
                    (db, &h2b, &cb1, &cb2, &vb, &site_b_enc, &site_b_hier),
                ] {
                    let d3 = sequence_representation_backward(
                        &(&drep * lambda),
                        &h2.mask,
                        cfg.max_len,
                        cfg.aggregation,
                    )?;
                    let dh1 =
                        hierarchical_backward(&d3, cache2, &h2.mask, params, g, drop, hier_site);
                    let dh0 = encode_backward(&dh1, cache1, params, g, drop, enc_site);
                    embed_backward(&dh0, v, g);
                }
            } else {
                l_cl.push(crate::objective::info_nce(&rep_a, &rep_b, tau, cfg.sim)?);
            }
            if !l_cl[m - 1].is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite level-{m} contrastive loss at {site}"
                )));
            }
        }
    }
    let total = if l_cl.is_empty() {
        final_loss(l_sr, 0.0)
    } else {
        final_loss(l_sr, total_contrastive(&l_cl, weights)?)
    };
    Ok(LossBreakdown { l_sr, l_cl, total })
}

/// Adam with bias correction, keyed by tensor name. The padding embedding
/// row is re-zeroed after every step.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Adam {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, clip: Option<f64>) {
        self.t += 1;
        let scale = match clip {
            Some(c) => {
                let norm: f64 = grads
                    .named_views()
                    .iter()
                    .map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let gviews = grads.named_views();
        let mut pviews = params.named_views_mut();
        debug_assert_eq!(gviews.len(), pviews.len());
        for ((gname, g), (pname, p)) in gviews.iter().zip(pviews.iter_mut()) {
            debug_assert_eq!(gname, pname);
            let m = self
                .m
                .entry(gname.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(gname.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    let g = g * scale;
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
        params.item_embedding.row_mut(0).fill(0.0);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub warmup: bool,
    pub l_sr: f64,
    pub l_cl: Vec<f64>,
    pub l_total: f64,
    pub val_metrics: BTreeMap<String, f64>,
    pub max_abs_block_grad: f64,
    /// level → blocks traversed by that level's views this epoch.
    pub routing: RoutingCounts,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub best_params: ModelParams,
    pub best_epoch: usize,
    pub best_val_metric: f64,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Streams metrics.csv / steps.csv / timing.csv and checkpoints under one
/// run directory. Wall-clock times stay out of metrics.csv so reruns with
/// one seed byte-match it.
pub struct RunWriter {
    dir: PathBuf,
    metrics: csv::Writer<File>,
    steps: csv::Writer<File>,
    timing: csv::Writer<File>,
}

impl RunWriter {
    pub fn create(dir: &Path, levels: usize, ks: &[usize]) -> Result<RunWriter> {
        std::fs::create_dir_all(dir)?;
        let mut metrics = csv::Writer::from_path(dir.join("metrics.csv"))
            .map_err(|e| Error::Data(e.to_string()))?;
        let mut header = vec!["epoch".to_string(), "warmup".to_string(), "l_sr".to_string()];
        for m in 1..=levels {
            header.push(format!("l_cl_{m}"));
        }
        header.push("l_total".to_string());
        for &k in ks {
            header.push(metric_key("hit", k));
            header.push(metric_key("ndcg", k));
        }
        header.push("max_abs_block_grad".to_string());
        metrics
            .write_record(&header)
            .map_err(|e| Error::Data(e.to_string()))?;

        let mut steps = csv::Writer::from_path(dir.join("steps.csv"))
            .map_err(|e| Error::Data(e.to_string()))?;
        let mut shdr = vec!["epoch".to_string(), "step".to_string(), "l_sr".to_string()];
        for m in 1..=levels {
            shdr.push(format!("l_cl_{m}"));
        }
        shdr.push("l_total".to_string());
        steps
            .write_record(&shdr)
            .map_err(|e| Error::Data(e.to_string()))?;

        let mut timing = csv::Writer::from_path(dir.join("timing.csv"))
            .map_err(|e| Error::Data(e.to_string()))?;
        timing
            .write_record(["epoch", "wall_secs"])
            .map_err(|e| Error::Data(e.to_string()))?;
        Ok(RunWriter {
            dir: dir.to_path_buf(),
            metrics,
            steps,
            timing,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Resolved run description, written before the first epoch.
    pub fn write_run_header(&self, header: &serde_json::Value) -> Result<()> {
        let mut f = File::create(self.dir.join("run.json"))?;
        f.write_all(serde_json::to_string_pretty(header)?.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }

    fn write_step(&mut self, epoch: usize, step: usize, b: &LossBreakdown, levels: usize) -> Result<()> {
        let mut row = vec![epoch.to_string(), step.to_string(), b.l_sr.to_string()];
        for m in 0..levels {
            row.push(b.l_cl.get(m).copied().unwrap_or(0.0).to_string());
        }
        row.push(b.total.to_string());
        self.steps
            .write_record(&row)
            .map_err(|e| Error::Data(e.to_string()))?;
        // keep the step log on disk so an aborted run still shows its tail
        self.steps.flush()?;
        Ok(())
    }

    fn write_epoch(&mut self, rec: &EpochRecord, levels: usize, ks: &[usize]) -> Result<()> {
        let mut row = vec![
            rec.epoch.to_string(),
            (rec.warmup as u8).to_string(),
            rec.l_sr.to_string(),
        ];
        for m in 0..levels {
            row.push(rec.l_cl.get(m).copied().unwrap_or(0.0).to_string());
        }
        row.push(rec.l_total.to_string());
        for &k in ks {
            for metric in ["hit", "ndcg"] {
                row.push(
                    rec.val_metrics
                        .get(&metric_key(metric, k))
                        .copied()
                        .unwrap_or(0.0)
                        .to_string(),
                );
            }
        }
        row.push(rec.max_abs_block_grad.to_string());
        self.metrics
            .write_record(&row)
            .map_err(|e| Error::Data(e.to_string()))?;
        self.metrics.flush()?;
        Ok(())
    }

    fn write_timing(&mut self, epoch: usize, wall_secs: f64) -> Result<()> {
        self.timing
            .write_record([epoch.to_string(), format!("{wall_secs:.3}")])
            .map_err(|e| Error::Data(e.to_string()))?;
        self.timing.flush()?;
        Ok(())
    }

    fn dump_bad_batch(&self, epoch: usize, step: usize, batch: &TrainBatch) -> Result<PathBuf> {
        let path = self.dir.join("diagnostic_batch.json");
        let dump = serde_json::json!({
            "epoch": epoch,
            "step": step,
            "users": batch.users,
            "inputs": batch.inputs.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
            "targets": batch.targets.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
        });
        std::fs::write(&path, serde_json::to_string_pretty(&dump)?)?;
        Ok(path)
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Full training run. Writes logs/checkpoints through `writer` when given.
pub fn fit(
    split: &SplitDataset,
    index: &SimilarityIndex,
    cfg: &TrainConfig,
    flags: &AblationFlags,
    mut writer: Option<&mut RunWriter>,
) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    if flags.no_warmup {
        cfg.warmup_epochs = 0;
    }
    cfg.validate()?;
    if split.n_users() == 0 {
        return Err(Error::Data("empty training split".into()));
    }
    let policy = effective_policy(&cfg, flags);
    policy.validate()?;
    let weights = effective_weights(&cfg, flags);
    weights.validate(effective_levels(&cfg, flags))?;

    let dims = ModelDims {
        n_items: split.n_items(),
        d: cfg.d,
        heads: cfg.heads,
        layers: cfg.layers,
        max_len: cfg.max_len,
        levels: cfg.levels,
    };
    let mut params = ModelParams::init(dims, uses_blocks(&cfg, flags), cfg.seed)?;
    let mut adam = Adam::new(&cfg);
    let drop = DropoutCtx {
        rate: cfg.dropout,
        seed: mix_str(cfg.seed, "dropout"),
    };
    let eval_cfg = EvalConfig {
        ks: cfg.eval_ks.clone(),
        exclude_seen: true,
        cohort_threshold: None,
        batch_size: cfg.batch_size,
    };
    let sel_k = if cfg.eval_ks.contains(&10) {
        10
    } else {
        *cfg.eval_ks.iter().max().unwrap()
    };
    let m_eff = effective_levels(&cfg, flags);

    if let Some(w) = writer.as_deref_mut() {
        w.write_run_header(&serde_json::json!({
            "config": cfg,
            "flags": flags,
            "effective_levels": m_eff,
            "uses_blocks": uses_blocks(&cfg, flags),
            "dataset_hash": split.content_hash(),
            "n_users": split.n_users(),
            "n_items": split.n_items(),
            "started": chrono::Utc::now().to_rfc3339(),
        }))?;
    }

    let mut history = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_params = params.clone();
    let mut since_best = 0usize;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let t0 = std::time::Instant::now();
        let warmup = epoch < cfg.warmup_epochs;
        let mut order: Vec<usize> = (0..split.n_users()).collect();
        order.shuffle(&mut stream(mix(mix_str(cfg.seed, "order"), epoch as u64)));

        let mut sr_losses = Vec::new();
        let mut cl_losses: Vec<Vec<f64>> = vec![Vec::new(); m_eff];
        let mut totals = Vec::new();
        let mut max_block_grad = 0.0f64;
        let mut routing = RoutingCounts::new();

        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = build_batch(
                split, chunk, &cfg, &policy, index, flags, epoch, !warmup,
            )?;
            if batch
                .targets
                .iter()
                .zip(batch.inputs.iter())
                .all(|(&t, _)| t == 0)
            {
                log::warn!("epoch {epoch} step {step}: no supervised positions, skipping");
                continue;
            }
            let site = format!("e{epoch}.s{step}");
            let result = joint_loss_and_grad(
                &params,
                &batch,
                &weights,
                &cfg,
                flags,
                &drop,
                &site,
                Some(&mut routing),
            );
            let (breakdown, grads) = match result {
                Ok(x) => x,
                Err(Error::Numeric(msg)) => {
                    if let Some(w) = writer.as_deref_mut() {
                        let path = w.dump_bad_batch(epoch, step, &batch)?;
                        return Err(Error::Numeric(format!(
                            "{msg}; offending batch dumped to {}",
                            path.display()
                        )));
                    }
                    return Err(Error::Numeric(msg));
                }
                Err(e) => return Err(e),
            };
            max_block_grad = max_block_grad.max(grads.max_abs_block_value());
            adam.step(&mut params, &grads, cfg.grad_clip);
            sr_losses.push(breakdown.l_sr);
            for (m, l) in breakdown.l_cl.iter().enumerate() {
                cl_losses[m].push(*l);
            }
            totals.push(breakdown.total);
            if let Some(w) = writer.as_deref_mut() {
                w.write_step(epoch, step, &breakdown, m_eff)?;
            }
        }

        let val = evaluate(&params, split, EvalTarget::Validation, &eval_cfg)?;
        let val_metric = val.overall.metric("ndcg", sel_k).unwrap_or(0.0);
        let record = EpochRecord {
            epoch,
            warmup,
            l_sr: mean(&sr_losses),
            l_cl: cl_losses.iter().map(|v| mean(v)).collect(),
            l_total: if warmup {
                // The gate keeps the logged total identical to L_SR.
                mean(&sr_losses)
            } else {
                mean(&totals)
            },
            val_metrics: val.overall.metrics.clone(),
            max_abs_block_grad: max_block_grad,
            routing: routing.clone(),
        };
        if let Some(w) = writer.as_deref_mut() {
            w.write_epoch(&record, m_eff, &cfg.eval_ks)?;
            w.write_timing(epoch, t0.elapsed().as_secs_f64())?;
            save_checkpoint(&params, cfg.seed, epoch, &w.dir().join("last.ckpt"))?;
        }
        history.push(record);

        if val_metric > best_metric {
            best_metric = val_metric;
            best_epoch = epoch;
            best_params = params.clone();
            since_best = 0;
            if let Some(w) = writer.as_deref_mut() {
                save_checkpoint(&params, cfg.seed, epoch, &w.dir().join("best.ckpt"))?;
            }
        } else {
            since_best += 1;
            if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
                stopped_early = true;
                log::info!("early stop at epoch {epoch}; best epoch {best_epoch}");
                break;
            }
        }
    }

    Ok(TrainOutcome {
        params,
        best_params,
        best_epoch,
        best_val_metric: best_metric,
        history,
        stopped_early,
    })
}
