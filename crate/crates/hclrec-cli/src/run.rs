//! Command drivers. Each takes a plain argument struct so the binary stays
//! a thin parser and the behavior is reachable from tests.

use std::collections::HashSet;
use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use hclrec::corpus::{
    build_split, k_core_filter, load_interactions, DatasetStats, InputFormat, SplitDataset,
};
use hclrec::eval::{
    evaluate, write_per_user_csv, EvalConfig, EvalOutput, EvalTarget, RankingReport,
};
use hclrec::model::load_checkpoint;
use hclrec::similarity::{build_index, SimilarityIndex, Weighting};
use hclrec::train::{
    effective_levels, fit, seed_from_env, AblationFlags, RunWriter, TrainConfig,
};
use hclrec::{Error, Result};

use crate::data::{load_dataset, save_dataset};
use crate::grid::{enumerate_cells, Cell, GridFile};
use crate::plot::line_chart;

pub struct PreprocessArgs {
    pub input: PathBuf,
    pub format: InputFormat,
    pub k: usize,
    pub max_len: usize,
    pub out: PathBuf,
}

pub fn preprocess(args: &PreprocessArgs) -> Result<()> {
    let rows = load_interactions(&args.input, args.format)?;
    let kept = k_core_filter(&rows, args.k);
    if kept.is_empty() {
        return Err(Error::Data(format!(
            "no interactions survive the {}-core filter",
            args.k
        )));
    }
    let (split, vocab) = build_split(&kept, args.max_len)?;
    let stats = DatasetStats::from_split(&split);
    save_dataset(&args.out, &split, &vocab, &stats)?;
    println!(
        "users {}  items {}  interactions {}  avg length {:.3}  sparsity {:.4}%  excluded {}",
        stats.users,
        stats.items,
        stats.interactions,
        stats.avg_length,
        stats.sparsity * 100.0,
        stats.excluded_users
    );
    println!("dataset hash {}", split.content_hash());
    println!("wrote {}", args.out.display());
    Ok(())
}

/// Config file + `--override` pairs + the seed env var, in that order.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::from_file(path)?;
    for pair in overrides {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            Error::Config(format!("--override takes KEY=VALUE, got {pair:?}"))
        })?;
        cfg.apply_override(key.trim(), value.trim())?;
    }
    if let Some(seed) = seed_from_env() {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn similarity_index(split: &SplitDataset, k: usize) -> Result<SimilarityIndex> {
    build_index(split.sequences(), split.n_items(), k, Weighting::IufLog)
}

fn selection_k(cfg: &TrainConfig) -> usize {
    if cfg.eval_ks.contains(&10) {
        10
    } else {
        *cfg.eval_ks.iter().max().expect("validated non-empty")
    }
}

fn print_report(label: &str, report: &RankingReport) {
    let cols: Vec<String> = report
        .metrics
        .iter()
        .map(|(name, value)| format!("{name} {value:.4}"))
        .collect();
    println!("{label:>8}  users {:<6} {}", report.n_users, cols.join("  "));
}

fn test_eval(
    params: &hclrec::model::ModelParams,
    split: &SplitDataset,
    cfg: &TrainConfig,
) -> Result<EvalOutput> {
    let ecfg = EvalConfig {
        ks: cfg.eval_ks.clone(),
        exclude_seen: true,
        cohort_threshold: None,
        batch_size: cfg.batch_size,
    };
    evaluate(params, split, EvalTarget::Test, &ecfg)
}

pub struct TrainArgs {
    pub data: PathBuf,
    pub config: PathBuf,
    pub overrides: Vec<String>,
    pub out: PathBuf,
    pub index_k: usize,
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let cfg = load_config(&args.config, &args.overrides)?;
    let split = load_dataset(&args.data)?;
    let index = similarity_index(&split, args.index_k)?;
    let flags = AblationFlags::default();
    let mut writer = RunWriter::create(&args.out, effective_levels(&cfg, &flags), &cfg.eval_ks)?;
    let outcome = fit(&split, &index, &cfg, &flags, Some(&mut writer))?;

    let k = selection_k(&cfg);
    println!(
        "best epoch {} (val ndcg@{k} {:.4}){}",
        outcome.best_epoch,
        outcome.best_val_metric,
        if outcome.stopped_early { ", stopped early" } else { "" }
    );
    let test = test_eval(&outcome.best_params, &split, &cfg)?;
    print_report("test", &test.overall);
    println!(
        "checkpoints {} and {}",
        args.out.join("best.ckpt").display(),
        args.out.join("last.ckpt").display()
    );

    let report = serde_json::json!({
        "best_epoch": outcome.best_epoch,
        "best_val_metric": outcome.best_val_metric,
        "stopped_early": outcome.stopped_early,
        "test": test.overall.metrics,
    });
    let mut f = File::create(args.out.join("report.json"))?;
    f.write_all(serde_json::to_string_pretty(&report)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub cohort_threshold: Option<usize>,
    pub ks: Vec<usize>,
    pub per_user: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let (params, meta) = load_checkpoint(&args.checkpoint)?;
    let split = load_dataset(&args.data)?;
    if split.n_items() != params.dims.n_items {
        return Err(Error::Data(format!(
            "checkpoint was trained on |V|={} but the dataset has |V|={}",
            params.dims.n_items,
            split.n_items()
        )));
    }
    let ecfg = EvalConfig {
        ks: args.ks.clone(),
        exclude_seen: true,
        cohort_threshold: args.cohort_threshold,
        batch_size: 256,
    };
    let output = evaluate(&params, &split, EvalTarget::Test, &ecfg)?;
    println!(
        "checkpoint epoch {}, blocks {}",
        meta.epoch,
        if meta.has_blocks { "present" } else { "stripped" }
    );
    print_report("overall", &output.overall);
    if let Some(short) = &output.short {
        print_report("short", short);
    }
    if let Some(long) = &output.long {
        print_report("long", long);
    }
    if let Some(path) = &args.per_user {
        write_per_user_csv(path, &output.records)?;
        println!("wrote {}", path.display());
    }
    if let Some(path) = &args.out {
        let mut f = File::create(path)?;
        f.write_all(serde_json::to_string_pretty(&serde_json::json!({
            "overall": output.overall,
            "short": output.short,
            "long": output.long,
        }))?.as_bytes())?;
        f.write_all(b"\n")?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// `no_blocks,flat_aug` runs two variants; `no_blocks+no_warmup` is one
/// variant with both flags set.
fn parse_variants(list: &str) -> Result<Vec<(String, AblationFlags)>> {
    let mut variants = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let mut flags = AblationFlags::default();
        for part in name.split('+').map(str::trim) {
            match part {
                "no_blocks" => flags.no_blocks = true,
                "flat_aug" => flags.flat_aug = true,
                "no_warmup" => flags.no_warmup = true,
                "coserec_mode" => flags.coserec_mode = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown ablation variant {other:?} (expected no_blocks, flat_aug, no_warmup, coserec_mode)"
                    )))
                }
            }
        }
        variants.push((name.to_string(), flags));
    }
    if variants.is_empty() {
        return Err(Error::Config("--variants lists no variants".into()));
    }
    Ok(variants)
}

pub struct AblateArgs {
    pub data: PathBuf,
    pub config: PathBuf,
    pub variants: String,
    pub overrides: Vec<String>,
    pub out: PathBuf,
    pub index_k: usize,
}

pub fn ablate(args: &AblateArgs) -> Result<()> {
    let cfg = load_config(&args.config, &args.overrides)?;
    let split = load_dataset(&args.data)?;
    let index = similarity_index(&split, args.index_k)?;
    let mut rows = vec![("full".to_string(), AblationFlags::default())];
    rows.extend(parse_variants(&args.variants)?);
    let k = selection_k(&cfg);

    let mut table: Vec<(String, f64, f64, f64)> = Vec::new();
    let mut hashes: Vec<String> = Vec::new();
    for (name, flags) in &rows {
        let dir = args.out.join(name);
        let mut writer = RunWriter::create(&dir, effective_levels(&cfg, flags), &cfg.eval_ks)?;
        let outcome = fit(&split, &index, &cfg, flags, Some(&mut writer))?;

        let header: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.join("run.json"))?)?;
        hashes.push(
            header["dataset_hash"]
                .as_str()
                .unwrap_or_default()
                .to_string(),
        );
        let (_, meta) = load_checkpoint(&dir.join("best.ckpt"))?;
        if flags.no_blocks && meta.has_blocks {
            return Err(Error::Data(format!(
                "variant {name} must not allocate block parameters, but its checkpoint has them"
            )));
        }

        let test = test_eval(&outcome.best_params, &split, &cfg)?;
        let hit = test.overall.metric("hit", k).unwrap_or(0.0);
        let ndcg = test.overall.metric("ndcg", k).unwrap_or(0.0);
        println!(
            "{name}: val ndcg@{k} {:.4}  test hit@{k} {hit:.4}  test ndcg@{k} {ndcg:.4}",
            outcome.best_val_metric
        );
        table.push((name.clone(), hit, ndcg, outcome.best_val_metric));
    }
    // every variant must have consumed the identical preprocessed input
    if !hashes.windows(2).all(|w| w[0] == w[1]) {
        return Err(Error::Data(format!(
            "ablation variants saw different dataset hashes: {hashes:?}"
        )));
    }

    println!();
    println!("{:<24} {:>10} {:>10}", "variant", format!("hit@{k}"), format!("ndcg@{k}"));
    for (name, hit, ndcg, _) in &table {
        println!("{name:<24} {hit:>10.4} {ndcg:>10.4}");
    }

    let mut w = csv::Writer::from_path(args.out.join("ablation.csv"))
        .map_err(|e| Error::Data(e.to_string()))?;
    w.write_record([
        "variant",
        &format!("hit@{k}"),
        &format!("ndcg@{k}"),
        &format!("val_ndcg@{k}"),
    ])
    .map_err(|e| Error::Data(e.to_string()))?;
    for (name, hit, ndcg, val) in &table {
        w.write_record([name, &hit.to_string(), &ndcg.to_string(), &val.to_string()])
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    println!("wrote {}", args.out.join("ablation.csv").display());
    Ok(())
}

pub struct SweepArgs {
    pub data: PathBuf,
    pub config: PathBuf,
    pub grid: PathBuf,
    pub out: PathBuf,
    pub index_k: usize,
}

fn apply_cell(base: &TrainConfig, cell: &Cell) -> TrainConfig {
    let mut cfg = base.clone();
    if let Some(l) = &cell.lambda {
        cfg.weights.lambdas = l.clone();
    }
    if let Some(t) = &cell.tau {
        cfg.weights.temperatures = t.clone();
    }
    if let Some(d) = cell.d {
        cfg.d = d;
    }
    if let Some(b) = cell.batch_size {
        cfg.batch_size = b;
    }
    if let Some(t) = cell.threshold {
        cfg.augment.threshold = t;
    }
    cfg
}

fn fmt_tuple(t: &Option<Vec<f64>>) -> String {
    t.as_ref()
        .map(|v| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        })
        .unwrap_or_default()
}

fn fmt_scalar(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Mean metric per distinct x, drawn only when the axis actually varies.
fn plot_axis(out: &Path, axis: &str, k: usize, xy: Vec<(f64, f64)>) -> Result<Option<PathBuf>> {
    let distinct: HashSet<u64> = xy.iter().map(|(x, _)| x.to_bits()).collect();
    if distinct.len() < 2 {
        return Ok(None);
    }
    let mut sorted = xy;
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let x = sorted[i].0;
        let mut sum = 0.0;
        let mut n = 0usize;
        while i < sorted.len() && sorted[i].0 == x {
            sum += sorted[i].1;
            n += 1;
            i += 1;
        }
        points.push((x, sum / n as f64));
    }
    let path = out.join(format!("{axis}.svg"));
    line_chart(
        &path,
        &format!("validation ndcg@{k} vs {axis}"),
        axis,
        &format!("ndcg@{k}"),
        &points,
    )?;
    Ok(Some(path))
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    let base = load_config(&args.config, &[])?;
    let grid = GridFile::from_file(&args.grid)?;
    let cells = enumerate_cells(&grid, base.levels)?;
    if cells.len() > grid.budget {
        return Err(Error::Config(format!(
            "sweep would run {} cells, over the budget of {} set in the grid file",
            cells.len(),
            grid.budget
        )));
    }
    let split = load_dataset(&args.data)?;
    let index = similarity_index(&split, args.index_k)?;
    std::fs::create_dir_all(&args.out)?;
    let k = selection_k(&base);

    let mut w = csv::Writer::from_path(args.out.join("sweep.csv"))
        .map_err(|e| Error::Data(e.to_string()))?;
    w.write_record([
        "lambda",
        "tau",
        "d",
        "batch_size",
        "threshold",
        &format!("val_ndcg@{k}"),
        &format!("test_hit@{k}"),
        &format!("test_ndcg@{k}"),
        "final_l_sr",
    ])
    .map_err(|e| Error::Data(e.to_string()))?;

    let mut scores = Vec::with_capacity(cells.len());
    for (i, cell) in cells.iter().enumerate() {
        let cfg = apply_cell(&base, cell);
        let outcome = fit(&split, &index, &cfg, &AblationFlags::default(), None)?;
        let test = test_eval(&outcome.best_params, &split, &cfg)?;
        let val = outcome.best_val_metric;
        let hit = test.overall.metric("hit", k).unwrap_or(0.0);
        let ndcg = test.overall.metric("ndcg", k).unwrap_or(0.0);
        let l_sr = outcome.history.last().map(|r| r.l_sr).unwrap_or(f64::NAN);
        println!(
            "[{}/{}] {}: val ndcg@{k} {val:.4}",
            i + 1,
            cells.len(),
            if cell.label().is_empty() { "base".into() } else { cell.label() }
        );
        w.write_record([
            fmt_tuple(&cell.lambda),
            fmt_tuple(&cell.tau),
            fmt_scalar(cell.d),
            fmt_scalar(cell.batch_size),
            fmt_scalar(cell.threshold),
            val.to_string(),
            hit.to_string(),
            ndcg.to_string(),
            l_sr.to_string(),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
        w.flush()?;
        scores.push(val);
    }

    for (axis, xy) in [
        (
            "d",
            cells
                .iter()
                .zip(&scores)
                .filter_map(|(c, &s)| c.d.map(|v| (v as f64, s)))
                .collect::<Vec<_>>(),
        ),
        (
            "batch_size",
            cells
                .iter()
                .zip(&scores)
                .filter_map(|(c, &s)| c.batch_size.map(|v| (v as f64, s)))
                .collect(),
        ),
        (
            "threshold",
            cells
                .iter()
                .zip(&scores)
                .filter_map(|(c, &s)| c.threshold.map(|v| (v as f64, s)))
                .collect(),
        ),
    ] {
        if let Some(path) = plot_axis(&args.out, axis, k, xy)? {
            println!("wrote {}", path.display());
        }
    }
    // tuple axes are charted by option index; the csv holds the values
    for axis in ["lambda", "tau"] {
        let mut seen: Vec<Vec<f64>> = Vec::new();
        let mut xy = Vec::new();
        for (cell, &s) in cells.iter().zip(&scores) {
            let tuple = if axis == "lambda" { &cell.lambda } else { &cell.tau };
            if let Some(t) = tuple {
                let idx = match seen.iter().position(|u| u == t) {
                    Some(i) => i,
                    None => {
                        seen.push(t.clone());
                        seen.len() - 1
                    }
                };
                xy.push((idx as f64, s));
            }
        }
        if let Some(path) = plot_axis(&args.out, axis, k, xy)? {
            println!("wrote {} (x is the option index in sweep.csv order)", path.display());
        }
    }
    println!("wrote {}", args.out.join("sweep.csv").display());
    Ok(())
}
