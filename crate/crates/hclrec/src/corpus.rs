//! Interaction-log loading, k-core filtering, and the leave-one-out split.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One raw (user, item, time) event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    /// Seconds since epoch, or any monotone ordering key. Ties are broken
    /// by input order (sorting is stable).
    pub timestamp: i64,
}

/// Supported raw input formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    /// `user<TAB>item<TAB>timestamp`
    Tsv,
    /// Amazon ratings CSV: `user,item,rating,timestamp`
    AmazonCsv,
    /// Yelp review JSON-lines with `user_id`, `business_id`, `date`.
    YelpJson,
}

impl FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(InputFormat::Tsv),
            "amazon-csv" => Ok(InputFormat::AmazonCsv),
            "yelp-json" => Ok(InputFormat::YelpJson),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for InputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            InputFormat::Tsv => "tsv",
            InputFormat::AmazonCsv => "amazon-csv",
            InputFormat::YelpJson => "yelp-json",
        };
        f.write_str(s)
    }
}

/// Read raw interactions from `path` in the declared format.
///
/// One `Interaction` per row; no deduplication. Malformed rows report
/// their 1-based line number.
pub fn load_interactions(path: &Path, format: InputFormat) -> Result<Vec<Interaction>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let display = path.display().to_string();
    match format {
        InputFormat::Tsv => load_tsv(reader, &display),
        InputFormat::AmazonCsv => load_amazon_csv(reader, &display),
        InputFormat::YelpJson => load_yelp_json(reader, &display),
    }
}

fn parse_err(path: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

fn load_tsv(reader: impl BufRead, path: &str) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let user = fields
            .next()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| parse_err(path, lineno, "missing user field"))?;
        let item = fields
            .next()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| parse_err(path, lineno, "missing item field"))?;
        let ts = fields
            .next()
            .ok_or_else(|| parse_err(path, lineno, "missing timestamp field"))?;
        let timestamp = ts
            .trim()
            .parse::<i64>()
            .map_err(|e| parse_err(path, lineno, format!("bad timestamp `{ts}`: {e}")))?;
        out.push(Interaction {
            user: user.to_string(),
            item: item.to_string(),
            timestamp,
        });
    }
    Ok(out)
}

fn load_amazon_csv(reader: impl BufRead, path: &str) -> Result<Vec<Interaction>> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut out = Vec::new();
    for (idx, record) in csv_reader.records().enumerate() {
        let lineno = idx + 1;
        let record = record.map_err(|e| parse_err(path, lineno, e.to_string()))?;
        if record.len() < 4 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected 4 fields (user,item,rating,timestamp), got {}", record.len()),
            ));
        }
        let user = record.get(0).unwrap_or("");
        let item = record.get(1).unwrap_or("");
        if user.is_empty() || item.is_empty() {
            return Err(parse_err(path, lineno, "empty user or item id"));
        }
        let ts = record.get(3).unwrap_or("").trim();
        // Some dumps carry float-formatted epochs.
        let timestamp = ts
            .parse::<i64>()
            .or_else(|_| ts.parse::<f64>().map(|f| f as i64))
            .map_err(|e| parse_err(path, lineno, format!("bad timestamp `{ts}`: {e}")))?;
        out.push(Interaction {
            user: user.to_string(),
            item: item.to_string(),
            timestamp,
        });
    }
    Ok(out)
}

fn load_yelp_json(reader: impl BufRead, path: &str) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| parse_err(path, lineno, e.to_string()))?;
        let user = value
            .get("user_id")
            .and_then(|v| v.as_str())
            .filter(|s| !s.is_empty())
            .ok_or_else(|| parse_err(path, lineno, "missing user_id"))?;
        let item = value
            .get("business_id")
            .and_then(|v| v.as_str())
            .filter(|s| !s.is_empty())
            .ok_or_else(|| parse_err(path, lineno, "missing business_id"))?;
        let date = value
            .get("date")
            .and_then(|v| v.as_str())
            .ok_or_else(|| parse_err(path, lineno, "missing date"))?;
        let timestamp = parse_yelp_date(date)
            .ok_or_else(|| parse_err(path, lineno, format!("bad date `{date}`")))?;
        out.push(Interaction {
            user: user.to_string(),
            item: item.to_string(),
            timestamp,
        });
    }
    Ok(out)
}

fn parse_yelp_date(s: &str) -> Option<i64> {
    use chrono::{NaiveDate, NaiveDateTime};
    if let Ok(dt) = NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S") {
        return Some(dt.and_utc().timestamp());
    }
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Some(d.and_hms_opt(0, 0, 0)?.and_utc().timestamp());
    }
    None
}

/// Iteratively remove users and items with fewer than `k` interactions
/// until a fixed point: the maximal sub-log where every remaining user and
/// item has at least `k` interactions. Relative row order is preserved.
pub fn k_core_filter(interactions: &[Interaction], k: usize) -> Vec<Interaction> {
    let mut rows: Vec<&Interaction> = interactions.iter().collect();
    loop {
        let mut user_counts: HashMap<&str, usize> = HashMap::new();
        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for r in &rows {
            *user_counts.entry(r.user.as_str()).or_insert(0) += 1;
            *item_counts.entry(r.item.as_str()).or_insert(0) += 1;
        }
        let before = rows.len();
        rows.retain(|r| user_counts[r.user.as_str()] >= k && item_counts[r.item.as_str()] >= k);
        if rows.len() == before {
            return rows.into_iter().cloned().collect();
        }
    }
}

/// One user's chronologically ordered dense item indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    #[serde(rename = "user")]
    pub user_index: u32,
    /// Dense item indices in `[1, |V|]`; index 0 is reserved for padding.
    pub items: Vec<usize>,
}

/// Bidirectional raw-id / dense-index mapping. Indices are contiguous
/// `1..=|V|`; 0 is the padding index.
#[derive(Debug, Clone, Default)]
pub struct ItemVocabulary {
    forward: HashMap<String, usize>,
    backward: Vec<String>,
}

impl ItemVocabulary {
    pub fn new() -> Self {
        ItemVocabulary {
            forward: HashMap::new(),
            backward: vec![String::new()], // slot 0 = padding
        }
    }

    /// Dense index for `raw`, assigning the next one on first sight.
    pub fn intern(&mut self, raw: &str) -> usize {
        if let Some(&idx) = self.forward.get(raw) {
            return idx;
        }
        let idx = self.backward.len();
        self.forward.insert(raw.to_string(), idx);
        self.backward.push(raw.to_string());
        idx
    }

    pub fn index_of(&self, raw: &str) -> Option<usize> {
        self.forward.get(raw).copied()
    }

    pub fn raw_of(&self, index: usize) -> Option<&str> {
        if index == 0 {
            return None;
        }
        self.backward.get(index).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.backward.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Leave-one-out split over per-user sequences: the last item of each
/// sequence is the test target, the second-to-last the validation target,
/// and everything before is training data. All three are views into the
/// same underlying sequence.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    sequences: Vec<UserSequence>,
    n_items: usize,
    excluded_users: usize,
}

impl SplitDataset {
    /// Build from already-dense sequences. Sequences shorter than 3 are
    /// excluded (no room for train + valid + test) and counted.
    pub fn from_sequences(sequences: Vec<UserSequence>, n_items: usize) -> Self {
        let mut kept = Vec::with_capacity(sequences.len());
        let mut excluded = 0;
        for s in sequences {
            if s.items.len() >= 3 {
                kept.push(s);
            } else {
                excluded += 1;
            }
        }
        // Reindex so user_index stays dense after exclusions.
        for (i, s) in kept.iter_mut().enumerate() {
            s.user_index = i as u32;
        }
        SplitDataset {
            sequences: kept,
            n_items,
            excluded_users: excluded,
        }
    }

    pub fn n_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn excluded_users(&self) -> usize {
        self.excluded_users
    }

    pub fn sequences(&self) -> &[UserSequence] {
        &self.sequences
    }

    /// Full chronological sequence of user `u`.
    pub fn items(&self, u: usize) -> &[usize] {
        &self.sequences[u].items
    }

    /// Training portion: everything except the last two items.
    pub fn train_items(&self, u: usize) -> &[usize] {
        let items = self.items(u);
        &items[..items.len() - 2]
    }

    /// Validation prefix (= training items) and target (second-to-last).
    pub fn valid_prefix(&self, u: usize) -> &[usize] {
        self.train_items(u)
    }

    pub fn valid_target(&self, u: usize) -> usize {
        let items = self.items(u);
        items[items.len() - 2]
    }

    /// Test prefix (training items + validation item) and target (last).
    pub fn test_prefix(&self, u: usize) -> &[usize] {
        let items = self.items(u);
        &items[..items.len() - 1]
    }

    pub fn test_target(&self, u: usize) -> usize {
        let items = self.items(u);
        items[items.len() - 1]
    }

    /// Content digest over the dense sequences; stable across runs and
    /// machines. Used to key caches and to stamp run manifests.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update((self.n_items as u64).to_le_bytes());
        for s in &self.sequences {
            hasher.update(s.user_index.to_le_bytes());
            hasher.update((s.items.len() as u64).to_le_bytes());
            for &i in &s.items {
                hasher.update((i as u64).to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Write the canonical split file: JSON-lines, one record per user.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for s in &self.sequences {
            let rec = serde_json::json!({ "user": s.user_index, "items": s.items });
            writeln!(f, "{rec}")?;
        }
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let reader = BufReader::new(file);
        let display = path.display().to_string();
        let mut sequences = Vec::new();
        let mut n_items = 0;
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: UserSequence = serde_json::from_str(&line)
                .map_err(|e| parse_err(&display, idx + 1, e.to_string()))?;
            if rec.items.iter().any(|&i| i == 0) {
                return Err(parse_err(&display, idx + 1, "item index 0 is reserved"));
            }
            n_items = n_items.max(rec.items.iter().copied().max().unwrap_or(0));
            sequences.push(rec);
        }
        if sequences.is_empty() {
            return Err(Error::Data(format!("{display}: empty split file")));
        }
        Ok(SplitDataset::from_sequences(sequences, n_items))
    }
}

/// The most recent `max_len` entries of `items` (all of them when shorter).
pub fn cap_to_recent(items: &[usize], max_len: usize) -> &[usize] {
    if items.len() > max_len {
        &items[items.len() - max_len..]
    } else {
        items
    }
}

/// Dataset statistics in the shape conventionally reported for these
/// benchmarks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub avg_length: f64,
    /// `1 - interactions / (users * items)`
    pub sparsity: f64,
    pub excluded_users: usize,
}

impl DatasetStats {
    pub fn from_split(data: &SplitDataset) -> Self {
        let users = data.n_users();
        let items = data.n_items();
        let interactions: usize = data.sequences().iter().map(|s| s.items.len()).sum();
        let avg_length = if users > 0 {
            interactions as f64 / users as f64
        } else {
            0.0
        };
        let sparsity = if users > 0 && items > 0 {
            1.0 - interactions as f64 / (users as f64 * items as f64)
        } else {
            0.0
        };
        DatasetStats {
            users,
            items,
            interactions,
            avg_length,
            sparsity,
            excluded_users: data.excluded_users(),
        }
    }
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# of Users        {}", self.users)?;
        writeln!(f, "# of Items        {}", self.items)?;
        writeln!(f, "# of Interactions {}", self.interactions)?;
        writeln!(f, "Avg. Length       {:.1}", self.avg_length)?;
        write!(f, "Sparsity          {:.2}%", self.sparsity * 100.0)
    }
}

/// Sort per user by timestamp (stable), map raw ids to dense indices, and
/// produce the leave-one-out split plus the vocabulary.
///
/// Users are processed in lexicographic raw-id order and items are assigned
/// dense indices by first appearance in that traversal, so the output is
/// independent of input row order up to timestamp ties.
///
/// `max_len` is the sequence cap applied at encoding time; it is validated
/// here but sequences are stored in full.
pub fn build_split(
    interactions: &[Interaction],
    max_len: usize,
) -> Result<(SplitDataset, ItemVocabulary)> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be positive".into()));
    }
    let mut per_user: HashMap<&str, Vec<(i64, usize)>> = HashMap::new();
    for (row, it) in interactions.iter().enumerate() {
        per_user
            .entry(it.user.as_str())
            .or_default()
            .push((it.timestamp, row));
    }
    let mut users: Vec<&str> = per_user.keys().copied().collect();
    users.sort_unstable();

    let mut vocab = ItemVocabulary::new();
    let mut sequences = Vec::with_capacity(users.len());
    for (uidx, user) in users.iter().enumerate() {
        let rows = per_user.get_mut(user).unwrap();
        // Stable by construction: ties keep input row order because rows
        // were pushed in input order and sort_by_key is stable.
        rows.sort_by_key(|&(ts, _)| ts);
        let items: Vec<usize> = rows
            .iter()
            .map(|&(_, row)| vocab.intern(&interactions[row].item))
            .collect();
        sequences.push(UserSequence {
            user_index: uidx as u32,
            items,
        });
    }
    let n_items = vocab.len();
    Ok((SplitDataset::from_sequences(sequences, n_items), vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    fn ix(user: &str, item: &str, ts: i64) -> Interaction {
        Interaction {
            user: user.into(),
            item: item.into(),
            timestamp: ts,
        }
    }

    #[test]
    fn tsv_parses_three_rows() {
        let data = "u1\ti1\t10\nu1\ti2\t20\nu2\ti1\t5\n";
        let got = load_tsv(Cursor::new(data), "mem").unwrap();
        assert_eq!(got.len(), 3);
        assert_eq!(got[0], ix("u1", "i1", 10));
        assert_eq!(got[2], ix("u2", "i1", 5));
    }

    #[test]
    fn empty_file_is_empty_list() {
        assert!(load_tsv(Cursor::new(""), "mem").unwrap().is_empty());
    }

    #[test]
    fn missing_item_field_names_line() {
        let data = "u1\ti1\t10\nu2\n";
        let err = load_tsv(Cursor::new(data), "mem").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn amazon_csv_parses_and_reports_bad_rows() {
        let data = "A1,B0001,5.0,1367193600\nA2,B0002,4.0,1367193601\n";
        let got = load_amazon_csv(Cursor::new(data), "mem").unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].timestamp, 1367193600);

        let bad = "A1,B0001,5.0\n";
        let err = load_amazon_csv(Cursor::new(bad), "mem").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn yelp_json_parses_dates() {
        let data = r#"{"user_id":"u","business_id":"b","date":"2015-03-01 12:00:00"}"#;
        let got = load_yelp_json(Cursor::new(data), "mem").unwrap();
        assert_eq!(got.len(), 1);
        assert!(got[0].timestamp > 0);
    }

    #[test]
    fn unknown_format_is_config_error() {
        assert!(matches!(
            "parquet".parse::<InputFormat>(),
            Err(Error::UnknownFormat(_))
        ));
    }

    #[test]
    fn k_core_with_k1_is_identity() {
        let rows = vec![ix("u1", "i1", 1), ix("u2", "i2", 2)];
        assert_eq!(k_core_filter(&rows, 1), rows);
    }

    #[test]
    fn k_core_removes_everything_when_too_strict() {
        // 2 users x 2 shared items, each user has 2 interactions.
        let rows = vec![
            ix("u1", "i1", 1),
            ix("u1", "i2", 2),
            ix("u2", "i1", 3),
            ix("u2", "i2", 4),
        ];
        assert!(k_core_filter(&rows, 3).is_empty());
    }

    /// Brute-force oracle: repeatedly drop under-k users/items one full
    /// sweep at a time until stable.
    fn k_core_oracle(rows: &[Interaction], k: usize) -> Vec<Interaction> {
        let mut rows: Vec<Interaction> = rows.to_vec();
        loop {
            let mut uc: HashMap<String, usize> = HashMap::new();
            let mut ic: HashMap<String, usize> = HashMap::new();
            for r in &rows {
                *uc.entry(r.user.clone()).or_insert(0) += 1;
                *ic.entry(r.item.clone()).or_insert(0) += 1;
            }
            let kept: Vec<Interaction> = rows
                .iter()
                .filter(|r| uc[&r.user] >= k && ic[&r.item] >= k)
                .cloned()
                .collect();
            if kept.len() == rows.len() {
                return rows;
            }
            rows = kept;
        }
    }

    /// A 20-user log engineered so one pruning pass cascades into more.
    fn cascade_log() -> Vec<Interaction> {
        let mut rows = Vec::new();
        // Dense core: users c0..c9 all over items p0..p4.
        for u in 0..10 {
            for i in 0..5 {
                rows.push(ix(&format!("c{u}"), &format!("p{i}"), (u * 10 + i) as i64));
            }
        }
        // Chain: each fringe user leans on the previous fringe item, so
        // removing the tail cascades.
        for u in 0..10 {
            let user = format!("f{u}");
            for i in 0..3 {
                rows.push(ix(&user, &format!("p{i}"), (1000 + u * 10 + i) as i64));
            }
            rows.push(ix(&user, &format!("q{u}"), (1000 + u * 10 + 5) as i64));
            if u > 0 {
                rows.push(ix(&user, &format!("q{}", u - 1), (1000 + u * 10 + 6) as i64));
            }
        }
        rows
    }

    #[test]
    fn k_core_matches_bruteforce_on_cascading_log() {
        let rows = cascade_log();
        for k in 2..=6 {
            let ours = k_core_filter(&rows, k);
            let oracle = k_core_oracle(&rows, k);
            assert_eq!(ours, oracle, "k={k}");
        }
    }

    #[test]
    fn k_core_is_idempotent() {
        let rows = cascade_log();
        let once = k_core_filter(&rows, 4);
        let twice = k_core_filter(&once, 4);
        assert_eq!(once, twice);
    }

    #[test]
    fn split_takes_last_two_items() {
        let rows: Vec<Interaction> = ["a", "b", "c", "d", "e"]
            .iter()
            .enumerate()
            .map(|(t, item)| ix("u", item, t as i64))
            .collect();
        let (split, vocab) = build_split(&rows, 50).unwrap();
        assert_eq!(split.n_users(), 1);
        let a = vocab.index_of("a").unwrap();
        let b = vocab.index_of("b").unwrap();
        let c = vocab.index_of("c").unwrap();
        assert_eq!(split.train_items(0), &[a, b, c]);
        assert_eq!(split.valid_target(0), vocab.index_of("d").unwrap());
        assert_eq!(split.test_target(0), vocab.index_of("e").unwrap());
        assert_eq!(split.valid_prefix(0), &[a, b, c]);
        assert_eq!(split.test_prefix(0).len(), 4);
    }

    #[test]
    fn truncation_keeps_most_recent() {
        let items: Vec<usize> = (1..=60).collect();
        let capped = cap_to_recent(&items, 50);
        assert_eq!(capped.len(), 50);
        assert_eq!(capped[0], 11);
        assert_eq!(capped[49], 60);
    }

    #[test]
    fn timestamp_ties_keep_input_order() {
        let rows = vec![ix("u", "x", 5), ix("u", "y", 5), ix("u", "z", 5)];
        let (split, vocab) = build_split(&rows, 50).unwrap();
        let got: Vec<&str> = split.items(0).iter().map(|&i| vocab.raw_of(i).unwrap()).collect();
        assert_eq!(got, vec!["x", "y", "z"]);
    }

    #[test]
    fn short_users_are_excluded_and_counted() {
        let rows = vec![
            ix("short", "i1", 1),
            ix("short", "i2", 2),
            ix("long", "i1", 1),
            ix("long", "i2", 2),
            ix("long", "i3", 3),
        ];
        let (split, _) = build_split(&rows, 50).unwrap();
        assert_eq!(split.n_users(), 1);
        assert_eq!(split.excluded_users(), 1);
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.jsonl");
        let rows: Vec<Interaction> = (0..8)
            .flat_map(|u| (0..5).map(move |t| ix(&format!("u{u}"), &format!("i{t}"), t)))
            .collect();
        let (split, _) = build_split(&rows, 50).unwrap();
        split.write_jsonl(&path).unwrap();
        let back = SplitDataset::read_jsonl(&path).unwrap();
        assert_eq!(back.n_users(), split.n_users());
        assert_eq!(back.n_items(), split.n_items());
        for u in 0..split.n_users() {
            assert_eq!(back.items(u), split.items(u));
        }
    }

    #[test]
    fn stats_mirror_definition() {
        let rows: Vec<Interaction> = (0..4)
            .flat_map(|u| (0..5).map(move |t| ix(&format!("u{u}"), &format!("i{t}"), t)))
            .collect();
        let (split, _) = build_split(&rows, 50).unwrap();
        let stats = DatasetStats::from_split(&split);
        assert_eq!(stats.users, 4);
        assert_eq!(stats.items, 5);
        assert_eq!(stats.interactions, 20);
        assert!((stats.avg_length - 5.0).abs() < 1e-12);
        assert!((stats.sparsity - 0.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn k_core_set_invariant_under_shuffle(seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let rows = cascade_log();
            let mut shuffled = rows.clone();
            let mut rng = crate::rng::stream(seed);
            shuffled.shuffle(&mut rng);
            let a = k_core_filter(&rows, 5);
            let b = k_core_filter(&shuffled, 5);
            let mut sa: Vec<(String, String, i64)> =
                a.iter().map(|r| (r.user.clone(), r.item.clone(), r.timestamp)).collect();
            let mut sb: Vec<(String, String, i64)> =
                b.iter().map(|r| (r.user.clone(), r.item.clone(), r.timestamp)).collect();
            sa.sort();
            sb.sort();
            prop_assert_eq!(sa, sb);
        }

        #[test]
        fn split_concat_reproduces_tail(len in 3usize..12) {
            let rows: Vec<Interaction> = (0..len)
                .map(|t| ix("u", &format!("i{t}"), t as i64))
                .collect();
            let (split, _) = build_split(&rows, 50).unwrap();
            let mut rebuilt = split.train_items(0).to_vec();
            rebuilt.push(split.valid_target(0));
            rebuilt.push(split.test_target(0));
            prop_assert_eq!(rebuilt.as_slice(), split.items(0));
        }

        #[test]
        fn vocab_roundtrip(ids in prop::collection::vec("[a-z]{1,6}", 1..40)) {
            let mut vocab = ItemVocabulary::new();
            for id in &ids {
                let idx = vocab.intern(id);
                prop_assert_eq!(vocab.raw_of(idx).unwrap(), id.as_str());
                prop_assert_eq!(vocab.index_of(id).unwrap(), idx);
            }
            prop_assert!(vocab.len() <= ids.len());
        }
    }
}
