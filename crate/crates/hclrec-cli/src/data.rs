//! On-disk layout of a preprocessed dataset directory:
//! dataset.json (dense sequences), vocab.json (raw ids by dense index),
//! stats.json (corpus summary).

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use hclrec::corpus::{DatasetStats, ItemVocabulary, SplitDataset, UserSequence};
use hclrec::{Error, Result};

#[derive(Serialize, Deserialize)]
struct StoredDataset {
    n_items: usize,
    sequences: Vec<UserSequence>,
}

pub fn save_dataset(
    dir: &Path,
    split: &SplitDataset,
    vocab: &ItemVocabulary,
    stats: &DatasetStats,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let stored = StoredDataset {
        n_items: split.n_items(),
        sequences: split.sequences().to_vec(),
    };
    write_json(&dir.join("dataset.json"), &stored)?;
    let raw_ids: Vec<&str> = (1..=vocab.len())
        .map(|i| vocab.raw_of(i).expect("vocabulary indices are contiguous"))
        .collect();
    write_json(&dir.join("vocab.json"), &raw_ids)?;
    write_json(&dir.join("stats.json"), stats)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<SplitDataset> {
    let path = dir.join("dataset.json");
    let file = File::open(&path).map_err(|e| {
        Error::Data(format!("cannot open {} ({e}); run `preprocess` first", path.display()))
    })?;
    let stored: StoredDataset = serde_json::from_reader(BufReader::new(file))?;
    Ok(SplitDataset::from_sequences(stored.sequences, stored.n_items))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}
