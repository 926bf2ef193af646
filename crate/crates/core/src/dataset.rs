//! Dataset directories: one `OCTV` file per volume, an optional `OCTG` file with
//! its annotations, and an `index.json` listing them.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{BenchmarkPlan, Split};
use crate::volume::{GroundTruth, Volume};

pub const INDEX: &str = "index.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub split: Split,
    pub patient: usize,
    /// Relative to the dataset directory.
    pub volume: String,
    pub truth: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub seed: Option<u64>,
    pub entries: Vec<IndexEntry>,
}

/// A loaded volume with its annotations when the index provides them.
#[derive(Clone, Debug)]
pub struct Entry {
    pub split: Split,
    pub patient: usize,
    pub volume: Volume,
    pub truth: Option<GroundTruth>,
}

/// Generates the benchmark into `dir`, one volume at a time.
pub fn write_benchmark(plan: &BenchmarkPlan, dir: &Path) -> Result<DatasetIndex> {
    fs::create_dir_all(dir)?;
    let entries = plan
        .entries()
        .par_iter()
        .map(|e| {
            let v = BenchmarkPlan::generate_entry(e)?;
            let stem = format!("{}_{:03}", e.split.as_str(), e.index);
            let volume = format!("{stem}.octv");
            let truth = format!("{stem}.octg");
            v.volume.save(&dir.join(&volume))?;
            v.truth.save(&dir.join(&truth))?;
            Ok(IndexEntry {
                split: e.split,
                patient: v.patient,
                volume,
                truth: Some(truth),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let index = DatasetIndex {
        seed: Some(plan.seed),
        entries,
    };
    fs::write(dir.join(INDEX), serde_json::to_string_pretty(&index)?)?;
    Ok(index)
}

pub fn read_index(dir: &Path) -> Result<DatasetIndex> {
    let path = dir.join(INDEX);
    let text = fs::read_to_string(&path).map_err(|e| Error::format(&path, format!("cannot read index: {e}")))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

fn resolve(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

/// Loads every entry of `split`; an empty split is an error.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<Entry>> {
    let index = read_index(dir)?;
    let entries: Vec<Entry> = index
        .entries
        .iter()
        .filter(|e| e.split == split)
        .map(|e| {
            let volume = Volume::load(&resolve(dir, &e.volume))?;
            let truth = e.truth.as_ref().map(|t| GroundTruth::load(&resolve(dir, t))).transpose()?;
            Ok(Entry {
                split: e.split,
                patient: e.patient,
                volume,
                truth,
            })
        })
        .collect::<Result<_>>()?;
    if entries.is_empty() {
        return Err(Error::EmptyDataset(format!("{} has no {} volumes", dir.display(), split.as_str())));
    }
    Ok(entries)
}
