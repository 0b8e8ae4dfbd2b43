//! On-disk formats: run configuration, checkpoints, dataset directories,
//! metrics logs, predictions and analysis outputs.

mod checkpoint;
mod config;
mod text;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{config_hash, InterpretConfig, RunConfig};
pub use text::{Document, Section, OUTPUT_SCHEMA, OUTPUT_VERSION};

use crate::datagen::{read_dataset, write_dataset, Dataset, DatasetManifest, Event, Split};
use crate::error::{Error, Result};
use crate::interpret::EventScores;
use crate::model::EpochMetrics;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_SCHEMA: &str = "tcvn-metrics";
pub const PREDICTIONS_SCHEMA: &str = "tcvn-predictions";
pub const REPORT_SCHEMA: &str = "tcvn-report";
pub const LOG_VERSION: u32 = 1;

/// Writes `bytes` to a temporary sibling, syncs it and renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes every split and the manifest into `dir`.
pub fn write_dataset_dir(dir: &Path, data: &Dataset, manifest: &DatasetManifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    for split in Split::ALL {
        write_dataset(&dir.join(split.file_name()), split, manifest.planes, manifest.cells, data.split(split))?;
    }
    write_atomic(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(manifest)?.as_bytes())
}

/// Reads one split after checking the directory's manifest.
pub fn read_split(dir: &Path, split: Split) -> Result<Vec<Event>> {
    let manifest = DatasetManifest::read(&dir.join(MANIFEST_FILE))?;
    manifest.check_version()?;
    let (header, events) = read_dataset(&dir.join(split.file_name()))?;
    if header.split != split.name() {
        return Err(Error::Format(format!("{} holds split {}", split.file_name(), header.split)));
    }
    Ok(events)
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
}

fn header_line(schema: &str) -> String {
    serde_json::to_string(&Header {
        schema: schema.into(),
        version: LOG_VERSION,
    })
    .expect("header serializes")
}

fn check_header(line: Option<&str>, schema: &str, path: &Path) -> Result<()> {
    let h: Header = serde_json::from_str(line.ok_or_else(|| Error::Format(format!("{}: empty file", path.display())))?)?;
    if h.schema != schema || h.version != LOG_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported {} v{} (expected {schema} v{LOG_VERSION})",
            path.display(),
            h.schema,
            h.version
        )));
    }
    Ok(())
}

/// JSON lines: a schema header, then one record per line.
pub fn write_jsonl<T: Serialize>(path: &Path, schema: &str, records: &[T]) -> Result<()> {
    let mut out = header_line(schema);
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path, schema: &str) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    check_header(lines.next(), schema, path)?;
    lines.filter(|l| !l.is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

pub fn write_metrics(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    write_jsonl(path, METRICS_SCHEMA, history)
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    read_jsonl(path, METRICS_SCHEMA)
}

pub fn write_predictions(path: &Path, scores: &[EventScores]) -> Result<()> {
    write_jsonl(path, PREDICTIONS_SCHEMA, scores)
}

pub fn read_predictions(path: &Path) -> Result<Vec<EventScores>> {
    read_jsonl(path, PREDICTIONS_SCHEMA)
}

#[derive(Serialize, Deserialize)]
struct Wrapped<T> {
    schema: String,
    version: u32,
    #[serde(flatten)]
    body: T,
}

/// Pretty JSON with `schema` and `version` fields.
pub fn write_json<T: Serialize>(path: &Path, schema: &str, value: &T) -> Result<()> {
    let w = Wrapped {
        schema: schema.into(),
        version: LOG_VERSION,
        body: value,
    };
    let mut s = serde_json::to_string_pretty(&w)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path, schema: &str) -> Result<T> {
    let w: Wrapped<T> = serde_json::from_str(&fs::read_to_string(path)?)?;
    if w.schema != schema || w.version != LOG_VERSION {
        return Err(Error::Format(format!("{}: unsupported {} v{}", path.display(), w.schema, w.version)));
    }
    Ok(w.body)
}

/// Standard file locations inside an output directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.tcvn")
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn predictions(&self, split: Split) -> PathBuf {
        self.dir.join(format!("predictions_{}.jsonl", split.name()))
    }

    pub fn report(&self, split: Split) -> PathBuf {
        self.dir.join(format!("report_{}.json", split.name()))
    }

    pub fn analysis(&self, which: &str, split: Split) -> PathBuf {
        self.dir.join(format!("{which}_{}.txt", split.name()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_and_schema_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.jsonl");
        let s = vec![EventScores {
            event_probs: vec![0.1, 0.9],
            prong_probs: vec![vec![1.0 / 3.0, 2.0 / 3.0]],
        }];
        write_predictions(&p, &s).unwrap();
        assert_eq!(read_predictions(&p).unwrap(), s);
        assert!(read_metrics(&p).is_err());
    }

    #[test]
    fn json_wrapper() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        #[derive(Serialize, Deserialize, PartialEq, Debug)]
        struct R {
            x: f64,
        }
        write_json(&p, REPORT_SCHEMA, &R { x: 0.1 }).unwrap();
        assert_eq!(read_json::<R>(&p, REPORT_SCHEMA).unwrap(), R { x: 0.1 });
        assert!(read_json::<R>(&p, "other").is_err());
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
