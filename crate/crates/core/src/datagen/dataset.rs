use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::generator::{event_seed, Generator};
use super::{Event, Prong, ProngTruth, MAX_PRONGS};
use crate::error::{Error, Result};
use crate::model::{EventClass, EventFlavor, ProngClass};
use crate::par;
use crate::sparse::SparsePixelMap;

pub const DATASET_SCHEMA: &str = "tcvn-dataset";
pub const MANIFEST_SCHEMA: &str = "tcvn-manifest";
pub const DATASET_VERSION: u32 = 1;
pub const GENERATOR_VERSION: &str = "synthetic-1";

/// Largest cosmic share a dataset may be built with.
pub const MAX_COSMIC_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        self as u64 + 1
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown split `{s}` (train, val, test)")))
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub cosmic_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train: 1000,
            val: 200,
            test: 200,
            cosmic_fraction: MAX_COSMIC_FRACTION,
        }
    }
}

impl DatasetConfig {
    pub fn size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=MAX_COSMIC_FRACTION).contains(&self.cosmic_fraction) {
            return Err(Error::Config(format!(
                "cosmic_fraction {} outside [0, {MAX_COSMIC_FRACTION}]: cosmic events are limited to 10% of each split",
                self.cosmic_fraction
            )));
        }
        if self.train + self.val + self.test == 0 {
            return Err(Error::Config("all split sizes are zero".into()));
        }
        Ok(())
    }
}

/// Label plan for one split: `floor(fraction·n)` cosmics, the remainder
/// shared as evenly as integers allow between νμ, νe and NC (earlier
/// flavours take the leftovers), CC subtypes drawn uniformly, and the
/// whole list shuffled.
fn split_labels(config: &DatasetConfig, split: Split) -> Vec<EventClass> {
    let n = config.size(split);
    let n_cb = (config.cosmic_fraction * n as f64).floor() as usize;
    let rest = n - n_cb;
    let mut rng = ChaCha8Rng::seed_from_u64(event_seed(config.seed, split.stream(), u64::MAX));
    let mut labels = Vec::with_capacity(n);
    for (k, flavor) in [EventFlavor::Numu, EventFlavor::Nue, EventFlavor::Nc].into_iter().enumerate() {
        let count = rest / 3 + usize::from(k < rest % 3);
        for _ in 0..count {
            labels.push(match flavor {
                EventFlavor::Nc => EventClass::Nc,
                f => {
                    let base = if f == EventFlavor::Numu { 0 } else { 4 };
                    EventClass::ALL[base + rand::Rng::gen_range(&mut rng, 0..4)]
                }
            });
        }
    }
    labels.extend(std::iter::repeat_n(EventClass::Cosmic, n_cb));
    labels.shuffle(&mut rng);
    labels
}

/// Generated events per split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Event>,
    pub val: Vec<Event>,
    pub test: Vec<Event>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Event] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSummary {
    pub file: String,
    pub events: usize,
    pub prongs: usize,
    pub event_classes: BTreeMap<String, usize>,
    pub prong_classes: BTreeMap<String, usize>,
}

impl SplitSummary {
    pub fn of(file: String, events: &[Event]) -> Self {
        let mut s = SplitSummary {
            file,
            events: events.len(),
            ..Default::default()
        };
        for e in events {
            *s.event_classes.entry(e.label.name().to_string()).or_default() += 1;
            for p in &e.prongs {
                s.prongs += 1;
                *s.prong_classes.entry(p.truth.label.name().to_string()).or_default() += 1;
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema: String,
    pub version: u32,
    pub generator_version: String,
    pub seed: u64,
    pub planes: usize,
    pub cells: usize,
    pub cosmic_fraction: f64,
    pub splits: BTreeMap<String, SplitSummary>,
    /// Per-class event counts summed over all splits.
    pub totals: BTreeMap<String, usize>,
}

impl DatasetManifest {
    pub fn check_version(&self) -> Result<()> {
        if self.schema != MANIFEST_SCHEMA || self.version != DATASET_VERSION {
            return Err(Error::Format(format!(
                "unsupported manifest {} v{} (expected {MANIFEST_SCHEMA} v{DATASET_VERSION})",
                self.schema, self.version
            )));
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        m.check_version()?;
        Ok(m)
    }
}

/// Generates every split. Events are independent given their seeds, so
/// generation runs in parallel; the output does not depend on the backend.
pub fn build_dataset(config: &DatasetConfig, generator: &Generator) -> Result<(Dataset, DatasetManifest)> {
    config.validate()?;
    let gen_split = |split: Split| -> Vec<Event> {
        let labels = split_labels(config, split);
        par::map_range(labels.len(), |i| {
            generator.generate_seeded(event_seed(config.seed, split.stream(), i as u64), labels[i])
        })
    };
    let data = Dataset {
        train: gen_split(Split::Train),
        val: gen_split(Split::Val),
        test: gen_split(Split::Test),
    };
    let mut splits = BTreeMap::new();
    let mut totals = BTreeMap::new();
    for s in Split::ALL {
        let summary = SplitSummary::of(s.file_name(), data.split(s));
        for (k, v) in &summary.event_classes {
            *totals.entry(k.clone()).or_default() += v;
        }
        splits.insert(s.name().to_string(), summary);
    }
    let manifest = DatasetManifest {
        schema: MANIFEST_SCHEMA.into(),
        version: DATASET_VERSION,
        generator_version: GENERATOR_VERSION.into(),
        seed: config.seed,
        planes: generator.planes,
        cells: generator.cells,
        cosmic_fraction: config.cosmic_fraction,
        splits,
        totals,
    };
    Ok((data, manifest))
}

/// First line of every dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub schema: String,
    pub version: u32,
    pub split: String,
    pub planes: usize,
    pub cells: usize,
    pub events: usize,
}

fn write_hits(out: &mut String, map: &SparsePixelMap) {
    out.push('[');
    for (i, (v, p, c, x)) in map.quads().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "[{v},{p},{c},{x}]");
    }
    out.push(']');
}

fn write_truth(out: &mut String, t: &ProngTruth) {
    let [(p0, c0), (p1, c1)] = t.vertex;
    let [(a0, b0), (a1, b1)] = t.direction;
    let _ = write!(
        out,
        "\"label\":\"{}\",\"vertex\":[[{p0},{c0}],[{p1},{c1}]],\"direction\":[[{a0:.6},{b0:.6}],[{a1:.6},{b1:.6}]],\"track_length\":{:.6},\"energy\":{:.6}",
        t.label.name(),
        t.track_length,
        t.energy
    );
}

/// One event as a single JSON line. Integers are exact; the few floats are
/// written with six decimals.
pub fn event_to_line(e: &Event) -> String {
    let mut s = String::with_capacity(64 + 16 * e.event_map.num_hits());
    let _ = write!(s, "{{\"label\":\"{}\",\"hits\":", e.label.name());
    write_hits(&mut s, &e.event_map);
    s.push_str(",\"prongs\":[");
    for (i, p) in e.prongs.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push('{');
        write_truth(&mut s, &p.truth);
        s.push_str(",\"hits\":");
        write_hits(&mut s, &p.map);
        s.push('}');
    }
    s.push_str("]}");
    s
}

pub fn write_dataset(path: &Path, split: Split, planes: usize, cells: usize, events: &[Event]) -> Result<()> {
    let header = DatasetHeader {
        schema: DATASET_SCHEMA.into(),
        version: DATASET_VERSION,
        split: split.name().into(),
        planes,
        cells,
        events: events.len(),
    };
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for e in events {
            writeln!(w, "{}", event_to_line(e))?;
        }
        w.flush()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

fn field<'a>(v: &'a Value, key: &str, line: usize) -> Result<&'a Value> {
    v.get(key)
        .ok_or_else(|| Error::Format(format!("line {line}: missing `{key}`")))
}

fn as_u64(v: &Value, what: &str, line: usize) -> Result<u64> {
    v.as_u64()
        .ok_or_else(|| Error::Format(format!("line {line}: `{what}` is not a non-negative integer")))
}

fn as_f64(v: &Value, what: &str, line: usize) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::Format(format!("line {line}: `{what}` is not a number")))
}

fn parse_hits(v: &Value, planes: usize, cells: usize, line: usize) -> Result<SparsePixelMap> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::Format(format!("line {line}: hits must be an array")))?;
    let mut quads = Vec::with_capacity(arr.len());
    for q in arr {
        let q = q
            .as_array()
            .filter(|q| q.len() == 4)
            .ok_or_else(|| Error::Format(format!("line {line}: hits must be [view, plane, cell, intensity]")))?;
        let n: Vec<u64> = q
            .iter()
            .map(|x| as_u64(x, "hit", line))
            .collect::<Result<_>>()?;
        if n[0] > 1 || n[1] > u16::MAX as u64 || n[2] > u16::MAX as u64 || n[3] > 255 {
            return Err(Error::Format(format!("line {line}: hit {n:?} out of range")));
        }
        quads.push((n[0] as u8, n[1] as u16, n[2] as u16, n[3] as u8));
    }
    SparsePixelMap::from_quads(planes, cells, &quads).map_err(|e| Error::Format(format!("line {line}: {e}")))
}

fn parse_pair<T>(v: &Value, line: usize, f: impl Fn(&Value) -> Result<T>) -> Result<[(T, T); 2]> {
    let bad = || Error::Format(format!("line {line}: expected [[a, b], [a, b]]"));
    let outer = v.as_array().filter(|a| a.len() == 2).ok_or_else(bad)?;
    let mut it = outer.iter().map(|inner| -> Result<(T, T)> {
        let inner = inner.as_array().filter(|a| a.len() == 2).ok_or_else(bad)?;
        Ok((f(&inner[0])?, f(&inner[1])?))
    });
    let a = it.next().unwrap()?;
    let b = it.next().unwrap()?;
    Ok([a, b])
}

pub fn event_from_line(text: &str, planes: usize, cells: usize, line: usize) -> Result<Event> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::Format(format!("line {line}: {e}")))?;
    let label_s = field(&v, "label", line)?
        .as_str()
        .ok_or_else(|| Error::Format(format!("line {line}: label must be a string")))?;
    let label = EventClass::from_str(label_s)?;
    let event_map = parse_hits(field(&v, "hits", line)?, planes, cells, line)?;
    let mut prongs = Vec::new();
    for p in field(&v, "prongs", line)?
        .as_array()
        .ok_or_else(|| Error::Format(format!("line {line}: prongs must be an array")))?
    {
        let pl = field(p, "label", line)?
            .as_str()
            .ok_or_else(|| Error::Format(format!("line {line}: prong label must be a string")))?;
        let vertex = parse_pair(field(p, "vertex", line)?, line, |x| {
            let n = as_u64(x, "vertex", line)?;
            u16::try_from(n).map_err(|_| Error::Format(format!("line {line}: vertex {n} too large")))
        })?;
        let direction = parse_pair(field(p, "direction", line)?, line, |x| as_f64(x, "direction", line))?;
        let truth = ProngTruth {
            label: ProngClass::from_str(pl)?,
            vertex,
            direction,
            track_length: as_f64(field(p, "track_length", line)?, "track_length", line)?,
            energy: as_f64(field(p, "energy", line)?, "energy", line)?,
        };
        let map = parse_hits(field(p, "hits", line)?, planes, cells, line)?;
        prongs.push(Prong { map, truth });
    }
    if prongs.len() > MAX_PRONGS {
        return Err(Error::Format(format!("line {line}: {} prongs (max {MAX_PRONGS})", prongs.len())));
    }
    let e = Event {
        label,
        event_map,
        prongs,
    };
    e.validate().map_err(|err| Error::Format(format!("line {line}: {err}")))?;
    Ok(e)
}

pub fn read_dataset_header(path: &Path) -> Result<DatasetHeader> {
    let f = BufReader::new(fs::File::open(path)?);
    let first = f
        .lines()
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty dataset file", path.display())))??;
    parse_header(&first)
}

fn parse_header(line: &str) -> Result<DatasetHeader> {
    let h: DatasetHeader = serde_json::from_str(line).map_err(|e| Error::Format(format!("dataset header: {e}")))?;
    if h.schema != DATASET_SCHEMA || h.version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset {} v{} (expected {DATASET_SCHEMA} v{DATASET_VERSION})",
            h.schema, h.version
        )));
    }
    Ok(h)
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Event>)> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut lines = f.lines();
    let header = parse_header(
        &lines
            .next()
            .ok_or_else(|| Error::Format(format!("{}: empty dataset file", path.display())))??,
    )?;
    let mut events = Vec::with_capacity(header.events);
    for (i, l) in lines.enumerate() {
        let l = l?;
        if l.is_empty() {
            continue;
        }
        events.push(event_from_line(&l, header.planes, header.cells, i + 2)?);
    }
    if events.len() != header.events {
        return Err(Error::Format(format!(
            "{}: header announces {} events, found {}",
            path.display(),
            header.events,
            events.len()
        )));
    }
    Ok((header, events))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            seed: 11,
            train: 40,
            val: 10,
            test: 10,
            cosmic_fraction: 0.1,
        }
    }

    #[test]
    fn label_plan_is_balanced() {
        let cfg = DatasetConfig {
            train: 1000,
            ..small()
        };
        let labels = split_labels(&cfg, Split::Train);
        let count = |f: EventFlavor| labels.iter().filter(|l| l.flavor() == f).count();
        assert_eq!(count(EventFlavor::Cosmic), 100);
        assert_eq!(count(EventFlavor::Numu), 300);
        assert_eq!(count(EventFlavor::Nue), 300);
        assert_eq!(count(EventFlavor::Nc), 300);
    }

    #[test]
    fn rejects_too_many_cosmics() {
        let cfg = DatasetConfig {
            cosmic_fraction: 0.2,
            ..small()
        };
        assert!(build_dataset(&cfg, &Generator::default()).is_err());
    }

    #[test]
    fn line_round_trip() {
        let (data, _) = build_dataset(&small(), &Generator::default()).unwrap();
        for e in &data.val {
            let line = event_to_line(e);
            let back = event_from_line(&line, 100, 80, 1).unwrap();
            assert_eq!(&back, e);
            assert_eq!(event_to_line(&back), line);
        }
    }

    #[test]
    fn header_version_is_checked() {
        let bad = r#"{"schema":"tcvn-dataset","version":99,"split":"train","planes":100,"cells":80,"events":0}"#;
        assert!(parse_header(bad).is_err());
    }

    #[test]
    fn split_names_parse() {
        for s in Split::ALL {
            assert_eq!(s.name().parse::<Split>().unwrap(), s);
        }
        assert!("dev".parse::<Split>().is_err());
    }
}
