//! Checkpoints: a text manifest followed by a little-endian f64 payload.
//!
//! ```text
//! tcvn-checkpoint 1
//! config_hash <hex>
//! model <json>
//! epoch <n>
//! adam_step <n>
//! history <json>          (one line per completed epoch)
//! param <name> <d0>x<d1>..
//! adam_m <name> <len>
//! adam_v <name> <len>
//! payload <count>
//! <count little-endian f64 values, in manifest order>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{AdamState, EpochMetrics, ModelConfig, TrainState};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "tcvn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub model: ModelConfig,
    pub state: TrainState,
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.chars().any(char::is_whitespace) {
        return Err(Error::Format(format!("tensor name {name:?} is not a single token")));
    }
    Ok(())
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut head = String::new();
        let mut payload: Vec<f64> = Vec::new();
        head.push_str(&format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n"));
        check_name(&self.config_hash)?;
        head.push_str(&format!("config_hash {}\n", self.config_hash));
        head.push_str(&format!("model {}\n", serde_json::to_string(&self.model)?));
        head.push_str(&format!("epoch {}\n", self.state.epoch));
        head.push_str(&format!("adam_step {}\n", self.state.adam.step));
        for h in &self.state.history {
            head.push_str(&format!("history {}\n", serde_json::to_string(h)?));
        }
        for (name, t) in self.state.params.iter() {
            check_name(name)?;
            head.push_str(&format!("param {name} {}\n", shape_text(t.shape())));
            payload.extend_from_slice(t.data());
        }
        for (tag, table) in [("adam_m", &self.state.adam.m), ("adam_v", &self.state.adam.v)] {
            for (name, v) in table {
                check_name(name)?;
                head.push_str(&format!("{tag} {name} {}\n", v.len()));
                payload.extend_from_slice(v);
            }
        }
        head.push_str(&format!("payload {}\n", payload.len()));
        let mut bytes = head.into_bytes();
        bytes.reserve(payload.len() * 8);
        for x in payload {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Format("checkpoint manifest is truncated".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| Error::Format("checkpoint manifest is not UTF-8".into()))?;
            pos += end + 1;
            Ok(line)
        };
        let first = next_line()?;
        if first != format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}") {
            return Err(Error::Format(format!("unsupported checkpoint header {first:?}")));
        }
        let field = |line: &str, key: &str| -> Result<String> {
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(String::from)
                .ok_or_else(|| Error::Format(format!("expected `{key}`, found {line:?}")))
        };
        let parse_usize = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad integer {s:?}")));
        let config_hash = field(next_line()?, "config_hash")?;
        let model: ModelConfig = serde_json::from_str(&field(next_line()?, "model")?)?;
        let epoch = parse_usize(&field(next_line()?, "epoch")?)?;
        let step = field(next_line()?, "adam_step")?
            .parse::<u64>()
            .map_err(|_| Error::Format("bad adam_step".into()))?;

        enum Entry {
            Param(String, Vec<usize>),
            M(String, usize),
            V(String, usize),
        }
        let mut history: Vec<EpochMetrics> = Vec::new();
        let mut entries = Vec::new();
        let count = loop {
            let line = next_line()?;
            let (tag, rest) = line.split_once(' ').ok_or_else(|| Error::Format(format!("bad manifest line {line:?}")))?;
            match tag {
                "history" => history.push(serde_json::from_str(rest)?),
                "param" | "adam_m" | "adam_v" => {
                    let (name, dims) = rest
                        .split_once(' ')
                        .ok_or_else(|| Error::Format(format!("bad manifest line {line:?}")))?;
                    let name = name.to_string();
                    entries.push(match tag {
                        "param" => Entry::Param(name, dims.split('x').map(parse_usize).collect::<Result<_>>()?),
                        "adam_m" => Entry::M(name, parse_usize(dims)?),
                        _ => Entry::V(name, parse_usize(dims)?),
                    });
                }
                "payload" => break parse_usize(rest)?,
                _ => return Err(Error::Format(format!("unknown manifest entry {tag:?}"))),
            }
        };
        let body = &bytes[pos..];
        if body.len() != count * 8 {
            return Err(Error::Format(format!(
                "checkpoint payload holds {} bytes, manifest declares {count} values",
                body.len()
            )));
        }
        let mut values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut take = |n: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = values.by_ref().take(n).collect();
            if v.len() != n {
                return Err(Error::Format("checkpoint payload is shorter than its manifest".into()));
            }
            Ok(v)
        };
        let mut params = ParamStore::new();
        let (mut m, mut v) = (BTreeMap::new(), BTreeMap::new());
        for e in entries {
            match e {
                Entry::Param(name, shape) => {
                    let n = shape.iter().product();
                    params.insert(name, Tensor::new(shape, take(n)?)?)?;
                }
                Entry::M(name, n) => {
                    if m.insert(name.clone(), take(n)?).is_some() {
                        return Err(Error::Format(format!("duplicate adam_m {name}")));
                    }
                }
                Entry::V(name, n) => {
                    if v.insert(name.clone(), take(n)?).is_some() {
                        return Err(Error::Format(format!("duplicate adam_v {name}")));
                    }
                }
            }
        }
        if take(1).is_ok() {
            return Err(Error::Format("checkpoint payload is longer than its manifest".into()));
        }
        Ok(Self {
            config_hash,
            model,
            state: TrainState {
                params,
                adam: AdamState { step, m, v },
                epoch,
                history,
            },
        })
    }

    /// Writes to a sibling temporary file and renames it into place, so an
    /// interrupted write never leaves a partial checkpoint at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
