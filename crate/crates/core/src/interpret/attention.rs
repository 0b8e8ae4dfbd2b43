//! Attention products and their aggregation by prong type.

use crate::datagen::Event;
use crate::error::{Error, Result};
use crate::model::{EventFlavor, ProngClass};
use crate::tensor::Tensor;
use crate::transformer::AttentionStack;

/// Entries below this are clamped before taking the log.
pub const LOG_CLAMP: f64 = 1e-12;
/// Row-sum tolerance for accepting a matrix as row-stochastic.
pub const STOCHASTIC_TOL: f64 = 1e-9;

/// Number of row/column types: the event pseudo-type plus nine prong labels.
pub const NUM_TYPES: usize = 1 + ProngClass::COUNT;

/// Type index used in aggregated matrices: 0 for the event row, `1 + label`
/// for a prong.
pub fn type_index(label: Option<ProngClass>) -> usize {
    label.map_or(0, |l| 1 + l.index())
}

pub fn type_name(t: usize) -> &'static str {
    if t == 0 {
        "event"
    } else {
        ProngClass::ALL[t - 1].name()
    }
}

/// Row types of an event's attention matrix: the event row then its prongs.
pub fn row_types(event: &Event) -> Vec<usize> {
    std::iter::once(0)
        .chain(event.prongs.iter().map(|p| type_index(Some(p.truth.label))))
        .collect()
}

fn check_stochastic(m: &Tensor, what: &str) -> Result<()> {
    let n = m.rows();
    if m.shape() != [n, n] {
        return Err(Error::Shape(format!("{what}: {:?} is not square", m.shape())));
    }
    for r in 0..n {
        let row = m.row(r);
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > STOCHASTIC_TOL || row.iter().any(|&x| !(-STOCHASTIC_TOL..=1.0 + STOCHASTIC_TOL).contains(&x)) {
            return Err(Error::Invalid(format!("{what}: row {r} is not stochastic (sum {s})")));
        }
    }
    Ok(())
}

/// `A = A_K · … · A_1`. Every layer must be row-stochastic.
pub fn attention_product(stack: &AttentionStack) -> Result<Tensor> {
    let first = stack
        .layers
        .first()
        .ok_or_else(|| Error::Invalid("attention stack has no layers".into()))?;
    check_stochastic(first, "layer 0")?;
    let mut a = first.clone();
    for (l, m) in stack.layers.iter().enumerate().skip(1) {
        check_stochastic(m, &format!("layer {l}"))?;
        a = m.matmul(&a)?;
    }
    Ok(a)
}

/// One event's attention product with the type of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct TypedAttention {
    pub matrix: Tensor,
    pub types: Vec<usize>,
    /// Collapsed event class, used by [`event_attention_rows`].
    pub flavor: EventFlavor,
}

impl TypedAttention {
    pub fn from_event(event: &Event, stack: &AttentionStack) -> Result<Self> {
        let matrix = attention_product(stack)?;
        let types = row_types(event);
        if matrix.rows() != types.len() {
            return Err(Error::Shape(format!(
                "attention of size {} for an event with {} rows",
                matrix.rows(),
                types.len()
            )));
        }
        Ok(Self {
            matrix,
            types,
            flavor: event.label.flavor(),
        })
    }

    fn log_at(&self, i: usize, j: usize) -> f64 {
        self.matrix.at(i, j).max(LOG_CLAMP).ln()
    }
}

/// Mean log-attention by (row type, column type); `None` where no event
/// contains both types.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedAttention {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
    /// Events contributing to each entry.
    pub counts: Vec<Vec<usize>>,
}

impl AggregatedAttention {
    fn new(rows: Vec<String>) -> Self {
        let cols: Vec<String> = (0..NUM_TYPES).map(|t| type_name(t).to_string()).collect();
        let n = rows.len();
        Self {
            values: vec![vec![None; cols.len()]; n],
            counts: vec![vec![0; cols.len()]; n],
            rows,
            cols,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.values[row][col]
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Reduce {
    /// Sum over the columns of a type.
    Sum,
    /// Mean over the columns of a type.
    Mean,
}

/// Per-event value for rows of type `r` against columns of type `s`: the
/// mean over those rows of the reduced log-attention over those columns.
fn event_value(ev: &TypedAttention, rows: &[usize], s: usize, reduce: Reduce) -> Option<f64> {
    let cols: Vec<usize> = (0..ev.types.len()).filter(|&j| ev.types[j] == s).collect();
    if rows.is_empty() || cols.is_empty() {
        return None;
    }
    let mut acc = 0.0;
    for &i in rows {
        let total: f64 = cols.iter().map(|&j| ev.log_at(i, j)).sum();
        acc += match reduce {
            Reduce::Sum => total,
            Reduce::Mean => total / cols.len() as f64,
        };
    }
    Some(acc / rows.len() as f64)
}

fn aggregate(events: &[TypedAttention], reduce: Reduce) -> AggregatedAttention {
    let mut out = AggregatedAttention::new((0..NUM_TYPES).map(|t| type_name(t).to_string()).collect());
    let mut sums = vec![vec![0.0; NUM_TYPES]; NUM_TYPES];
    for ev in events {
        for r in 0..NUM_TYPES {
            let rows: Vec<usize> = (0..ev.types.len()).filter(|&i| ev.types[i] == r).collect();
            for s in 0..NUM_TYPES {
                if let Some(v) = event_value(ev, &rows, s, reduce) {
                    sums[r][s] += v;
                    out.counts[r][s] += 1;
                }
            }
        }
    }
    for r in 0..NUM_TYPES {
        for s in 0..NUM_TYPES {
            if out.counts[r][s] > 0 {
                out.values[r][s] = Some(sums[r][s] / out.counts[r][s] as f64);
            }
        }
    }
    out
}

/// For each (row type r, column type s): per event, log-attention summed
/// over all columns of type s (averaged over rows of type r), then the mean
/// over events containing both types. Self-attention is included.
pub fn aggregate_attention_by_type(events: &[TypedAttention]) -> AggregatedAttention {
    aggregate(events, Reduce::Sum)
}

/// Like [`aggregate_attention_by_type`] but averaging over the individual
/// columns of each type instead of summing them.
pub fn aggregate_attention_per_prong(events: &[TypedAttention]) -> AggregatedAttention {
    aggregate(events, Reduce::Mean)
}

/// The event row only (row 0), with rows of the result grouped by the
/// true collapsed event class.
pub fn event_attention_rows(events: &[TypedAttention]) -> AggregatedAttention {
    let mut out = AggregatedAttention::new(EventFlavor::ALL.iter().map(|f| f.name().to_string()).collect());
    let mut sums = vec![vec![0.0; NUM_TYPES]; EventFlavor::COUNT];
    for ev in events {
        let g = ev.flavor.index();
        for s in 0..NUM_TYPES {
            if let Some(v) = event_value(ev, &[0], s, Reduce::Sum) {
                sums[g][s] += v;
                out.counts[g][s] += 1;
            }
        }
    }
    for g in 0..EventFlavor::COUNT {
        for s in 0..NUM_TYPES {
            if out.counts[g][s] > 0 {
                out.values[g][s] = Some(sums[g][s] / out.counts[g][s] as f64);
            }
        }
    }
    out
}
