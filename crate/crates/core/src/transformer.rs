//! Shared transformer encoder over the set of embedded pixel maps.
//!
//! There is no positional embedding: rows are distinguished only by their
//! content and a trainable type vector (event or prong), so the encoder is
//! equivariant under any reordering of prong rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor, Var};

pub const TYPE_EVENT: &str = "type_embedding.event";
pub const TYPE_PRONG: &str = "type_embedding.prong";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub type_dim: usize,
    /// Feed-forward hidden width as a multiple of `model_dim`.
    pub ff_mult: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            layers: 2,
            heads: 4,
            type_dim: 32,
            ff_mult: 4,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.type_dim == 0 || self.ff_mult == 0 {
            return Err(Error::Config("type_dim and ff_mult must be positive".into()));
        }
        Ok(())
    }
}

/// Head-averaged attention of every encoder layer for one event.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    pub layers: Vec<Tensor>,
}

impl AttentionStack {
    pub fn size(&self) -> usize {
        self.layers.first().map_or(0, Tensor::rows)
    }

    /// Largest deviation of any row sum from one.
    pub fn max_row_sum_error(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|m| (0..m.rows()).map(move |r| (m.row(r).iter().sum::<f64>() - 1.0).abs()))
            .fold(0.0, f64::max)
    }
}

pub fn init_type_embeddings<R: Rng>(store: &mut ParamStore, rng: &mut R, dim: usize) -> Result<()> {
    store.init_xavier(rng, TYPE_EVENT, &[dim], 1, dim)?;
    store.init_xavier(rng, TYPE_PRONG, &[dim], 1, dim)
}

/// Appends the event type vector to the single event row and the prong type
/// vector to every other row.
pub fn attach_type(g: &mut Graph, store: &ParamStore, embeddings: Var, is_event: &[bool]) -> Result<Var> {
    let rows = g.shape(embeddings).first().copied().unwrap_or(0);
    if rows != is_event.len() {
        return Err(Error::Shape(format!(
            "attach_type: {rows} rows but {} flags",
            is_event.len()
        )));
    }
    let events = is_event.iter().filter(|&&e| e).count();
    if events != 1 {
        return Err(Error::Invalid(format!(
            "attach_type needs exactly one event row, found {events}"
        )));
    }
    let ev = g.param(store, TYPE_EVENT)?;
    let pr = g.param(store, TYPE_PRONG)?;
    let dim = g.shape(ev)[0];
    let ev = g.reshape(ev, &[1, dim])?;
    let pr = g.reshape(pr, &[1, dim])?;
    let table = g.concat(&[ev, pr], 0)?;
    let idx: Vec<usize> = is_event.iter().map(|&e| if e { 0 } else { 1 }).collect();
    let types = g.gather_rows(table, &idx)?;
    g.concat(&[embeddings, types], 1)
}

/// Post-norm encoder stack with an input projection.
#[derive(Debug, Clone)]
pub struct Encoder {
    config: TransformerConfig,
    input_dim: usize,
}

impl Encoder {
    pub fn new(config: TransformerConfig, input_dim: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, input_dim })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let d = self.config.model_dim;
        let ff = d * self.config.ff_mult;
        store.init_xavier(rng, "encoder.input.weight", &[self.input_dim, d], self.input_dim, d)?;
        store.init_const("encoder.input.bias", &[d], 0.0)?;
        for l in 0..self.config.layers {
            let p = format!("encoder.layer{l}");
            for m in ["q", "k", "v", "o"] {
                store.init_xavier(rng, &format!("{p}.attn.{m}.weight"), &[d, d], d, d)?;
                store.init_const(&format!("{p}.attn.{m}.bias"), &[d], 0.0)?;
            }
            store.init_he_uniform(rng, &format!("{p}.ff1.weight"), &[d, ff], d)?;
            store.init_const(&format!("{p}.ff1.bias"), &[ff], 0.0)?;
            store.init_xavier(rng, &format!("{p}.ff2.weight"), &[ff, d], ff, d)?;
            store.init_const(&format!("{p}.ff2.bias"), &[d], 0.0)?;
            for ln in ["ln1", "ln2"] {
                store.init_const(&format!("{p}.{ln}.gamma"), &[d], 1.0)?;
                store.init_const(&format!("{p}.{ln}.beta"), &[d], 0.0)?;
            }
        }
        Ok(())
    }

    fn linear(g: &mut Graph, store: &ParamStore, x: Var, name: &str) -> Result<Var> {
        let w = g.param(store, &format!("{name}.weight"))?;
        let b = g.param(store, &format!("{name}.bias"))?;
        g.linear(x, w, b)
    }

    /// Projects `(n × input_dim)` rows to the model width.
    pub fn project(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        Self::linear(g, store, x, "encoder.input")
    }

    /// Runs the projected rows through every layer, recording each layer's
    /// head-averaged attention.
    pub fn encode_projected(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, AttentionStack)> {
        let n = g.shape(x)[0];
        let d = self.config.model_dim;
        let heads = self.config.heads;
        let dh = d / heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut x = x;
        let mut layers = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let p = format!("encoder.layer{l}");
            let q = Self::linear(g, store, x, &format!("{p}.attn.q"))?;
            let k = Self::linear(g, store, x, &format!("{p}.attn.k"))?;
            let v = Self::linear(g, store, x, &format!("{p}.attn.v"))?;
            let mut outs = Vec::with_capacity(heads);
            let mut avg = vec![0.0; n * n];
            for h in 0..heads {
                let qh = g.slice(q, 1, h * dh, dh)?;
                let kh = g.slice(k, 1, h * dh, dh)?;
                let vh = g.slice(v, 1, h * dh, dh)?;
                let kt = g.transpose(kh)?;
                let s = g.matmul(qh, kt)?;
                let s = g.scale(s, inv);
                let a = g.softmax(s, 1)?;
                for (acc, w) in avg.iter_mut().zip(g.value(a).data()) {
                    *acc += w / heads as f64;
                }
                outs.push(g.matmul(a, vh)?);
            }
            layers.push(Tensor::new(vec![n, n], avg)?);
            let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
            let o = Self::linear(g, store, cat, &format!("{p}.attn.o"))?;
            let r = g.add(x, o)?;
            let (g1, b1) = (g.param(store, &format!("{p}.ln1.gamma"))?, g.param(store, &format!("{p}.ln1.beta"))?);
            let x1 = g.layer_norm(r, g1, b1)?;
            let f = Self::linear(g, store, x1, &format!("{p}.ff1"))?;
            let f = g.relu(f);
            let f = Self::linear(g, store, f, &format!("{p}.ff2"))?;
            let r2 = g.add(x1, f)?;
            let (g2, b2) = (g.param(store, &format!("{p}.ln2.gamma"))?, g.param(store, &format!("{p}.ln2.beta"))?);
            x = g.layer_norm(r2, g2, b2)?;
            if !g.value(x).is_finite() {
                return Err(Error::NonFinite(format!("encoder layer {l}")));
            }
        }
        Ok((x, AttentionStack { layers }))
    }

    /// Projection followed by the full encoder stack.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, augmented: Var) -> Result<(Var, AttentionStack)> {
        let rows = g.shape(augmented).first().copied().unwrap_or(0);
        if rows == 0 {
            return Err(Error::Invalid("encode needs at least one row".into()));
        }
        let x = self.project(g, store, augmented)?;
        self.encode_projected(g, store, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(layers: usize) -> (Encoder, ParamStore) {
        let cfg = TransformerConfig {
            model_dim: 8,
            layers,
            heads: 2,
            type_dim: 4,
            ff_mult: 2,
        };
        let enc = Encoder::new(cfg, 6).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        enc.init_params(&mut store, &mut rng).unwrap();
        init_type_embeddings(&mut store, &mut rng, 4).unwrap();
        (enc, store)
    }

    #[test]
    fn attach_type_rejects_bad_event_rows() {
        let (_, store) = setup(1);
        let mut g = Graph::new();
        let e = g.constant(Tensor::zeros(&[2, 2]));
        assert!(attach_type(&mut g, &store, e, &[false, false]).is_err());
        assert!(attach_type(&mut g, &store, e, &[true, true]).is_err());
        let out = attach_type(&mut g, &store, e, &[true, false]).unwrap();
        assert_eq!(g.shape(out), &[2, 6]);
    }

    #[test]
    fn single_row_attention_is_one() {
        let (enc, store) = setup(2);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 6], vec![0.3, -0.2, 0.1, 0.5, 0.0, 1.0]).unwrap());
        let (_, att) = enc.encode(&mut g, &store, x).unwrap();
        assert_eq!(att.layers.len(), 2);
        for m in &att.layers {
            assert_eq!(m.shape(), &[1, 1]);
            assert!((m.item() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = TransformerConfig {
            model_dim: 10,
            heads: 3,
            ..Default::default()
        };
        assert!(Encoder::new(cfg, 4).is_err());
    }
}
