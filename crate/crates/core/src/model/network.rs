//! CNN embeddings → type embeddings → shared encoder → event and prong heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::labels::{EventClass, ProngClass};
use crate::datagen::Event;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::sparse::{CnnConfig, DenseInput, EmbeddingCnn, SparsePixelMap};
use crate::tensor::{Gradients, Graph, Tensor, Var};
use crate::transformer::{init_type_embeddings, AttentionStack, Encoder, TransformerConfig, TYPE_EVENT, TYPE_PRONG};

pub use crate::datagen::MAX_PRONGS;

pub const PRONG_CNN: &str = "prong_cnn";
pub const EVENT_CNN: &str = "event_cnn";
pub const PRONG_HEAD: &str = "prong_head";
pub const EVENT_HEAD: &str = "event_head";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub cnn: CnnConfig,
    pub transformer: TransformerConfig,
    /// Hidden width of both classification heads.
    pub head_hidden: usize,
    /// When false the prong head reads the prong CNN embeddings directly
    /// instead of the encoder output (context ablation).
    pub context: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            cnn: CnnConfig::default(),
            transformer: TransformerConfig::default(),
            head_hidden: 64,
            context: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.cnn.validate()?;
        self.transformer.validate()?;
        if self.head_hidden == 0 {
            return Err(Error::Config("head_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Which classifier output a saliency or probe refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Event,
    /// Prong head output for the prong at this index.
    Prong(usize),
}

/// Scalar network output to differentiate: the sum over `classes` of the
/// softmax probabilities (or raw logits) of `head`, taken with respect to
/// the pixels of input map `map` (0 = event map, `i` = prong `i - 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyTarget {
    pub head: Head,
    pub classes: Vec<usize>,
    pub logits: bool,
    pub map: usize,
}

/// Plain-value network outputs for one event.
#[derive(Debug, Clone, PartialEq)]
pub struct EventOutput {
    pub event_logits: Vec<f64>,
    pub prong_logits: Vec<Vec<f64>>,
    pub attention: AttentionStack,
    /// Rows: event map first, then each prong.
    pub embeddings: Vec<Vec<f64>>,
}

/// Graph handles for a batch forward pass.
pub struct BatchVars {
    /// `(B × 10)`
    pub event_logits: Var,
    /// `(P × 9)` over all prongs of the batch, or `None` when there are none.
    pub prong_logits: Option<Var>,
    /// Prong rows of event `b` are `prong_offsets[b]..prong_offsets[b + 1]`.
    pub prong_offsets: Vec<usize>,
    pub attention: Vec<AttentionStack>,
    pub event_embeddings: Var,
    pub prong_embeddings: Option<Var>,
}

/// The assembled network. Parameters live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct TransformerCvn {
    config: ModelConfig,
    prong_cnn: EmbeddingCnn,
    event_cnn: EmbeddingCnn,
    encoder: Encoder,
}

impl TransformerCvn {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.cnn.embedding_dim;
        Ok(Self {
            prong_cnn: EmbeddingCnn::new(PRONG_CNN, config.cnn.clone())?,
            event_cnn: EmbeddingCnn::new(EVENT_CNN, config.cnn.clone())?,
            encoder: Encoder::new(config.transformer.clone(), d + config.transformer.type_dim)?,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn prong_cnn(&self) -> &EmbeddingCnn {
        &self.prong_cnn
    }

    pub fn event_cnn(&self) -> &EmbeddingCnn {
        &self.event_cnn
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    fn prong_head_input_dim(&self) -> usize {
        if self.config.context {
            self.config.transformer.model_dim
        } else {
            self.config.cnn.embedding_dim
        }
    }

    /// Fresh parameters drawn from a seeded generator.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.prong_cnn.init_params(&mut store, &mut rng)?;
        self.event_cnn.init_params(&mut store, &mut rng)?;
        init_type_embeddings(&mut store, &mut rng, self.config.transformer.type_dim)?;
        self.encoder.init_params(&mut store, &mut rng)?;
        let h = self.config.head_hidden;
        let heads = [
            (EVENT_HEAD, self.config.transformer.model_dim, EventClass::COUNT),
            (PRONG_HEAD, self.prong_head_input_dim(), ProngClass::COUNT),
        ];
        for (name, din, dout) in heads {
            store.init_he_uniform(&mut rng, &format!("{name}.hidden.weight"), &[din, h], din)?;
            store.init_const(&format!("{name}.hidden.bias"), &[h], 0.0)?;
            store.init_xavier(&mut rng, &format!("{name}.out.weight"), &[h, dout], h, dout)?;
            store.init_const(&format!("{name}.out.bias"), &[dout], 0.0)?;
        }
        Ok(store)
    }

    fn head(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
        let w = g.param(store, &format!("{name}.hidden.weight"))?;
        let b = g.param(store, &format!("{name}.hidden.bias"))?;
        let hdn = g.linear(x, w, b)?;
        let hdn = g.relu(hdn);
        let w = g.param(store, &format!("{name}.out.weight"))?;
        let b = g.param(store, &format!("{name}.out.bias"))?;
        g.linear(hdn, w, b)
    }

    fn with_type(g: &mut Graph, store: &ParamStore, x: Var, type_name: &str) -> Result<Var> {
        let n = g.shape(x)[0];
        let t = g.param(store, type_name)?;
        let dim = g.shape(t)[0];
        let t = g.reshape(t, &[1, dim])?;
        let rows = g.gather_rows(t, &vec![0; n])?;
        g.concat(&[x, rows], 1)
    }

    /// Records the forward pass of a batch of events on `g`.
    ///
    /// `dense` (event index in the batch, map index, grids) replaces the
    /// stem input of one map with dense pixel grids for saliency.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        events: &[&Event],
        dense: Option<(usize, usize, [Var; 2])>,
    ) -> Result<BatchVars> {
        if events.is_empty() {
            return Err(Error::Invalid("forward on an empty batch".into()));
        }
        let mut prong_offsets = vec![0];
        for e in events {
            if e.prongs.len() > MAX_PRONGS {
                return Err(Error::Invalid(format!(
                    "event with {} prongs; at most {MAX_PRONGS} are accepted (cap upstream)",
                    e.prongs.len()
                )));
            }
            prong_offsets.push(prong_offsets.last().unwrap() + e.prongs.len());
        }
        let total_prongs = *prong_offsets.last().unwrap();

        let mut event_dense = None;
        let mut prong_dense = None;
        if let Some((b, m, grids)) = dense {
            if b >= events.len() || m > events[b].prongs.len() {
                return Err(Error::Invalid(format!("no map {m} in event {b}")));
            }
            if m == 0 {
                event_dense = Some(DenseInput { map: b, grids });
            } else {
                prong_dense = Some(DenseInput {
                    map: prong_offsets[b] + m - 1,
                    grids,
                });
            }
        }

        let event_maps: Vec<&SparsePixelMap> = events.iter().map(|e| &e.event_map).collect();
        let event_emb = self.event_cnn.embed(g, store, &event_maps, event_dense)?;
        let prong_emb = if total_prongs > 0 {
            let maps: Vec<&SparsePixelMap> = events.iter().flat_map(|e| e.prongs.iter().map(|p| &p.map)).collect();
            Some(self.prong_cnn.embed(g, store, &maps, prong_dense)?)
        } else {
            None
        };

        let ev_aug = Self::with_type(g, store, event_emb, TYPE_EVENT)?;
        let ev_proj = self.encoder.project(g, store, ev_aug)?;
        let pr_proj = match prong_emb {
            Some(p) => {
                let aug = Self::with_type(g, store, p, TYPE_PRONG)?;
                Some(self.encoder.project(g, store, aug)?)
            }
            None => None,
        };

        let mut attention = Vec::with_capacity(events.len());
        let mut event_rows = Vec::with_capacity(events.len());
        let mut prong_rows = Vec::new();
        for b in 0..events.len() {
            let ev = g.gather_rows(ev_proj, &[b])?;
            let (lo, hi) = (prong_offsets[b], prong_offsets[b + 1]);
            let x = match pr_proj {
                Some(pp) if hi > lo => {
                    let pr = g.gather_rows(pp, &(lo..hi).collect::<Vec<_>>())?;
                    g.concat(&[ev, pr], 0)?
                }
                _ => ev,
            };
            let (enc, att) = self.encoder.encode_projected(g, store, x)?;
            attention.push(att);
            event_rows.push(g.gather_rows(enc, &[0])?);
            if hi > lo {
                prong_rows.push(g.gather_rows(enc, &(1..=hi - lo).collect::<Vec<_>>())?);
            }
        }
        let event_enc = if event_rows.len() == 1 { event_rows[0] } else { g.concat(&event_rows, 0)? };
        let event_logits = Self::head(g, store, EVENT_HEAD, event_enc)?;
        let prong_logits = match prong_emb {
            None => None,
            Some(pe) => {
                let input = if self.config.context {
                    if prong_rows.len() == 1 {
                        prong_rows[0]
                    } else {
                        g.concat(&prong_rows, 0)?
                    }
                } else {
                    pe
                };
                Some(Self::head(g, store, PRONG_HEAD, input)?)
            }
        };
        Ok(BatchVars {
            event_logits,
            prong_logits,
            prong_offsets,
            attention,
            event_embeddings: event_emb,
            prong_embeddings: prong_emb,
        })
    }

    fn outputs(g: &Graph, vars: BatchVars) -> Vec<EventOutput> {
        let ev = g.value(vars.event_logits);
        let pr = vars.prong_logits.map(|p| g.value(p));
        let eemb = g.value(vars.event_embeddings);
        let pemb = vars.prong_embeddings.map(|p| g.value(p));
        vars.attention
            .into_iter()
            .enumerate()
            .map(|(b, attention)| {
                let (lo, hi) = (vars.prong_offsets[b], vars.prong_offsets[b + 1]);
                let mut embeddings = vec![eemb.row(b).to_vec()];
                let mut prong_logits = Vec::with_capacity(hi - lo);
                for r in lo..hi {
                    prong_logits.push(pr.unwrap().row(r).to_vec());
                    embeddings.push(pemb.unwrap().row(r).to_vec());
                }
                EventOutput {
                    event_logits: ev.row(b).to_vec(),
                    prong_logits,
                    attention,
                    embeddings,
                }
            })
            .collect()
    }

    /// Forward pass of a batch of events, evaluated in one graph.
    pub fn forward_batch(&self, store: &ParamStore, events: &[&Event]) -> Result<Vec<EventOutput>> {
        let mut g = Graph::new();
        let vars = self.forward_graph(&mut g, store, events, None)?;
        g.check_finite()?;
        Ok(Self::outputs(&g, vars))
    }

    pub fn forward(&self, store: &ParamStore, event: &Event) -> Result<EventOutput> {
        Ok(self.forward_batch(store, &[event])?.remove(0))
    }

    /// Sum over the batch of each event's joint focal loss, divided by
    /// `normalizer`. Returns the loss node and the batch handles.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        events: &[&Event],
        gamma: f64,
        normalizer: f64,
    ) -> Result<(Var, BatchVars)> {
        let vars = self.forward_graph(g, store, events, None)?;
        let targets: Vec<usize> = events.iter().map(|e| e.label.index()).collect();
        let ev_loss = g.focal_loss(vars.event_logits, &targets, gamma)?;
        let mut weights: Vec<f64> = events
            .iter()
            .map(|e| 1.0 / ((1 + e.prongs.len()) as f64 * normalizer))
            .collect();
        let mut parts = vec![ev_loss];
        if let Some(pl) = vars.prong_logits {
            let pt: Vec<usize> = events
                .iter()
                .flat_map(|e| e.prongs.iter().map(|p| p.truth.label.index()))
                .collect();
            parts.push(g.focal_loss(pl, &pt, gamma)?);
            for e in events {
                let w = 1.0 / ((1 + e.prongs.len()) as f64 * normalizer);
                weights.extend(std::iter::repeat_n(w, e.prongs.len()));
            }
        }
        let all = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 0)? };
        let n = weights.len();
        let w = g.constant(Tensor::new(vec![n], weights)?);
        let weighted = g.mul(all, w)?;
        let loss = g.sum(weighted, None)?;
        Ok((loss, vars))
    }

    /// Loss, named parameter gradients and plain outputs for a chunk.
    pub fn loss_and_gradients(
        &self,
        store: &ParamStore,
        events: &[&Event],
        gamma: f64,
        normalizer: f64,
    ) -> Result<(f64, Gradients, Vec<EventOutput>, usize)> {
        let mut g = Graph::new();
        let (loss, vars) = self.loss_graph(&mut g, store, events, gamma, normalizer)?;
        g.check_finite()?;
        let grads = g.backward(loss)?;
        let value = g.value(loss).item();
        let clamps = g.clamp_count();
        Ok((value, grads, Self::outputs(&g, vars), clamps))
    }

    fn selected_output(g: &mut Graph, vars: &BatchVars, target: &SaliencyTarget) -> Result<Var> {
        let (logits, row, k) = match target.head {
            Head::Event => (vars.event_logits, 0, EventClass::COUNT),
            Head::Prong(p) => {
                let pl = vars
                    .prong_logits
                    .ok_or_else(|| Error::Invalid("prong output requested for an event without prongs".into()))?;
                if p >= vars.prong_offsets[1] {
                    return Err(Error::Invalid(format!("no prong {p}")));
                }
                (pl, p, ProngClass::COUNT)
            }
        };
        if let Some(c) = target.classes.iter().find(|&&c| c >= k) {
            return Err(Error::Invalid(format!("class {c} out of range for {k} outputs")));
        }
        let mut sel = vec![0.0; k];
        for &c in &target.classes {
            sel[c] = 1.0;
        }
        let r = g.gather_rows(logits, &[row])?;
        let r = if target.logits { r } else { g.softmax(r, 1)? };
        let s = g.constant(Tensor::new(vec![k, 1], sel)?);
        let o = g.matmul(r, s)?;
        g.sum(o, None)
    }

    /// Value of the target output and its gradient with respect to the
    /// two dense input grids (`cells × planes`, row = cell, intensity
    /// divided by 255) of the target map.
    pub fn output_gradient(
        &self,
        store: &ParamStore,
        event: &Event,
        target: &SaliencyTarget,
        grids: &[Vec<f64>; 2],
    ) -> Result<(f64, [Vec<f64>; 2])> {
        let mut out = self.output_gradients(store, event, std::slice::from_ref(target), grids)?;
        Ok(out.remove(0))
    }

    /// [`Self::output_gradient`] for several targets sharing one forward
    /// pass. All targets must refer to the same input map.
    pub fn output_gradients(
        &self,
        store: &ParamStore,
        event: &Event,
        targets: &[SaliencyTarget],
        grids: &[Vec<f64>; 2],
    ) -> Result<Vec<(f64, [Vec<f64>; 2])>> {
        let map = match targets.first() {
            Some(t) => t.map,
            None => return Ok(Vec::new()),
        };
        if targets.iter().any(|t| t.map != map) {
            return Err(Error::Invalid("saliency targets refer to different maps".into()));
        }
        let n = event.event_map.planes() * event.event_map.cells();
        if grids.iter().any(|v| v.len() != n) {
            return Err(Error::Shape(format!("dense grids must have {n} entries")));
        }
        let mut g = Graph::new();
        let gx = g.leaf(Tensor::new(vec![n, 1], grids[0].clone())?, true);
        let gy = g.leaf(Tensor::new(vec![n, 1], grids[1].clone())?, true);
        let vars = self.forward_graph(&mut g, store, &[event], Some((0, map, [gx, gy])))?;
        let outs = targets
            .iter()
            .map(|t| Self::selected_output(&mut g, &vars, t))
            .collect::<Result<Vec<_>>>()?;
        g.check_finite()?;
        outs.into_iter()
            .map(|o| {
                let grads = g.backward(o)?;
                Ok((
                    g.value(o).item(),
                    [grads.get(gx).into_data(), grads.get(gy).into_data()],
                ))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Generator;

    fn tiny(context: bool) -> TransformerCvn {
        TransformerCvn::new(ModelConfig {
            cnn: CnnConfig {
                stem_channels: 4,
                blocks: 1,
                layers_per_block: 1,
                growth: 4,
                embedding_dim: 8,
                ..Default::default()
            },
            transformer: TransformerConfig {
                model_dim: 8,
                layers: 1,
                heads: 2,
                type_dim: 4,
                ff_mult: 2,
            },
            head_hidden: 8,
            context,
        })
        .unwrap()
    }

    #[test]
    fn parameter_sets_are_disjoint() {
        let m = tiny(true);
        let store = m.init_params(0).unwrap();
        let prong: Vec<&str> = store.names().filter(|n| n.starts_with("prong_cnn.")).collect();
        let event: Vec<&str> = store.names().filter(|n| n.starts_with("event_cnn.")).collect();
        assert!(!prong.is_empty());
        assert_eq!(prong.len(), event.len());
        for p in &prong {
            assert!(!event.contains(p));
        }
        assert!(store.get("prong_head.out.weight").is_some());
        assert!(store.get("event_head.out.weight").is_some());
    }

    #[test]
    fn event_without_prongs() {
        let m = tiny(true);
        let store = m.init_params(1).unwrap();
        let mut e = Generator::default().generate_seeded(5, EventClass::Nc);
        e.prongs.clear();
        let out = m.forward(&store, &e).unwrap();
        assert_eq!(out.event_logits.len(), 10);
        assert!(out.prong_logits.is_empty());
        assert_eq!(out.attention.size(), 1);
    }

    #[test]
    fn too_many_prongs_rejected() {
        let m = tiny(true);
        let store = m.init_params(1).unwrap();
        let mut e = Generator::default().generate_seeded(6, EventClass::NumuCcQe);
        let p = e.prongs[0].clone();
        while e.prongs.len() <= MAX_PRONGS {
            e.prongs.push(p.clone());
        }
        assert!(m.forward(&store, &e).is_err());
    }

    #[test]
    fn batch_matches_single() {
        let m = tiny(false);
        let store = m.init_params(2).unwrap();
        let g = Generator::default();
        let events: Vec<Event> = (0..3).map(|i| g.generate_seeded(i, EventClass::ALL[i as usize * 3])).collect();
        let refs: Vec<&Event> = events.iter().collect();
        let batch = m.forward_batch(&store, &refs).unwrap();
        for (e, b) in events.iter().zip(&batch) {
            let s = m.forward(&store, e).unwrap();
            for (x, y) in s.event_logits.iter().zip(&b.event_logits) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
