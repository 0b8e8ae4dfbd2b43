//! Submanifold DenseNet-style embedding network.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layout::SiteLayout;
use super::pixelmap::{SparsePixelMap, View};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Graph, Rulebook, Tensor, Var};

/// Input intensities are divided by this before entering the network.
pub const INTENSITY_SCALE: f64 = 255.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnnConfig {
    pub stem_channels: usize,
    pub blocks: usize,
    pub layers_per_block: usize,
    pub growth: usize,
    pub embedding_dim: usize,
    pub kernel: usize,
    pub pool_stride: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            blocks: 2,
            layers_per_block: 2,
            growth: 16,
            embedding_dim: 64,
            kernel: 3,
            pool_stride: 2,
        }
    }
}

impl CnnConfig {
    /// Channel widths at the output of the stem and of every block.
    pub fn block_channels(&self) -> Vec<usize> {
        let mut out = vec![self.stem_channels];
        let mut c = self.stem_channels;
        for _ in 0..self.blocks {
            c += self.layers_per_block * self.growth;
            out.push(c);
        }
        out
    }

    pub fn final_channels(&self) -> usize {
        *self.block_channels().last().unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel {} must be odd", self.kernel)));
        }
        if self.pool_stride < 2 {
            return Err(Error::Config("pool_stride must be at least 2".into()));
        }
        if self.stem_channels == 0 || self.embedding_dim == 0 {
            return Err(Error::Config("CNN widths must be positive".into()));
        }
        if self.blocks > 0 && (self.layers_per_block == 0 || self.growth == 0) {
            return Err(Error::Config("dense blocks need layers and growth".into()));
        }
        Ok(())
    }
}

/// Site features of a batch of images: `features` is `(sites × channels)`.
#[derive(Debug, Clone)]
pub struct SparseFeatureMap {
    pub layout: SiteLayout,
    pub features: Tensor,
}

impl SparseFeatureMap {
    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    /// Single-channel feature map of one view of a pixel map.
    pub fn from_view(map: &SparsePixelMap, view: View) -> Self {
        let hits = map.hits(view);
        let layout = SiteLayout::new(
            map.planes(),
            map.cells(),
            &[hits.iter().map(|h| (h.plane, h.cell)).collect()],
        );
        let data = hits
            .iter()
            .map(|h| h.intensity as f64 / INTENSITY_SCALE)
            .collect();
        Self {
            layout,
            features: Tensor::new(vec![hits.len(), 1], data).unwrap(),
        }
    }
}

fn check_conv_weight(weight: &Tensor, bias: &Tensor, cin: usize) -> Result<(usize, usize, usize)> {
    match weight.shape() {
        [cout, wi, kh, kw] if *wi == cin && kh % 2 == 1 && kw % 2 == 1 => {
            if bias.shape() != [*cout] {
                return Err(Error::Shape(format!(
                    "bias {:?} for {cout} output channels",
                    bias.shape()
                )));
            }
            Ok((*cout, *kh, *kw))
        }
        s => Err(Error::Shape(format!(
            "conv weight {s:?} for {cin} input channels (odd kernel required)"
        ))),
    }
}

/// Convolution evaluated only at the input's active sites, reading only
/// active neighbours. The active-site set is unchanged.
pub fn submanifold_conv(map: &SparseFeatureMap, weight: &Tensor, bias: &Tensor) -> Result<SparseFeatureMap> {
    let (_, kh, kw) = check_conv_weight(weight, bias, map.channels())?;
    let mut g = Graph::new();
    let x = g.constant(map.features.clone());
    let w = g.constant(weight.clone());
    let b = g.constant(bias.clone());
    let book = Arc::new(map.layout.submanifold_rulebook(kh, kw));
    let y = g.sparse_conv(x, w, b, book)?;
    Ok(SparseFeatureMap {
        layout: map.layout.clone(),
        features: g.value(y).clone(),
    })
}

/// Channelwise max pooling onto the coarsened coordinate grid.
pub fn sparse_pool(map: &SparseFeatureMap, stride: usize) -> Result<SparseFeatureMap> {
    if stride < 2 {
        return Err(Error::Invalid(format!("pool stride {stride} < 2")));
    }
    let (layout, book) = map.layout.pooled(stride);
    let mut g = Graph::new();
    let x = g.constant(map.features.clone());
    let y = g.max_pool(x, &book)?;
    Ok(SparseFeatureMap {
        layout,
        features: g.value(y).clone(),
    })
}

/// Densely connected block: layer `i` sees the channel concatenation of the
/// block input and all earlier layer outputs; the result concatenates all
/// of them. `layers` holds `(weight, bias)` per layer.
pub fn dense_block(map: &SparseFeatureMap, layers: &[(Tensor, Tensor)]) -> Result<SparseFeatureMap> {
    let mut cin = map.channels();
    let mut kernel = None;
    for (i, (w, b)) in layers.iter().enumerate() {
        let (cout, kh, kw) = check_conv_weight(w, b, cin)
            .map_err(|e| Error::Shape(format!("dense block layer {i}: {e}")))?;
        if kernel.is_some_and(|k| k != (kh, kw)) {
            return Err(Error::Shape(format!("dense block layer {i}: kernel size changes")));
        }
        kernel = Some((kh, kw));
        cin += cout;
    }
    let mut g = Graph::new();
    let x = g.constant(map.features.clone());
    let (kh, kw) = kernel.unwrap_or((3, 3));
    let book = Arc::new(map.layout.submanifold_rulebook(kh, kw));
    let mut parts = vec![x];
    for (w, b) in layers {
        let input = g.concat(&parts, 1)?;
        let wv = g.constant(w.clone());
        let bv = g.constant(b.clone());
        let y = g.sparse_conv(input, wv, bv, Arc::clone(&book))?;
        parts.push(g.relu(y));
    }
    let out = g.concat(&parts, 1)?;
    Ok(SparseFeatureMap {
        layout: map.layout.clone(),
        features: g.value(out).clone(),
    })
}

/// Dense input for one pixel map: one `(cells·planes × 1)` grid per view.
#[derive(Debug, Clone, Copy)]
pub struct DenseInput {
    pub map: usize,
    pub grids: [Var; 2],
}

/// One embedding CNN (prong or event), identified by its parameter prefix.
#[derive(Debug, Clone)]
pub struct EmbeddingCnn {
    prefix: String,
    config: CnnConfig,
}

impl EmbeddingCnn {
    pub fn new(prefix: impl Into<String>, config: CnnConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            prefix: prefix.into(),
            config,
        })
    }

    pub fn config(&self) -> &CnnConfig {
        &self.config
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    fn layer_name(&self, block: usize, layer: usize, part: &str) -> String {
        self.name(&format!("block{block}.layer{layer}.{part}"))
    }

    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let c = &self.config;
        let k = c.kernel;
        store.init_he_uniform(rng, &self.name("stem.weight"), &[c.stem_channels, 1, k, k], k * k)?;
        store.init_const(&self.name("stem.bias"), &[c.stem_channels], 0.0)?;
        let widths = c.block_channels();
        for b in 0..c.blocks {
            for l in 0..c.layers_per_block {
                let cin = widths[b] + l * c.growth;
                store.init_he_uniform(rng, &self.layer_name(b, l, "weight"), &[c.growth, cin, k, k], cin * k * k)?;
                store.init_const(&self.layer_name(b, l, "bias"), &[c.growth], 0.0)?;
            }
        }
        let feat = 2 * c.final_channels();
        store.init_xavier(rng, &self.name("proj.weight"), &[feat, c.embedding_dim], feat, c.embedding_dim)?;
        store.init_const(&self.name("proj.bias"), &[c.embedding_dim], 0.0)?;
        Ok(())
    }

    fn level0(maps: &[&SparsePixelMap]) -> Result<(SiteLayout, Tensor)> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Invalid("embedding an empty batch".into()))?;
        let (w, h) = (first.planes(), first.cells());
        let mut images = Vec::with_capacity(maps.len() * 2);
        let mut values = Vec::new();
        for m in maps {
            if (m.planes(), m.cells()) != (w, h) {
                return Err(Error::Shape("pixel maps of different extents in one batch".into()));
            }
            for v in View::BOTH {
                images.push(m.hits(v).iter().map(|h| (h.plane, h.cell)).collect());
                values.extend(m.hits(v).iter().map(|h| h.intensity as f64 / INTENSITY_SCALE));
            }
        }
        let n = values.len();
        Ok((SiteLayout::new(w, h, &images), Tensor::new(vec![n, 1], values)?))
    }

    /// Features after the stem and the first `blocks` dense blocks, before
    /// the pooling that follows the last of them.
    pub fn pre_pool_features(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        maps: &[&SparsePixelMap],
        blocks: usize,
    ) -> Result<(SiteLayout, Var)> {
        let (layout, x0) = Self::level0(maps)?;
        let x0 = g.constant(x0);
        let k = self.config.kernel;
        let book = Arc::new(layout.submanifold_rulebook(k, k));
        let mut x = self.stem(g, store, x0, Arc::clone(&book))?;
        let mut layout = layout;
        let mut book = book;
        for b in 0..blocks.min(self.config.blocks) {
            if b > 0 {
                let (next, pool) = layout.pooled(self.config.pool_stride);
                x = g.max_pool(x, &pool)?;
                layout = next;
                book = Arc::new(layout.submanifold_rulebook(k, k));
            }
            x = self.block(g, store, b, x, Arc::clone(&book))?;
        }
        Ok((layout, x))
    }

    fn stem(&self, g: &mut Graph, store: &ParamStore, x: Var, book: Arc<Rulebook>) -> Result<Var> {
        let w = g.param(store, &self.name("stem.weight"))?;
        let b = g.param(store, &self.name("stem.bias"))?;
        let y = g.sparse_conv(x, w, b, book)?;
        Ok(g.relu(y))
    }

    fn block(&self, g: &mut Graph, store: &ParamStore, b: usize, x: Var, book: Arc<Rulebook>) -> Result<Var> {
        let mut parts = vec![x];
        for l in 0..self.config.layers_per_block {
            let input = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 1)? };
            let w = g.param(store, &self.layer_name(b, l, "weight"))?;
            let bias = g.param(store, &self.layer_name(b, l, "bias"))?;
            let y = g.sparse_conv(input, w, bias, Arc::clone(&book))?;
            parts.push(g.relu(y));
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat(&parts, 1)
        }
    }

    /// Embeds a batch of pixel maps into an `(n_maps × embedding_dim)` matrix.
    ///
    /// Both views go through the same weights; each view's final features
    /// are averaged over its active sites and the two view vectors are
    /// concatenated before the output projection. A map with no hits in a
    /// view contributes a zero vector for that view.
    ///
    /// With `dense`, the stem of that map reads its input from the given
    /// dense grids (every in-bounds pixel, active or not), which makes the
    /// output differentiable with respect to every pixel.
    pub fn embed(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        maps: &[&SparsePixelMap],
        dense: Option<DenseInput>,
    ) -> Result<Var> {
        let (layout, x0) = Self::level0(maps)?;
        let k = self.config.kernel;
        let book = Arc::new(layout.submanifold_rulebook(k, k));
        let x0 = g.constant(x0);
        let mut x = match dense {
            None => self.stem(g, store, x0, Arc::clone(&book))?,
            Some(d) => {
                if d.map >= maps.len() {
                    return Err(Error::Invalid(format!("dense input for map {}", d.map)));
                }
                let grid = layout.width * layout.height;
                for v in d.grids {
                    if g.shape(v) != [grid, 1] {
                        return Err(Error::Shape(format!(
                            "dense grid {:?}, expected [{grid}, 1]",
                            g.shape(v)
                        )));
                    }
                }
                let stacked = g.concat(&[x0, d.grids[0], d.grids[1]], 0)?;
                let dense_book = Arc::new(layout.dense_input_rulebook(k, k, &[2 * d.map, 2 * d.map + 1]));
                self.stem(g, store, stacked, dense_book)?
            }
        };
        let mut layout = layout;
        let mut book = book;
        for b in 0..self.config.blocks {
            x = self.block(g, store, b, x, Arc::clone(&book))?;
            let (next, pool) = layout.pooled(self.config.pool_stride);
            x = g.max_pool(x, &pool)?;
            layout = next;
            if b + 1 < self.config.blocks {
                book = Arc::new(layout.submanifold_rulebook(k, k));
            }
        }
        let pooled = g.segment_mean(x, &layout.offsets)?;
        let c = self.config.final_channels();
        let per_map = g.reshape(pooled, &[maps.len(), 2 * c])?;
        let w = g.param(store, &self.name("proj.weight"))?;
        let b = g.param(store, &self.name("proj.bias"))?;
        g.linear(per_map, w, b)
    }

    /// Convenience: embedding of a single map as a plain vector.
    pub fn embed_pixelmap(&self, store: &ParamStore, map: &SparsePixelMap) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let e = self.embed(&mut g, store, &[map], None)?;
        g.check_finite()?;
        Ok(g.value(e).data().to_vec())
    }
}
