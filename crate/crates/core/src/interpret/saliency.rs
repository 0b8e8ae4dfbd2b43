//! Input-gradient saliency with noise and blur smoothing.
//!
//! Gradients are taken with respect to the network's dense input grids,
//! i.e. intensities already divided by 255. Grids use the pixel-map dense
//! layout: index `cell * planes + plane`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Event;
use crate::error::{Error, Result};
use crate::model::{Head, ProngClass, SaliencyTarget, TransformerCvn};
use crate::par;
use crate::params::ParamStore;
use crate::sparse::{SparsePixelMap, View, INTENSITY_SCALE};

/// Dense per-view gradient grid with the extents of the input map.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub planes: usize,
    pub cells: usize,
    pub views: [Vec<f64>; 2],
}

impl SaliencyMap {
    pub fn zeros(planes: usize, cells: usize) -> Self {
        Self {
            planes,
            cells,
            views: [vec![0.0; planes * cells], vec![0.0; planes * cells]],
        }
    }

    pub fn from_views(planes: usize, cells: usize, views: [Vec<f64>; 2]) -> Result<Self> {
        if views.iter().any(|v| v.len() != planes * cells) {
            return Err(Error::Shape(format!("saliency views must hold {planes}x{cells} values")));
        }
        Ok(Self { planes, cells, views })
    }

    pub fn index(&self, plane: usize, cell: usize) -> usize {
        cell * self.planes + plane
    }

    pub fn at(&self, view: usize, plane: usize, cell: usize) -> f64 {
        self.views[view][self.index(plane, cell)]
    }

    pub fn set(&mut self, view: usize, plane: usize, cell: usize, value: f64) {
        let i = self.index(plane, cell);
        self.views[view][i] = value;
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if (self.planes, self.cells) != (other.planes, other.cells) {
            return Err(Error::Shape(format!(
                "saliency maps {}x{} and {}x{}",
                self.planes, self.cells, other.planes, other.cells
            )));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other)?;
        for v in 0..2 {
            self.views[v].iter_mut().zip(&other.views[v]).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same(other)?;
        let mut out = self.clone();
        for v in 0..2 {
            out.views[v].iter_mut().zip(&other.views[v]).for_each(|(a, b)| *a -= b);
        }
        Ok(out)
    }

    pub fn scale(&mut self, k: f64) {
        self.views.iter_mut().flatten().for_each(|x| *x *= k);
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.views
            .iter()
            .flatten()
            .zip(other.views.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.views.iter().flatten().all(|x| x.is_finite())
    }
}

/// Anything that can report outputs and their input gradients at a dense
/// input. One call returns every output it exposes.
pub trait SaliencyModel: Sync {
    fn num_outputs(&self) -> usize;
    fn evaluate(&self, grids: &[Vec<f64>; 2]) -> Result<Vec<(f64, [Vec<f64>; 2])>>;
}

/// `O_k = w_k · I`. Its saliency is exactly `w_k` everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSurrogate {
    pub weights: Vec<[Vec<f64>; 2]>,
}

impl SaliencyModel for LinearSurrogate {
    fn num_outputs(&self) -> usize {
        self.weights.len()
    }

    fn evaluate(&self, grids: &[Vec<f64>; 2]) -> Result<Vec<(f64, [Vec<f64>; 2])>> {
        self.weights
            .iter()
            .map(|w| {
                if w[0].len() != grids[0].len() || w[1].len() != grids[1].len() {
                    return Err(Error::Shape("surrogate weights do not match input".into()));
                }
                let o: f64 = (0..2)
                    .map(|v| w[v].iter().zip(&grids[v]).map(|(a, b)| a * b).sum::<f64>())
                    .sum();
                Ok((o, w.clone()))
            })
            .collect()
    }
}

/// The trained network seen from one input map of one event.
pub struct ModelProbe<'a> {
    pub model: &'a TransformerCvn,
    pub store: &'a ParamStore,
    pub event: &'a Event,
    pub targets: Vec<SaliencyTarget>,
}

impl<'a> ModelProbe<'a> {
    /// One output per fine prong label of prong `prong`, differentiated
    /// with respect to that prong's own pixel map.
    pub fn prong_outputs(
        model: &'a TransformerCvn,
        store: &'a ParamStore,
        event: &'a Event,
        prong: usize,
        logits: bool,
    ) -> Self {
        let targets = (0..ProngClass::COUNT)
            .map(|c| SaliencyTarget {
                head: Head::Prong(prong),
                classes: vec![c],
                logits,
                map: prong + 1,
            })
            .collect();
        Self {
            model,
            store,
            event,
            targets,
        }
    }

    /// Input map the probe differentiates against.
    pub fn input_map(&self) -> Result<&'a SparsePixelMap> {
        let map = self.targets.first().map_or(0, |t| t.map);
        if map == 0 {
            Ok(&self.event.event_map)
        } else {
            self.event
                .prongs
                .get(map - 1)
                .map(|p| &p.map)
                .ok_or_else(|| Error::Invalid(format!("no input map {map}")))
        }
    }
}

impl SaliencyModel for ModelProbe<'_> {
    fn num_outputs(&self) -> usize {
        self.targets.len()
    }

    fn evaluate(&self, grids: &[Vec<f64>; 2]) -> Result<Vec<(f64, [Vec<f64>; 2])>> {
        self.model.output_gradients(self.store, self.event, &self.targets, grids)
    }
}

/// Network input grids of a pixel map: intensities divided by 255.
pub fn dense_input(map: &SparsePixelMap) -> [Vec<f64>; 2] {
    [View::X, View::Y].map(|v| map.dense(v).into_iter().map(|x| x / INTENSITY_SCALE).collect())
}

/// Plain saliency of every output at `grids`.
pub fn saliency<M: SaliencyModel>(model: &M, planes: usize, cells: usize, grids: &[Vec<f64>; 2]) -> Result<Vec<SaliencyMap>> {
    model
        .evaluate(grids)?
        .into_iter()
        .map(|(_, g)| SaliencyMap::from_views(planes, cells, g))
        .collect()
}

/// Normalized Gaussian kernel truncated at 3σ; `[1.0]` for σ = 0.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|x| x / s).collect()
}

/// Separable Gaussian blur of one dense grid with zero padding.
pub fn gaussian_blur(grid: &[f64], planes: usize, cells: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    if k.len() == 1 {
        return grid.to_vec();
    }
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; grid.len()];
    for c in 0..cells {
        for p in 0..planes {
            let mut acc = 0.0;
            for (i, w) in k.iter().enumerate() {
                let q = p as i64 + i as i64 - r;
                if (0..planes as i64).contains(&q) {
                    acc += w * grid[c * planes + q as usize];
                }
            }
            tmp[c * planes + p] = acc;
        }
    }
    let mut out = vec![0.0; grid.len()];
    for c in 0..cells {
        for p in 0..planes {
            let mut acc = 0.0;
            for (i, w) in k.iter().enumerate() {
                let q = c as i64 + i as i64 - r;
                if (0..cells as i64).contains(&q) {
                    acc += w * tmp[q as usize * planes + p];
                }
            }
            out[c * planes + p] = acc;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothingConfig {
    pub samples: usize,
    /// Half-width of the uniform noise added to active pixels, in input units.
    pub noise: f64,
    pub blur_sigma: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            samples: 16,
            noise: 2.0 / INTENSITY_SCALE,
            blur_sigma: 1.0,
        }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("saliency samples must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.blur_sigma >= 0.0) {
            return Err(Error::Config("saliency noise and blur must be non-negative".into()));
        }
        Ok(())
    }
}

/// Mean saliency over `samples` noisy, blurred copies of `map`. Noise is
/// drawn only on the map's hits, in hit order, from a ChaCha8 stream
/// seeded by `seed`; the sample gradients are summed in sample order.
pub fn smoothed_saliency<M: SaliencyModel>(
    model: &M,
    map: &SparsePixelMap,
    config: &SmoothingConfig,
    seed: u64,
) -> Result<Vec<SaliencyMap>> {
    config.validate()?;
    let (planes, cells) = (map.planes(), map.cells());
    let base = dense_input(map);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<[Vec<f64>; 2]> = (0..config.samples)
        .map(|_| {
            let mut g = base.clone();
            for view in [View::X, View::Y] {
                for h in map.hits(view) {
                    let u: f64 = rng.gen();
                    g[view.index()][h.cell as usize * planes + h.plane as usize] += config.noise * (2.0 * u - 1.0);
                }
            }
            g.map(|v| gaussian_blur(&v, planes, cells, config.blur_sigma))
        })
        .collect();
    let results = par::map(&inputs, |g| saliency(model, planes, cells, g));
    let mut acc: Option<Vec<SaliencyMap>> = None;
    for r in results {
        let maps = r?;
        match acc.as_mut() {
            None => acc = Some(maps),
            Some(a) => {
                for (x, y) in a.iter_mut().zip(&maps) {
                    x.add_assign(y)?;
                }
            }
        }
    }
    let mut out = acc.unwrap_or_default();
    for m in &mut out {
        m.scale(1.0 / config.samples as f64);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::Hit;

    fn toy_map() -> SparsePixelMap {
        SparsePixelMap::new(
            6,
            5,
            vec![Hit::new(1, 2, 100), Hit::new(2, 2, 40)],
            vec![Hit::new(4, 0, 255)],
        )
        .unwrap()
    }

    fn surrogate(seed: u64) -> LinearSurrogate {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = |rng: &mut ChaCha8Rng| (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        LinearSurrogate {
            weights: vec![[w(&mut rng), w(&mut rng)], [w(&mut rng), w(&mut rng)]],
        }
    }

    #[test]
    fn kernel_is_normalized_and_truncated() {
        let k = gaussian_kernel(1.0);
        assert_eq!(k.len(), 7);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(gaussian_kernel(0.0), vec![1.0]);
    }

    #[test]
    fn blur_preserves_interior_mass() {
        let (p, c) = (15, 15);
        let mut g = vec![0.0; p * c];
        g[7 * p + 7] = 1.0;
        let b = gaussian_blur(&g, p, c, 1.0);
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(b[7 * p + 7] > b[7 * p + 8]);
        assert!((b[7 * p + 8] - b[8 * p + 7]).abs() < 1e-15);
    }

    #[test]
    fn linear_surrogate_is_exact() {
        let m = surrogate(1);
        let map = toy_map();
        let plain = saliency(&m, 6, 5, &dense_input(&map)).unwrap();
        for (s, w) in plain.iter().zip(&m.weights) {
            assert_eq!(s.views, *w);
        }
        let cfg = SmoothingConfig {
            samples: 5,
            noise: 0.1,
            blur_sigma: 1.5,
        };
        let smooth = smoothed_saliency(&m, &map, &cfg, 9).unwrap();
        for (s, w) in smooth.iter().zip(&m.weights) {
            let diff = s.views.iter().flatten().zip(w.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-14);
        }
    }

    #[test]
    fn degenerate_smoothing_is_plain() {
        let m = surrogate(2);
        let map = toy_map();
        let cfg = SmoothingConfig {
            samples: 1,
            noise: 0.0,
            blur_sigma: 0.0,
        };
        let a = smoothed_saliency(&m, &map, &cfg, 0).unwrap();
        let b = saliency(&m, 6, 5, &dense_input(&map)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn difference_is_antisymmetric() {
        let m = surrogate(3);
        let s = saliency(&m, 6, 5, &dense_input(&toy_map())).unwrap();
        let ab = s[0].sub(&s[1]).unwrap();
        let mut ba = s[1].sub(&s[0]).unwrap();
        ba.scale(-1.0);
        assert_eq!(ab, ba);
    }
}
