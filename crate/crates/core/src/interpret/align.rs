//! Vertex/track alignment of saliency maps, population means, difference
//! grids and integrated profiles.
//!
//! An aligned map keeps the input extents. Row `r` is the distance in
//! pixels from the vertex along the prong direction; column `c` is the
//! signed transverse offset `c - cells / 2`.

use serde::{Deserialize, Serialize};

use super::saliency::SaliencyMap;
use crate::datagen::ProngTruth;
use crate::error::{Error, Result};
use crate::model::{ProngClass, ProngKind};

/// Column of the track axis in an aligned map.
pub fn center_column(cells: usize) -> usize {
    cells / 2
}

fn bilinear(grid: &[f64], planes: usize, cells: usize, p: f64, c: f64) -> f64 {
    let (p0, c0) = (p.floor(), c.floor());
    let (fp, fc) = (p - p0, c - c0);
    let mut acc = 0.0;
    for (dp, wp) in [(0.0, 1.0 - fp), (1.0, fp)] {
        for (dc, wc) in [(0.0, 1.0 - fc), (1.0, fc)] {
            let w = wp * wc;
            if w == 0.0 {
                continue;
            }
            let (q, k) = (p0 + dp, c0 + dc);
            if q >= 0.0 && k >= 0.0 && (q as usize) < planes && (k as usize) < cells {
                acc += w * grid[k as usize * planes + q as usize];
            }
        }
    }
    acc
}

/// Resamples each view so the prong vertex sits at (row 0, center column)
/// and its direction points down the rows.
pub fn align_saliency(map: &SaliencyMap, truth: &ProngTruth) -> Result<SaliencyMap> {
    let (planes, cells) = (map.planes, map.cells);
    let cc = center_column(cells) as f64;
    let mut out = SaliencyMap::zeros(planes, cells);
    for v in 0..2 {
        let (vp, vc) = truth.vertex[v];
        let (dp, dc) = truth.direction[v];
        let norm = (dp * dp + dc * dc).sqrt();
        if !(norm > 1e-12) {
            return Err(Error::Invalid("prong direction has zero length".into()));
        }
        let (dp, dc) = (dp / norm, dc / norm);
        // transverse unit vector; (1, 0) maps to (0, 1)
        let (np, nc) = (-dc, dp);
        for r in 0..planes {
            for c in 0..cells {
                let t = c as f64 - cc;
                let sp = vp as f64 + r as f64 * dp + t * np;
                let sc = vc as f64 + r as f64 * dc + t * nc;
                out.views[v][c * planes + r] = bilinear(&map.views[v], planes, cells, sp, sc);
            }
        }
    }
    Ok(out)
}

/// Prong selection applied before averaging (both bounds strict).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Cuts {
    pub max_track_length: f64,
    pub max_energy: f64,
}

impl Default for Cuts {
    fn default() -> Self {
        Self {
            max_track_length: 50.0,
            max_energy: 4.0,
        }
    }
}

impl Cuts {
    pub fn passes(&self, truth: &ProngTruth) -> bool {
        truth.track_length < self.max_track_length && truth.energy < self.max_energy
    }
}

/// Aligned saliency maps of one prong, one per fine output label.
#[derive(Debug, Clone, PartialEq)]
pub struct ProngSaliency {
    pub label: ProngClass,
    pub maps: Vec<SaliencyMap>,
}

impl ProngSaliency {
    /// Map of a collapsed output: the sum of its fine labels' maps.
    pub fn kind_map(&self, kind: ProngKind) -> Result<SaliencyMap> {
        let first = self.maps.first().ok_or_else(|| Error::Invalid("prong without saliency maps".into()))?;
        let mut out = SaliencyMap::zeros(first.planes, first.cells);
        for c in ProngClass::ALL {
            if c.kind() == Some(kind) {
                let m = self
                    .maps
                    .get(c.index())
                    .ok_or_else(|| Error::Invalid(format!("missing saliency map for {}", c.name())))?;
                out.add_assign(m)?;
            }
        }
        Ok(out)
    }
}

/// Elementwise mean of maps; `None` for an empty population.
pub fn mean_map<'a>(maps: impl IntoIterator<Item = &'a SaliencyMap>) -> Result<Option<SaliencyMap>> {
    let mut acc: Option<SaliencyMap> = None;
    let mut n = 0usize;
    for m in maps {
        match acc.as_mut() {
            None => acc = Some(m.clone()),
            Some(a) => a.add_assign(m)?,
        }
        n += 1;
    }
    Ok(acc.map(|mut a| {
        a.scale(1.0 / n as f64);
        a
    }))
}

/// Mean aligned maps for every (truth population, fine output) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyAggregate {
    /// `means[population][output]`, populations indexed by truth label.
    pub means: Vec<Vec<Option<SaliencyMap>>>,
    pub counts: Vec<usize>,
}

pub fn aggregate_saliency(prongs: &[ProngSaliency]) -> Result<SaliencyAggregate> {
    let mut means = Vec::with_capacity(ProngClass::COUNT);
    let mut counts = Vec::with_capacity(ProngClass::COUNT);
    for pop in ProngClass::ALL {
        let members: Vec<&ProngSaliency> = prongs.iter().filter(|p| p.label == pop).collect();
        counts.push(members.len());
        let row = (0..ProngClass::COUNT)
            .map(|o| mean_map(members.iter().filter_map(|p| p.maps.get(o))))
            .collect::<Result<Vec<_>>>()?;
        means.push(row);
    }
    Ok(SaliencyAggregate { means, counts })
}

/// `a - b`.
pub fn difference_map(a: &SaliencyMap, b: &SaliencyMap) -> Result<SaliencyMap> {
    a.sub(b)
}

/// Five-by-five grid over the collapsed prong labels: diagonal entries are
/// mean maps of that output, off-diagonal `(a, b)` entries are
/// `mean(a) - mean(b)`. `None` marks an empty row population.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyGrid {
    pub labels: Vec<String>,
    pub entries: Vec<Vec<Option<SaliencyMap>>>,
    /// Prongs averaged in each row.
    pub counts: Vec<usize>,
}

impl SaliencyGrid {
    pub fn get(&self, a: ProngKind, b: ProngKind) -> Option<&SaliencyMap> {
        self.entries[a.index()][b.index()].as_ref()
    }
}

fn grid_row(members: &[&ProngSaliency]) -> Result<Vec<Option<SaliencyMap>>> {
    let mut means = Vec::with_capacity(ProngKind::COUNT);
    for k in ProngKind::ALL {
        let maps = members.iter().map(|p| p.kind_map(k)).collect::<Result<Vec<_>>>()?;
        means.push(mean_map(&maps)?);
    }
    Ok(means)
}

fn build_grid(rows: Vec<Vec<&ProngSaliency>>) -> Result<SaliencyGrid> {
    let mut entries = Vec::with_capacity(ProngKind::COUNT);
    let mut counts = Vec::with_capacity(ProngKind::COUNT);
    for (a, members) in rows.iter().enumerate() {
        counts.push(members.len());
        let means = grid_row(members)?;
        let mut row = Vec::with_capacity(ProngKind::COUNT);
        for b in 0..ProngKind::COUNT {
            row.push(match (&means[a], &means[b]) {
                (Some(ma), _) if a == b => Some(ma.clone()),
                (Some(ma), Some(mb)) => Some(difference_map(ma, mb)?),
                _ => None,
            });
        }
        entries.push(row);
    }
    Ok(SaliencyGrid {
        labels: ProngKind::ALL.iter().map(|k| k.name().to_string()).collect(),
        entries,
        counts,
    })
}

/// Every row averages over all given prongs.
pub fn saliency_grid_all(prongs: &[ProngSaliency]) -> Result<SaliencyGrid> {
    let all: Vec<&ProngSaliency> = prongs.iter().collect();
    build_grid(vec![all; ProngKind::COUNT])
}

/// Row `a` averages only over prongs whose collapsed truth label is `a`.
pub fn saliency_grid_matched(prongs: &[ProngSaliency]) -> Result<SaliencyGrid> {
    let rows = ProngKind::ALL
        .iter()
        .map(|&k| prongs.iter().filter(|p| p.label.kind() == Some(k)).collect())
        .collect();
    build_grid(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    Flat,
    /// Transverse Gaussian weight with this σ in pixels.
    Gaussian(f64),
}

impl Weighting {
    fn weight(self, offset: f64) -> f64 {
        match self {
            Weighting::Flat => 1.0,
            Weighting::Gaussian(s) => (-offset * offset / (2.0 * s * s)).exp(),
        }
    }
}

/// Default transverse σ for [`Weighting::Gaussian`].
pub const GAUSSIAN_WIDTH: f64 = 5.0;

/// Profile along the track: for each row, the weighted sum over columns,
/// added over both views.
pub fn integrate_saliency(map: &SaliencyMap, weighting: Weighting) -> Vec<f64> {
    let cc = center_column(map.cells) as f64;
    let w: Vec<f64> = (0..map.cells).map(|c| weighting.weight(c as f64 - cc)).collect();
    (0..map.planes)
        .map(|r| {
            (0..2)
                .map(|v| (0..map.cells).map(|c| w[c] * map.at(v, r, c)).sum::<f64>())
                .sum()
        })
        .collect()
}

/// Row with the largest profile value (first on ties).
pub fn profile_peak(profile: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in profile.iter().enumerate() {
        if best.is_none_or(|b| x > profile[b]) {
            best = Some(i);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth(vertex: (u16, u16), dir: (f64, f64)) -> ProngTruth {
        ProngTruth {
            label: ProngClass::Muon,
            vertex: [vertex, vertex],
            direction: [dir, dir],
            track_length: 10.0,
            energy: 1.0,
        }
    }

    fn random_map(planes: usize, cells: usize, seed: u64) -> SaliencyMap {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut m = SaliencyMap::zeros(planes, cells);
        m.views.iter_mut().flatten().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        m
    }

    #[test]
    fn identity_alignment() {
        let m = random_map(12, 10, 0);
        let a = align_saliency(&m, &truth((0, 5), (1.0, 0.0))).unwrap();
        assert!(a.max_abs_diff(&m) < 1e-12);
    }

    #[test]
    fn vertex_spike_lands_top_center() {
        let mut m = SaliencyMap::zeros(20, 16);
        m.set(0, 7, 3, 1.0);
        m.set(1, 7, 3, 2.0);
        let a = align_saliency(&m, &truth((7, 3), (0.6, 0.8))).unwrap();
        assert_eq!(a.at(0, 0, 8), 1.0);
        assert_eq!(a.at(1, 0, 8), 2.0);
    }

    #[test]
    fn zero_direction_rejected() {
        let m = SaliencyMap::zeros(4, 4);
        assert!(align_saliency(&m, &truth((0, 0), (0.0, 0.0))).is_err());
    }

    #[test]
    fn cuts_are_strict() {
        let c = Cuts::default();
        let mut t = truth((0, 0), (1.0, 0.0));
        t.track_length = 50.0;
        assert!(!c.passes(&t));
        t.track_length = 49.999;
        assert!(c.passes(&t));
        t.energy = 4.0;
        assert!(!c.passes(&t));
    }

    #[test]
    fn flat_uniform_profile_is_constant() {
        let mut m = SaliencyMap::zeros(6, 5);
        m.views.iter_mut().flatten().for_each(|x| *x = 0.5);
        assert!(integrate_saliency(&m, Weighting::Flat).iter().all(|&x| x == 5.0));
    }

    #[test]
    fn wide_gaussian_tends_to_flat() {
        let m = random_map(9, 11, 4);
        let f = integrate_saliency(&m, Weighting::Flat);
        let g = integrate_saliency(&m, Weighting::Gaussian(1e5));
        for (a, b) in f.iter().zip(&g) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn off_axis_spike_gaussian() {
        let mut m = SaliencyMap::zeros(8, 10);
        m.set(0, 3, 8, 2.0);
        let f = integrate_saliency(&m, Weighting::Flat);
        let g = integrate_saliency(&m, Weighting::Gaussian(GAUSSIAN_WIDTH));
        let d = 3.0;
        assert!((g[3] - f[3] * (-d * d / (2.0 * 25.0f64)).exp()).abs() < 1e-15);
    }

    #[test]
    fn population_mean_by_hand() {
        let mut a = SaliencyMap::zeros(2, 2);
        let mut b = SaliencyMap::zeros(2, 2);
        a.views[0] = vec![1.0, 2.0, 3.0, 4.0];
        b.views[0] = vec![3.0, 2.0, 1.0, 0.0];
        let m = mean_map([&a, &b]).unwrap().unwrap();
        assert_eq!(m.views[0], vec![2.0, 2.0, 2.0, 2.0]);
        assert_eq!(difference_map(&a, &b).unwrap().views[0], vec![-2.0, 0.0, 2.0, 4.0]);
        assert!(mean_map(std::iter::empty()).unwrap().is_none());
    }

    #[test]
    fn grids_mark_missing_rows() {
        let maps: Vec<SaliencyMap> = (0..9).map(|i| random_map(3, 3, i)).collect();
        let mu = ProngSaliency {
            label: ProngClass::Muon,
            maps,
        };
        let matched = saliency_grid_matched(std::slice::from_ref(&mu)).unwrap();
        assert!(matched.get(ProngKind::Electron, ProngKind::Electron).is_none());
        assert_eq!(matched.get(ProngKind::Muon, ProngKind::Muon), Some(&mu.maps[1]));
        let gamma = mu.kind_map(ProngKind::Photon).unwrap();
        let want = mu.maps[1].sub(&gamma).unwrap();
        assert_eq!(matched.get(ProngKind::Muon, ProngKind::Photon), Some(&want));
        let all = saliency_grid_all(&[mu]).unwrap();
        assert_eq!(all.counts, vec![1; 5]);
    }
}
