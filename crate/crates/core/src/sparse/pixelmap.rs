use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default detector image extents: planes along the beam, cells across it.
pub const DEFAULT_PLANES: usize = 100;
pub const DEFAULT_CELLS: usize = 80;

/// One of the two orthogonal detector views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum View {
    X = 0,
    Y = 1,
}

impl View {
    pub const BOTH: [View; 2] = [View::X, View::Y];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<View> {
        match i {
            0 => Ok(View::X),
            1 => Ok(View::Y),
            _ => Err(Error::Invalid(format!("view index {i}"))),
        }
    }
}

/// A single non-zero pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Hit {
    pub plane: u16,
    pub cell: u16,
    pub intensity: u8,
}

impl Hit {
    pub fn new(plane: u16, cell: u16, intensity: u8) -> Self {
        Self {
            plane,
            cell,
            intensity,
        }
    }
}

/// Coordinate-list image pair. Absent pixels are zero; zero-intensity hits
/// and duplicate coordinates are rejected at construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsePixelMap {
    planes: usize,
    cells: usize,
    views: [Vec<Hit>; 2],
}

impl SparsePixelMap {
    pub fn new(planes: usize, cells: usize, x: Vec<Hit>, y: Vec<Hit>) -> Result<Self> {
        let map = Self {
            planes,
            cells,
            views: [x, y],
        };
        map.validate()?;
        Ok(map)
    }

    pub fn empty(planes: usize, cells: usize) -> Self {
        Self {
            planes,
            cells,
            views: [Vec::new(), Vec::new()],
        }
    }

    /// Builds a map from `(view, plane, cell, intensity)` quadruples.
    pub fn from_quads(planes: usize, cells: usize, quads: &[(u8, u16, u16, u8)]) -> Result<Self> {
        let mut views = [Vec::new(), Vec::new()];
        for &(v, p, c, i) in quads {
            views[View::from_index(v as usize)?.index()].push(Hit::new(p, c, i));
        }
        let [x, y] = views;
        Self::new(planes, cells, x, y)
    }

    fn validate(&self) -> Result<()> {
        for view in View::BOTH {
            let mut seen = std::collections::HashSet::new();
            for h in self.hits(view) {
                if h.plane as usize >= self.planes || h.cell as usize >= self.cells {
                    return Err(Error::Invalid(format!(
                        "hit ({}, {}) outside {}x{} view {view:?}",
                        h.plane, h.cell, self.planes, self.cells
                    )));
                }
                if h.intensity == 0 {
                    return Err(Error::Invalid(format!(
                        "zero-intensity hit at ({}, {}) in view {view:?}",
                        h.plane, h.cell
                    )));
                }
                if !seen.insert((h.plane, h.cell)) {
                    return Err(Error::Invalid(format!(
                        "duplicate hit at ({}, {}) in view {view:?}",
                        h.plane, h.cell
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn planes(&self) -> usize {
        self.planes
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn hits(&self, view: View) -> &[Hit] {
        &self.views[view.index()]
    }

    pub fn num_hits(&self) -> usize {
        self.views[0].len() + self.views[1].len()
    }

    pub fn is_empty(&self) -> bool {
        self.num_hits() == 0
    }

    /// Fraction of non-zero pixels over both views.
    pub fn occupancy(&self) -> f64 {
        self.num_hits() as f64 / (2 * self.planes * self.cells) as f64
    }

    pub fn quads(&self) -> impl Iterator<Item = (u8, u16, u16, u8)> + '_ {
        View::BOTH.into_iter().flat_map(move |v| {
            self.hits(v)
                .iter()
                .map(move |h| (v as u8, h.plane, h.cell, h.intensity))
        })
    }

    pub fn contains(&self, view: View, plane: u16, cell: u16) -> bool {
        self.hits(view)
            .iter()
            .any(|h| h.plane == plane && h.cell == cell)
    }

    /// Dense `cells × planes` grid (row = cell) of one view.
    pub fn dense(&self, view: View) -> Vec<f64> {
        let mut grid = vec![0.0; self.planes * self.cells];
        for h in self.hits(view) {
            grid[h.cell as usize * self.planes + h.plane as usize] = h.intensity as f64;
        }
        grid
    }

    /// Same hits with every intensity mapped through `f` (clamped to 1..=255).
    pub fn map_intensity(&self, f: impl Fn(u8) -> f64) -> Self {
        let m = |hs: &[Hit]| {
            hs.iter()
                .map(|h| Hit::new(h.plane, h.cell, f(h.intensity).round().clamp(1.0, 255.0) as u8))
                .collect()
        };
        Self {
            planes: self.planes,
            cells: self.cells,
            views: [m(&self.views[0]), m(&self.views[1])],
        }
    }
}

/// Lookup from `(view, plane, cell)` to the hit's position in its view list.
#[derive(Debug, Clone)]
pub struct ActiveSiteIndex {
    index: HashMap<(View, u16, u16), usize>,
}

impl ActiveSiteIndex {
    pub fn build(map: &SparsePixelMap) -> Self {
        let mut index = HashMap::with_capacity(map.num_hits());
        for view in View::BOTH {
            for (i, h) in map.hits(view).iter().enumerate() {
                index.insert((view, h.plane, h.cell), i);
            }
        }
        Self { index }
    }

    pub fn get(&self, view: View, plane: u16, cell: u16) -> Option<usize> {
        self.index.get(&(view, plane, cell)).copied()
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicates_and_zero_hits() {
        let dup = SparsePixelMap::new(10, 10, vec![Hit::new(1, 1, 5), Hit::new(1, 1, 6)], vec![]);
        assert!(dup.is_err());
        let zero = SparsePixelMap::new(10, 10, vec![Hit::new(1, 1, 0)], vec![]);
        assert!(zero.is_err());
        let oob = SparsePixelMap::new(10, 10, vec![], vec![Hit::new(10, 1, 3)]);
        assert!(oob.is_err());
        // the same coordinate in both views is fine
        let ok = SparsePixelMap::new(10, 10, vec![Hit::new(1, 1, 5)], vec![Hit::new(1, 1, 5)]);
        assert!(ok.is_ok());
    }

    #[test]
    fn index_is_bijective() {
        let map = SparsePixelMap::from_quads(
            20,
            20,
            &[(0, 1, 2, 9), (0, 3, 4, 9), (1, 1, 2, 7), (1, 5, 5, 1)],
        )
        .unwrap();
        let idx = ActiveSiteIndex::build(&map);
        assert_eq!(idx.len(), map.num_hits());
        for view in View::BOTH {
            for (i, h) in map.hits(view).iter().enumerate() {
                assert_eq!(idx.get(view, h.plane, h.cell), Some(i));
            }
        }
        assert_eq!(idx.get(View::X, 5, 5), None);
    }
}
