//! Synthetic two-view detector events with truth-labelled prongs.
//!
//! The physics is a cartoon: muons are long straight tracks, pions kinked
//! tracks, protons short bright stubs, electrons and photons cone showers
//! (photons detached from the vertex by a short gap) and the "other" and
//! cosmic classes diffuse random walks. Event content follows the
//! interaction label so that composition, not only shape, carries
//! information about each prong.

mod dataset;
mod generator;

pub use dataset::{
    build_dataset, read_dataset, read_dataset_header, write_dataset, Dataset, DatasetConfig, DatasetHeader,
    DatasetManifest, Split, SplitSummary, DATASET_SCHEMA, DATASET_VERSION, GENERATOR_VERSION, MANIFEST_SCHEMA,
};
pub use generator::{event_seed, quantize, Generator};

use crate::error::{Error, Result};
use crate::model::{EventClass, ProngClass};
use crate::sparse::{SparsePixelMap, View};

/// Prongs kept per event.
pub const MAX_PRONGS: usize = 10;

/// Truth geometry and kinematics of one prong.
///
/// `vertex` and `direction` are given per view as (plane, cell)
/// components; `direction` has unit length in each view.
#[derive(Debug, Clone, PartialEq)]
pub struct ProngTruth {
    pub label: ProngClass,
    pub vertex: [(u16, u16); 2],
    pub direction: [(f64, f64); 2],
    /// Length of the deposit along the prong axis in pixels.
    pub track_length: f64,
    /// Energy in GeV.
    pub energy: f64,
}

impl ProngTruth {
    pub fn vertex_in(&self, view: View) -> (u16, u16) {
        self.vertex[view.index()]
    }

    pub fn direction_in(&self, view: View) -> (f64, f64) {
        self.direction[view.index()]
    }

    pub fn validate(&self, planes: usize, cells: usize) -> Result<()> {
        for v in 0..2 {
            let (p, c) = self.vertex[v];
            if p as usize >= planes || c as usize >= cells {
                return Err(Error::Invalid(format!("prong vertex ({p}, {c}) outside {planes}x{cells}")));
            }
            let (dp, dc) = self.direction[v];
            let norm = (dp * dp + dc * dc).sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > 1e-5 {
                return Err(Error::Invalid(format!("prong direction ({dp}, {dc}) is not a unit vector")));
            }
        }
        if !(self.track_length > 0.0 && self.track_length.is_finite()) {
            return Err(Error::Invalid(format!("track length {}", self.track_length)));
        }
        if !(self.energy > 0.0 && self.energy.is_finite()) {
            return Err(Error::Invalid(format!("prong energy {}", self.energy)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prong {
    pub map: SparsePixelMap,
    pub truth: ProngTruth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub label: EventClass,
    pub event_map: SparsePixelMap,
    pub prongs: Vec<Prong>,
}

impl Event {
    pub fn num_prongs(&self) -> usize {
        self.prongs.len()
    }

    pub fn prong_labels(&self) -> Vec<ProngClass> {
        self.prongs.iter().map(|p| p.truth.label).collect()
    }

    /// Checks the prong cap, truth geometry, extents and that every prong
    /// hit is also present in the event map.
    pub fn validate(&self) -> Result<()> {
        if self.prongs.len() > MAX_PRONGS {
            return Err(Error::Invalid(format!("{} prongs (max {MAX_PRONGS})", self.prongs.len())));
        }
        let (w, h) = (self.event_map.planes(), self.event_map.cells());
        for (i, p) in self.prongs.iter().enumerate() {
            if (p.map.planes(), p.map.cells()) != (w, h) {
                return Err(Error::Shape(format!("prong {i} extents differ from the event map")));
            }
            p.truth.validate(w, h)?;
            for v in View::BOTH {
                if let Some(hit) = p.map.hits(v).iter().find(|x| !self.event_map.contains(v, x.plane, x.cell)) {
                    return Err(Error::Invalid(format!(
                        "prong {i} hit ({}, {}) missing from the event map",
                        hit.plane, hit.cell
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Keeps the ten highest-energy prongs; ties at the boundary keep the lower
/// index. Surviving prongs retain their original relative order.
pub fn cap_prongs(mut event: Event) -> Event {
    if event.prongs.len() <= MAX_PRONGS {
        return event;
    }
    let mut order: Vec<usize> = (0..event.prongs.len()).collect();
    order.sort_by(|&a, &b| {
        event.prongs[b]
            .truth
            .energy
            .total_cmp(&event.prongs[a].truth.energy)
            .then(a.cmp(&b))
    });
    let mut keep = vec![false; event.prongs.len()];
    for &i in &order[..MAX_PRONGS] {
        keep[i] = true;
    }
    let mut i = 0;
    event.prongs.retain(|_| {
        let k = keep[i];
        i += 1;
        k
    });
    event
}
