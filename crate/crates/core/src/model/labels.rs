//! Event and prong label taxonomies and the collapse rules used for
//! evaluation.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Fine-grained event interaction label (10 classes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventClass {
    NumuCcQe,
    NumuCcRes,
    NumuCcDis,
    NumuCcOther,
    NueCcQe,
    NueCcRes,
    NueCcDis,
    NueCcOther,
    Nc,
    Cosmic,
}

/// Collapsed event class used for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventFlavor {
    Numu,
    Nue,
    Nc,
    Cosmic,
}

/// CC interaction subtype.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Interaction {
    Qe,
    Res,
    Dis,
    Other,
}

impl EventClass {
    pub const COUNT: usize = 10;
    pub const ALL: [EventClass; 10] = [
        EventClass::NumuCcQe,
        EventClass::NumuCcRes,
        EventClass::NumuCcDis,
        EventClass::NumuCcOther,
        EventClass::NueCcQe,
        EventClass::NueCcRes,
        EventClass::NueCcDis,
        EventClass::NueCcOther,
        EventClass::Nc,
        EventClass::Cosmic,
    ];
    const NAMES: [&'static str; 10] = [
        "numu_cc_qe",
        "numu_cc_res",
        "numu_cc_dis",
        "numu_cc_other",
        "nue_cc_qe",
        "nue_cc_res",
        "nue_cc_dis",
        "nue_cc_other",
        "nc",
        "cb",
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("event class index {i}")))
    }

    pub fn name(self) -> &'static str {
        Self::NAMES[self.index()]
    }

    pub fn flavor(self) -> EventFlavor {
        match self.index() {
            0..=3 => EventFlavor::Numu,
            4..=7 => EventFlavor::Nue,
            8 => EventFlavor::Nc,
            _ => EventFlavor::Cosmic,
        }
    }

    pub fn interaction(self) -> Option<Interaction> {
        match self.index() {
            0 | 4 => Some(Interaction::Qe),
            1 | 5 => Some(Interaction::Res),
            2 | 6 => Some(Interaction::Dis),
            3 | 7 => Some(Interaction::Other),
            _ => None,
        }
    }

    pub fn cc(flavor: EventFlavor, interaction: Interaction) -> Result<Self> {
        let base = match flavor {
            EventFlavor::Numu => 0,
            EventFlavor::Nue => 4,
            other => return Err(Error::Invalid(format!("{other:?} has no CC subtype"))),
        };
        let off = match interaction {
            Interaction::Qe => 0,
            Interaction::Res => 1,
            Interaction::Dis => 2,
            Interaction::Other => 3,
        };
        Self::from_index(base + off)
    }
}

impl EventFlavor {
    pub const COUNT: usize = 4;
    pub const ALL: [EventFlavor; 4] = [
        EventFlavor::Numu,
        EventFlavor::Nue,
        EventFlavor::Nc,
        EventFlavor::Cosmic,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["numu", "nue", "nc", "cb"][self.index()]
    }
}

/// Fine-grained prong label (9 classes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ProngClass {
    Electron,
    Muon,
    Proton,
    PhotonNeutron,
    Pion,
    PhotonPi0,
    PhotonOther,
    Other,
    Cosmic,
}

/// Five-class prong label used for comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ProngKind {
    Electron,
    Muon,
    Proton,
    Photon,
    Pion,
}

impl ProngClass {
    pub const COUNT: usize = 9;
    pub const ALL: [ProngClass; 9] = [
        ProngClass::Electron,
        ProngClass::Muon,
        ProngClass::Proton,
        ProngClass::PhotonNeutron,
        ProngClass::Pion,
        ProngClass::PhotonPi0,
        ProngClass::PhotonOther,
        ProngClass::Other,
        ProngClass::Cosmic,
    ];
    const NAMES: [&'static str; 9] = [
        "e",
        "mu",
        "p",
        "gamma_n",
        "pi",
        "gamma_pi0",
        "gamma_other",
        "op",
        "cb",
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("prong class index {i}")))
    }

    pub fn name(self) -> &'static str {
        Self::NAMES[self.index()]
    }

    pub fn is_photon(self) -> bool {
        matches!(
            self,
            ProngClass::PhotonNeutron | ProngClass::PhotonPi0 | ProngClass::PhotonOther
        )
    }

    /// Five-class label, or `None` for OP and CB.
    pub fn kind(self) -> Option<ProngKind> {
        match self {
            ProngClass::Electron => Some(ProngKind::Electron),
            ProngClass::Muon => Some(ProngKind::Muon),
            ProngClass::Proton => Some(ProngKind::Proton),
            ProngClass::Pion => Some(ProngKind::Pion),
            c if c.is_photon() => Some(ProngKind::Photon),
            _ => None,
        }
    }
}

impl ProngKind {
    pub const COUNT: usize = 5;
    pub const ALL: [ProngKind; 5] = [
        ProngKind::Electron,
        ProngKind::Muon,
        ProngKind::Proton,
        ProngKind::Photon,
        ProngKind::Pion,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["e", "mu", "p", "gamma", "pi"][self.index()]
    }
}

macro_rules! name_impls {
    ($t:ty, $what:literal) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $t {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|c| c.name() == s)
                    .ok_or_else(|| Error::Format(format!(concat!("unknown ", $what, " `{}`"), s)))
            }
        }
    };
}

name_impls!(EventClass, "event label");
name_impls!(EventFlavor, "event flavor");
name_impls!(ProngClass, "prong label");
name_impls!(ProngKind, "prong kind");

/// Sums the four CC subtypes of each flavour; output order νμ, νe, NC, CB.
pub fn collapse_event(probs: &[f64]) -> Result<[f64; 4]> {
    if probs.len() != EventClass::COUNT {
        return Err(Error::Shape(format!("collapse_event: {} probabilities", probs.len())));
    }
    let mut out = [0.0; 4];
    for (i, p) in probs.iter().enumerate() {
        out[EventClass::ALL[i].flavor().index()] += p;
    }
    Ok(out)
}

/// Mass on the five comparison classes below which the collapsed prong
/// distribution is undefined.
pub const PRONG_RENORM_MIN: f64 = 1e-9;

/// Merges the photon subtypes, drops OP/CB and renormalises over
/// {e, μ, p, γ, π±}. Returns `Ok(None)` when the retained mass is ≤ 1e-9.
pub fn collapse_prong(probs: &[f64]) -> Result<Option<[f64; 5]>> {
    if probs.len() != ProngClass::COUNT {
        return Err(Error::Shape(format!("collapse_prong: {} probabilities", probs.len())));
    }
    let mut out = [0.0; 5];
    for (i, p) in probs.iter().enumerate() {
        if let Some(k) = ProngClass::ALL[i].kind() {
            out[k.index()] += p;
        }
    }
    let mass: f64 = out.iter().sum();
    if mass <= PRONG_RENORM_MIN {
        return Ok(None);
    }
    out.iter_mut().for_each(|p| *p /= mass);
    Ok(Some(out))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_event_collapse() {
        let out = collapse_event(&[0.1; 10]).unwrap();
        let expect = [0.4, 0.4, 0.1, 0.1];
        for (a, b) in out.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn photon_mass_collapses_to_gamma() {
        let mut p = [0.0; 9];
        p[ProngClass::PhotonPi0.index()] = 1.0;
        assert_eq!(collapse_prong(&p).unwrap(), Some([0.0, 0.0, 0.0, 1.0, 0.0]));
    }

    #[test]
    fn hand_computed_prong_collapse() {
        let p = [0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.2, 0.1];
        let out = collapse_prong(&p).unwrap().unwrap();
        let expect = [1.0 / 7.0, 1.0 / 7.0, 1.0 / 7.0, 3.0 / 7.0, 1.0 / 7.0];
        for (a, b) in out.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{out:?}");
        }
    }

    #[test]
    fn dropped_mass_only_is_undefined() {
        let mut p = [0.0; 9];
        p[ProngClass::Other.index()] = 0.5;
        p[ProngClass::Cosmic.index()] = 0.5;
        assert_eq!(collapse_prong(&p).unwrap(), None);
    }

    #[test]
    fn names_round_trip() {
        for c in EventClass::ALL {
            assert_eq!(c.name().parse::<EventClass>().unwrap(), c);
        }
        for c in ProngClass::ALL {
            assert_eq!(c.name().parse::<ProngClass>().unwrap(), c);
        }
        assert!("tau".parse::<ProngClass>().is_err());
    }

    #[test]
    fn every_fine_label_collapses() {
        let flavors: Vec<_> = EventClass::ALL.iter().map(|c| c.flavor()).collect();
        assert_eq!(flavors.iter().filter(|f| **f == EventFlavor::Numu).count(), 4);
        assert_eq!(flavors.iter().filter(|f| **f == EventFlavor::Nue).count(), 4);
        assert_eq!(ProngClass::ALL.iter().filter(|c| c.kind().is_none()).count(), 2);
    }
}
