//! Full evaluation report over one label set: metrics, both confusion
//! normalizations, ROC points and score histograms.

use serde::{Deserialize, Serialize};

use super::metrics::{metrics, roc, signal_background_hist, ConfusionMatrix, Metrics, Normalization, ScoreHistogram};
use crate::datagen::Event;
use crate::error::{Error, Result};
use crate::model::{argmax, collapse_event, collapse_prong, EventFlavor, ProngClass, ProngKind};

/// Class probabilities of one event, without attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventScores {
    pub event_probs: Vec<f64>,
    pub prong_probs: Vec<Vec<f64>>,
}

impl From<&crate::model::Prediction> for EventScores {
    fn from(p: &crate::model::Prediction) -> Self {
        Self {
            event_probs: p.event_probs.clone(),
            prong_probs: p.prong_probs.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSetReport {
    pub labels: Vec<String>,
    pub metrics: Metrics,
    pub confusion: ConfusionMatrix,
    pub efficiency: Vec<Vec<f64>>,
    pub purity: Vec<Vec<f64>>,
    pub roc: Vec<Vec<(f64, f64)>>,
    pub histograms: Vec<ScoreHistogram>,
}

pub fn label_set_report(labels: Vec<String>, scores: &[Vec<f64>], truths: &[usize], bins: usize) -> Result<LabelSetReport> {
    let k = labels.len();
    let m = metrics(scores, truths, k)?;
    let preds: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
    let confusion = ConfusionMatrix::new(&preds, truths, k)?;
    let histograms = if scores.is_empty() {
        Vec::new()
    } else {
        (0..k)
            .map(|c| signal_background_hist(scores, truths, c, bins))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(LabelSetReport {
        efficiency: confusion.normalized(Normalization::Efficiency),
        purity: confusion.normalized(Normalization::Purity),
        roc: (0..k).map(|c| roc(scores, truths, c)).collect(),
        histograms,
        labels,
        metrics: m,
        confusion,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub events: usize,
    pub event: LabelSetReport,
    pub prong: LabelSetReport,
    pub prong_fine: LabelSetReport,
    /// Prongs left out of the five-class set (OP/CB truth, or no mass on
    /// the five classes).
    pub prongs_excluded: usize,
}

pub fn evaluation_report(scores: &[EventScores], events: &[Event], bins: usize) -> Result<EvaluationReport> {
    if scores.len() != events.len() {
        return Err(Error::Shape(format!("{} predictions for {} events", scores.len(), events.len())));
    }
    let (mut ev_s, mut ev_t) = (Vec::new(), Vec::new());
    let (mut p5_s, mut p5_t, mut p9_s, mut p9_t) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut excluded = 0;
    for (s, e) in scores.iter().zip(events) {
        if s.prong_probs.len() != e.prongs.len() {
            return Err(Error::Shape(format!(
                "{} prong predictions for an event with {} prongs",
                s.prong_probs.len(),
                e.prongs.len()
            )));
        }
        ev_s.push(collapse_event(&s.event_probs)?.to_vec());
        ev_t.push(e.label.flavor().index());
        for (pp, prong) in s.prong_probs.iter().zip(&e.prongs) {
            if pp.len() != ProngClass::COUNT {
                return Err(Error::Shape(format!("prong scores of length {}", pp.len())));
            }
            p9_s.push(pp.clone());
            p9_t.push(prong.truth.label.index());
            match (prong.truth.label.kind(), collapse_prong(pp)?) {
                (Some(kind), Some(c)) => {
                    p5_s.push(c.to_vec());
                    p5_t.push(kind.index());
                }
                _ => excluded += 1,
            }
        }
    }
    let names = |it: &mut dyn Iterator<Item = &'static str>| it.map(String::from).collect::<Vec<_>>();
    Ok(EvaluationReport {
        events: events.len(),
        event: label_set_report(names(&mut EventFlavor::ALL.iter().map(|f| f.name())), &ev_s, &ev_t, bins)?,
        prong: label_set_report(names(&mut ProngKind::ALL.iter().map(|k| k.name())), &p5_s, &p5_t, bins)?,
        prong_fine: label_set_report(names(&mut ProngClass::ALL.iter().map(|c| c.name())), &p9_s, &p9_t, bins)?,
        prongs_excluded: excluded,
    })
}
