//! Classification metrics: confusion matrices, balanced precision/recall,
//! rank-statistic AUC, ROC points and score histograms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    None,
    /// Rows (truth labels) sum to one.
    Efficiency,
    /// Columns (predictions) sum to one.
    Purity,
}

/// `counts[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(predictions: &[usize], truths: &[usize], classes: usize) -> Result<Self> {
        if predictions.len() != truths.len() {
            return Err(Error::Shape(format!(
                "{} predictions for {} truths",
                predictions.len(),
                truths.len()
            )));
        }
        let mut counts = vec![vec![0; classes]; classes];
        for (&p, &t) in predictions.iter().zip(truths) {
            if p >= classes || t >= classes {
                return Err(Error::Invalid(format!("label ({t}, {p}) outside {classes} classes")));
            }
            counts[t][p] += 1;
        }
        Ok(Self { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// Normalized copy; empty rows or columns stay zero.
    pub fn normalized(&self, mode: Normalization) -> Vec<Vec<f64>> {
        let k = self.classes();
        let row_sums: Vec<usize> = self.counts.iter().map(|r| r.iter().sum()).collect();
        let col_sums: Vec<usize> = (0..k).map(|j| self.counts.iter().map(|r| r[j]).sum()).collect();
        (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| {
                        let c = self.counts[i][j] as f64;
                        let d = match mode {
                            Normalization::None => 1,
                            Normalization::Efficiency => row_sums[i],
                            Normalization::Purity => col_sums[j],
                        };
                        if d == 0 {
                            0.0
                        } else {
                            c / d as f64
                        }
                    })
                    .collect()
            })
            .collect()
    }

    pub fn accuracy(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            return 0.0;
        }
        (0..self.classes()).map(|i| self.counts[i][i]).sum::<usize>() as f64 / t as f64
    }
}

/// Probability that a random positive scores above a random negative,
/// ties counting one half. `None` when either side is empty.
pub fn auc(positives: &[f64], negatives: &[f64]) -> Option<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return None;
    }
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // midranks over tie groups
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += mid * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Aggregated metrics over one label set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub samples: usize,
    pub accuracy: f64,
    /// Mean over classes with at least one prediction.
    pub precision: f64,
    /// Mean over classes with at least one sample.
    pub recall: f64,
    /// Mean over class pairs of the symmetric one-vs-one AUC.
    pub auc: Option<f64>,
    /// One-vs-rest AUC of each class on its own score.
    pub class_auc: Vec<Option<f64>>,
    /// Class pairs without samples on both sides, excluded from `auc`.
    pub excluded_pairs: Vec<(usize, usize)>,
}

fn scores_for(scores: &[Vec<f64>], truths: &[usize], class: usize, score: usize) -> Vec<f64> {
    truths
        .iter()
        .zip(scores)
        .filter(|(&t, _)| t == class)
        .map(|(_, s)| s[score])
        .collect()
}

/// Predictions are the argmax of `scores`; `scores[i]` holds one value per
/// class.
pub fn metrics(scores: &[Vec<f64>], truths: &[usize], classes: usize) -> Result<Metrics> {
    if scores.len() != truths.len() {
        return Err(Error::Shape(format!("{} score rows for {} truths", scores.len(), truths.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.len() != classes) {
        return Err(Error::Shape(format!("score row of length {} for {classes} classes", s.len())));
    }
    let preds: Vec<usize> = scores.iter().map(|s| crate::model::argmax(s)).collect();
    let cm = ConfusionMatrix::new(&preds, truths, classes)?;
    let eff = cm.normalized(Normalization::Efficiency);
    let pur = cm.normalized(Normalization::Purity);
    let mean_over = |m: &Vec<Vec<f64>>, keep: &dyn Fn(usize) -> bool| {
        let idx: Vec<usize> = (0..classes).filter(|&i| keep(i)).collect();
        if idx.is_empty() {
            0.0
        } else {
            idx.iter().map(|&i| m[i][i]).sum::<f64>() / idx.len() as f64
        }
    };
    let has_truth = |i: usize| cm.counts[i].iter().sum::<usize>() > 0;
    let has_pred = |j: usize| cm.counts.iter().map(|r| r[j]).sum::<usize>() > 0;

    let mut pair_aucs = Vec::new();
    let mut excluded = Vec::new();
    for a in 0..classes {
        for b in a + 1..classes {
            let ab = auc(&scores_for(scores, truths, a, a), &scores_for(scores, truths, b, a));
            let ba = auc(&scores_for(scores, truths, b, b), &scores_for(scores, truths, a, b));
            match (ab, ba) {
                (Some(x), Some(y)) => pair_aucs.push((x + y) / 2.0),
                _ => excluded.push((a, b)),
            }
        }
    }
    let class_auc = (0..classes)
        .map(|c| {
            let (pos, neg): (Vec<(usize, f64)>, Vec<(usize, f64)>) =
                truths.iter().zip(scores).map(|(&t, s)| (t, s[c])).partition(|(t, _)| *t == c);
            let pos: Vec<f64> = pos.into_iter().map(|x| x.1).collect();
            let neg: Vec<f64> = neg.into_iter().map(|x| x.1).collect();
            auc(&pos, &neg)
        })
        .collect();
    Ok(Metrics {
        samples: truths.len(),
        accuracy: cm.accuracy(),
        precision: mean_over(&pur, &has_pred),
        recall: mean_over(&eff, &has_truth),
        auc: if pair_aucs.is_empty() {
            None
        } else {
            Some(pair_aucs.iter().sum::<f64>() / pair_aucs.len() as f64)
        },
        class_auc,
        excluded_pairs: excluded,
    })
}

/// One-vs-rest ROC curve of `class`: `(false positive rate, true positive
/// rate)` at every distinct score threshold, from (0, 0) to (1, 1).
pub fn roc(scores: &[Vec<f64>], truths: &[usize], class: usize) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, bool)> = scores.iter().zip(truths).map(|(s, &t)| (s[class], t == class)).collect();
    let np = pts.iter().filter(|p| p.1).count() as f64;
    let nn = pts.len() as f64 - np;
    pts.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let rate = |x: f64, n: f64| if n == 0.0 { 0.0 } else { x / n };
    for (i, &(s, pos)) in pts.iter().enumerate() {
        if pos {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        if i + 1 == pts.len() || pts[i + 1].0 != s {
            out.push((rate(fp, nn), rate(tp, np)));
        }
    }
    out
}

/// Counts of one class's score, binned on [0, 1] and split by truth label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub class: usize,
    pub edges: Vec<f64>,
    /// `counts[truth][bin]`.
    pub counts: Vec<Vec<usize>>,
}

impl ScoreHistogram {
    pub fn signal(&self) -> &[usize] {
        &self.counts[self.class]
    }

    /// Background entries: every truth label except the class itself.
    pub fn background(&self) -> Vec<usize> {
        let bins = self.edges.len() - 1;
        (0..bins)
            .map(|b| {
                self.counts
                    .iter()
                    .enumerate()
                    .filter(|(t, _)| *t != self.class)
                    .map(|(_, c)| c[b])
                    .sum()
            })
            .collect()
    }

    /// (signal, background) entries in bins starting at or above `threshold`.
    pub fn above(&self, threshold: f64) -> (usize, usize) {
        let bg = self.background();
        let mut s = (0, 0);
        for b in 0..self.edges.len() - 1 {
            if self.edges[b] >= threshold - 1e-12 {
                s.0 += self.signal()[b];
                s.1 += bg[b];
            }
        }
        s
    }
}

pub fn signal_background_hist(scores: &[Vec<f64>], truths: &[usize], class: usize, bins: usize) -> Result<ScoreHistogram> {
    if bins == 0 {
        return Err(Error::Invalid("histogram needs at least one bin".into()));
    }
    let classes = scores.first().map_or(class + 1, |s| s.len());
    if class >= classes {
        return Err(Error::Invalid(format!("class {class} outside {classes} scores")));
    }
    let mut counts = vec![vec![0; bins]; classes];
    for (s, &t) in scores.iter().zip(truths) {
        if t >= classes {
            return Err(Error::Invalid(format!("truth label {t} outside {classes} classes")));
        }
        let b = ((s[class] * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        counts[t][b] += 1;
    }
    Ok(ScoreHistogram {
        class,
        edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
        counts,
    })
}
