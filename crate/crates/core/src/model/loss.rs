//! Focal loss and the joint event/prong aggregation, on plain values.
//!
//! The training graph uses the fused [`Graph::focal_loss`] node; these
//! functions evaluate the same formula from probabilities.
//!
//! [`Graph::focal_loss`]: crate::tensor::Graph::focal_loss

use crate::error::{Error, Result};

pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalLoss {
    pub value: f64,
    /// How many `p_t` values fell below 1e-12 and were clamped.
    pub clamped: usize,
}

/// Mean over rows of `-(1 - p_t)^γ · ln p_t`.
pub fn focal_loss(probs: &[Vec<f64>], targets: &[usize], gamma: f64) -> Result<FocalLoss> {
    if gamma < 0.0 {
        return Err(Error::Invalid(format!("focal gamma {gamma} < 0")));
    }
    if probs.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} probability rows for {} targets",
            probs.len(),
            targets.len()
        )));
    }
    if probs.is_empty() {
        return Ok(FocalLoss {
            value: 0.0,
            clamped: 0,
        });
    }
    let mut total = 0.0;
    let mut clamped = 0;
    for (row, &t) in probs.iter().zip(targets) {
        let mut pt = *row
            .get(t)
            .ok_or_else(|| Error::Invalid(format!("target {t} for {} classes", row.len())))?;
        if pt < PROB_CLAMP {
            pt = PROB_CLAMP;
            clamped += 1;
        }
        total += -(1.0 - pt).powf(gamma) * pt.ln();
    }
    Ok(FocalLoss {
        value: total / probs.len() as f64,
        clamped,
    })
}

/// Plain cross-entropy (focal loss at γ = 0), for comparisons.
pub fn cross_entropy(probs: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    let n = probs.len().max(1) as f64;
    let mut total = 0.0;
    for (row, &t) in probs.iter().zip(targets) {
        total -= row[t].max(PROB_CLAMP).ln();
    }
    Ok(total / n)
}

/// Equal-weight mean of the event term and every prong term.
pub fn joint_loss(event_loss: f64, prong_losses: &[f64]) -> f64 {
    (event_loss + prong_losses.iter().sum::<f64>()) / (1 + prong_losses.len()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_zero_is_cross_entropy() {
        let probs = vec![vec![0.2, 0.5, 0.3], vec![0.9, 0.05, 0.05], vec![0.1, 0.1, 0.8]];
        let t = [1, 0, 2];
        let f = focal_loss(&probs, &t, 0.0).unwrap().value;
        let ce = cross_entropy(&probs, &t).unwrap();
        assert!((f - ce).abs() < 1e-12);
    }

    #[test]
    fn confident_target_costs_nothing() {
        for gamma in [0.0, 0.5, 1.0, 2.0] {
            let f = focal_loss(&[vec![0.0, 1.0]], &[1], gamma).unwrap();
            assert_eq!(f.value, 0.0);
        }
    }

    #[test]
    fn half_probability_gamma_one() {
        let f = focal_loss(&[vec![0.5, 0.5]], &[0], 1.0).unwrap().value;
        assert!((f - 0.5 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!((f - 0.34657).abs() < 1e-5);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let f = focal_loss(&[vec![1.0, 0.0]], &[1], 1.0).unwrap();
        assert_eq!(f.clamped, 1);
        assert!((f.value - (-(1e-12f64).ln() * (1.0 - 1e-12))).abs() < 1e-9);
    }

    #[test]
    fn joint_loss_cases() {
        assert_eq!(joint_loss(0.7, &[]), 0.7);
        assert!((joint_loss(2.0, &[2.0, 2.0, 2.0]) - 2.0).abs() < 1e-15);
        assert!((joint_loss(1.0, &[2.0, 6.0]) - 3.0).abs() < 1e-15);
    }
}
