//! Central finite-difference verification of graph gradients.

use super::{Graph, Var};
use crate::error::Result;
use crate::params::ParamStore;

/// Absolute differences are measured relative to `max(|a|, |b|, FLOOR)` so
/// that gradients near zero are not judged on pure round-off.
pub const RELATIVE_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_relative_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() < self.tolerance
    }
}

/// Compares backward gradients of the scalar built by `build` against
/// central differences with step `eps`, for every entry of every parameter
/// (or at most `max_per_param` evenly spaced entries when given).
pub fn check_gradients<F>(
    params: &ParamStore,
    build: F,
    eps: f64,
    tolerance: f64,
    max_per_param: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    g.check_finite()?;
    let grads = g.backward(loss)?.by_name();

    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = build(&mut g, p)?;
        Ok(g.value(l).item())
    };

    let mut entries = Vec::new();
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name).map_or(0, |t| t.len());
        let analytic = grads.get(&name).map(|t| t.data().to_vec());
        let picks: Vec<usize> = match max_per_param {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for &i in &picks {
            let orig = params.get(&name).unwrap().data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.as_ref().map_or(0.0, |v| v[i]);
            worst = worst.max(relative_error(a, numeric));
        }
        entries.push(GradCheckEntry {
            name,
            checked: picks.len(),
            max_relative_error: worst,
        });
    }
    Ok(GradCheckReport { tolerance, entries })
}
