//! Attention aggregation, saliency analysis and evaluation metrics.

pub mod align;
pub mod attention;
pub mod metrics;
pub mod report;
pub mod saliency;

pub use align::{
    aggregate_saliency, align_saliency, center_column, difference_map, integrate_saliency, mean_map, profile_peak,
    saliency_grid_all, saliency_grid_matched, Cuts, ProngSaliency, SaliencyAggregate, SaliencyGrid, Weighting,
    GAUSSIAN_WIDTH,
};
pub use attention::{
    aggregate_attention_by_type, aggregate_attention_per_prong, attention_product, event_attention_rows, row_types,
    type_index, type_name, AggregatedAttention, TypedAttention, LOG_CLAMP, NUM_TYPES, STOCHASTIC_TOL,
};
pub use metrics::{auc, metrics, roc, signal_background_hist, ConfusionMatrix, Metrics, Normalization, ScoreHistogram};
pub use report::{evaluation_report, label_set_report, EvaluationReport, EventScores, LabelSetReport};
pub use saliency::{
    dense_input, gaussian_blur, gaussian_kernel, saliency, smoothed_saliency, LinearSurrogate, ModelProbe,
    SaliencyMap, SaliencyModel, SmoothingConfig,
};

use crate::datagen::Event;
use crate::error::Result;
use crate::model::TransformerCvn;
use crate::params::ParamStore;
use crate::par;

/// Smoothed, aligned saliency of every prong of `events` that passes
/// `cuts`. Prongs are processed in (event, prong) order; the smoothing
/// seed of each is derived from `seed` and its position.
pub fn prong_saliencies(
    model: &TransformerCvn,
    store: &ParamStore,
    events: &[Event],
    cuts: &Cuts,
    smoothing: &SmoothingConfig,
    logits: bool,
    seed: u64,
) -> Result<Vec<ProngSaliency>> {
    let mut jobs = Vec::new();
    for (e, ev) in events.iter().enumerate() {
        for (p, prong) in ev.prongs.iter().enumerate() {
            if cuts.passes(&prong.truth) {
                jobs.push((e, p));
            }
        }
    }
    // Samples inside one prong already run in parallel; prongs run in order.
    let mut out = Vec::with_capacity(jobs.len());
    for (e, p) in jobs {
        let ev = &events[e];
        let probe = ModelProbe::prong_outputs(model, store, ev, p, logits);
        let s = crate::datagen::event_seed(seed, e as u64, p as u64);
        let maps = smoothed_saliency(&probe, &ev.prongs[p].map, smoothing, s)?;
        let aligned = par::map(&maps, |m| align_saliency(m, &ev.prongs[p].truth))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        out.push(ProngSaliency {
            label: ev.prongs[p].truth.label,
            maps: aligned,
        });
    }
    Ok(out)
}

/// Attention products of every event with their row types.
pub fn typed_attention(model: &TransformerCvn, store: &ParamStore, events: &[Event], chunk: usize) -> Result<Vec<TypedAttention>> {
    let preds = crate::model::predict(model, store, events, chunk)?;
    preds
        .iter()
        .zip(events)
        .map(|(p, e)| TypedAttention::from_event(e, &p.attention))
        .collect()
}
