//! Command implementations behind the `tcvn` binary.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use tcvn::datagen::{build_dataset, Event, Generator, Split};
use tcvn::interpret::{
    aggregate_attention_by_type, aggregate_attention_per_prong, center_column, evaluation_report, event_attention_rows,
    integrate_saliency, profile_peak, prong_saliencies, saliency_grid_all, saliency_grid_matched, typed_attention,
    AggregatedAttention, EvaluationReport, EventScores, SaliencyGrid, Weighting, LOG_CLAMP,
};
use tcvn::io::{
    read_predictions, read_split, write_dataset_dir, write_json, write_metrics, write_predictions, Checkpoint, Document,
    RunConfig, RunPaths, Section, REPORT_SCHEMA,
};
use tcvn::model::{predict, train_epoch, EpochMetrics, ProngKind, TrainState, TransformerCvn};

/// Analyses available to `interpret`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Analysis {
    Attention,
    AttentionPerProng,
    EventAttention,
    SaliencyGrid,
    SaliencyGridMatched,
    Integrated,
    IntegratedGaussian,
}

impl Analysis {
    pub const ALL: [Analysis; 7] = [
        Analysis::Attention,
        Analysis::AttentionPerProng,
        Analysis::EventAttention,
        Analysis::SaliencyGrid,
        Analysis::SaliencyGridMatched,
        Analysis::Integrated,
        Analysis::IntegratedGaussian,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Analysis::Attention => "attention",
            Analysis::AttentionPerProng => "attention-per-prong",
            Analysis::EventAttention => "event-attention",
            Analysis::SaliencyGrid => "saliency-grid",
            Analysis::SaliencyGridMatched => "saliency-grid-matched",
            Analysis::Integrated => "integrated",
            Analysis::IntegratedGaussian => "integrated-gaussian",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .with_context(|| format!("unknown analysis {s:?}"))
    }
}

/// Command-line overrides applied on top of the configuration file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

/// Generates the dataset. `--seed` sets the data seed and `--output` the
/// dataset directory.
pub fn cmd_generate(config: &RunConfig, ov: &Overrides) -> Result<PathBuf> {
    let mut data = config.data.clone();
    if let Some(s) = ov.seed {
        data.seed = s;
    }
    let dir = ov.output.clone().unwrap_or_else(|| config.dataset.clone());
    let (dataset, manifest) = build_dataset(&data, &Generator::default())?;
    write_dataset_dir(&dir, &dataset, &manifest)?;
    Ok(dir)
}

fn run_seed(config: &RunConfig, ov: &Overrides) -> u64 {
    ov.seed.unwrap_or(config.seed)
}

fn out_dir(config: &RunConfig, ov: &Overrides) -> PathBuf {
    ov.output.clone().unwrap_or_else(|| config.output.clone())
}

/// Trains until `train.epochs` epochs are complete, starting from
/// `resume` when given. A checkpoint and the metrics log are rewritten
/// atomically after every epoch. `progress` sees each epoch's metrics.
pub fn cmd_train(
    config: &RunConfig,
    ov: &Overrides,
    resume: Option<&Path>,
    mut progress: impl FnMut(&EpochMetrics),
) -> Result<TrainState> {
    config.check_dataset()?;
    let seed = run_seed(config, ov);
    let paths = RunPaths::new(out_dir(config, ov));
    let model = TransformerCvn::new(config.model.clone())?;
    let hash = config.config_hash();
    let mut state = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            if ck.config_hash != hash || ck.model != config.model {
                bail!("checkpoint {} was written with a different configuration", p.display());
            }
            ck.state
        }
        None => TrainState::new(model.init_params(seed)?),
    };
    let train = read_split(&config.dataset, Split::Train)?;
    let val = read_split(&config.dataset, Split::Val)?;
    while state.epoch < config.train.epochs {
        let m = train_epoch(&model, &mut state, &train, Some(&val), &config.train, seed)?;
        Checkpoint {
            config_hash: hash.clone(),
            model: config.model.clone(),
            state: state.clone(),
        }
        .save(&paths.checkpoint())?;
        write_metrics(&paths.metrics(), &state.history)?;
        progress(&m);
    }
    Ok(state)
}

fn load_model(checkpoint: &Path) -> Result<(TransformerCvn, Checkpoint)> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    Ok((TransformerCvn::new(ck.model.clone())?, ck))
}

fn limited(config: &RunConfig, mut events: Vec<Event>) -> Vec<Event> {
    if config.interpret.max_events > 0 {
        events.truncate(config.interpret.max_events);
    }
    events
}

/// Scores `split` with a checkpoint, or reads precomputed scores from
/// `predictions`, and writes the report (and, when scoring, the
/// predictions) to the output directory.
pub fn cmd_evaluate(
    config: &RunConfig,
    ov: &Overrides,
    checkpoint: Option<&Path>,
    predictions: Option<&Path>,
    split: Split,
) -> Result<EvaluationReport> {
    config.check_dataset()?;
    let paths = RunPaths::new(out_dir(config, ov));
    let events = read_split(&config.dataset, split)?;
    let scores: Vec<EventScores> = match (predictions, checkpoint) {
        (Some(p), _) => read_predictions(p)?,
        (None, Some(c)) => {
            let (model, ck) = load_model(c)?;
            let preds = predict(&model, &ck.state.params, &events, config.train.chunk_size)?;
            let s: Vec<EventScores> = preds.iter().map(EventScores::from).collect();
            write_predictions(&paths.predictions(split), &s)?;
            s
        }
        (None, None) => bail!("evaluate needs --checkpoint or --predictions"),
    };
    let report = evaluation_report(&scores, &events, config.interpret.histogram_bins)?;
    write_json(&paths.report(split), REPORT_SCHEMA, &report)?;
    Ok(report)
}

fn attention_section(name: &str, agg: &AggregatedAttention) -> Section {
    let mut header = vec!["row".to_string()];
    header.extend(agg.cols.iter().cloned());
    let mut s = Section::new(name, header);
    for (r, label) in agg.rows.iter().enumerate() {
        s.push(label.clone(), agg.values[r].clone());
    }
    s
}

fn count_section(name: &str, agg: &AggregatedAttention) -> Section {
    let mut header = vec!["row".to_string()];
    header.extend(agg.cols.iter().cloned());
    let mut s = Section::new(name, header);
    for (r, label) in agg.rows.iter().enumerate() {
        s.push(label.clone(), agg.counts[r].iter().map(|&c| Some(c as f64)).collect());
    }
    s
}

fn grid_sections(doc: &mut Document, grid: &SaliencyGrid) {
    let mut header = vec!["row".to_string()];
    header.extend(grid.labels.iter().cloned());
    let mut status = Section::new("entries", header.clone());
    for (a, label) in grid.labels.iter().enumerate() {
        status.push(
            label.clone(),
            grid.entries[a].iter().map(|e| e.as_ref().map(|_| 1.0)).collect(),
        );
    }
    doc.sections.push(status);
    let mut counts = Section::new("counts", vec!["row".into(), "prongs".into()]);
    for (a, label) in grid.labels.iter().enumerate() {
        counts.push(label.clone(), vec![Some(grid.counts[a] as f64)]);
    }
    doc.sections.push(counts);
    for (a, la) in grid.labels.iter().enumerate() {
        for (b, lb) in grid.labels.iter().enumerate() {
            let Some(map) = &grid.entries[a][b] else { continue };
            let cc = center_column(map.cells) as i64;
            for (v, view) in ["x", "y"].iter().enumerate() {
                let mut h = vec!["distance_px".to_string()];
                h.extend((0..map.cells as i64).map(|c| (c - cc).to_string()));
                let mut s = Section::new(format!("{la}/{lb}/{view}"), h);
                for r in 0..map.planes {
                    s.push(r.to_string(), (0..map.cells).map(|c| Some(map.at(v, r, c))).collect());
                }
                doc.sections.push(s);
            }
        }
    }
}

/// Runs one analysis on `split` and writes its output file.
pub fn cmd_interpret(
    config: &RunConfig,
    ov: &Overrides,
    checkpoint: &Path,
    split: Split,
    which: Analysis,
) -> Result<(PathBuf, Document)> {
    config.check_dataset()?;
    let seed = run_seed(config, ov);
    let paths = RunPaths::new(out_dir(config, ov));
    let (model, ck) = load_model(checkpoint)?;
    let events = limited(config, read_split(&config.dataset, split)?);
    let ic = &config.interpret;
    let mut doc = Document::default();
    doc.meta("analysis", which.name())
        .meta("split", split.name())
        .meta("events", events.len());

    match which {
        Analysis::Attention | Analysis::AttentionPerProng | Analysis::EventAttention => {
            let typed = typed_attention(&model, &ck.state.params, &events, config.train.chunk_size)?;
            doc.meta("log_clamp", LOG_CLAMP)
                .meta("head_reduction", "mean")
                .meta("self_attention", "included");
            let agg = match which {
                Analysis::Attention => aggregate_attention_by_type(&typed),
                Analysis::AttentionPerProng => aggregate_attention_per_prong(&typed),
                _ => event_attention_rows(&typed),
            };
            doc.sections.push(attention_section("log_attention", &agg));
            doc.sections.push(count_section("events", &agg));
            if which == Analysis::Attention {
                for (i, t) in typed.iter().enumerate() {
                    let labels: Vec<String> = t
                        .types
                        .iter()
                        .enumerate()
                        .map(|(k, &ty)| format!("{k}:{}", tcvn::interpret::type_name(ty)))
                        .collect();
                    let mut header = vec!["row".to_string()];
                    header.extend(labels.iter().cloned());
                    let mut s = Section::new(format!("event {i}"), header);
                    for (r, l) in labels.iter().enumerate() {
                        s.push(l.clone(), t.matrix.row(r).iter().map(|&x| Some(x)).collect());
                    }
                    doc.sections.push(s);
                }
            }
        }
        _ => {
            let sm = &ic.smoothing;
            doc.meta("output", if ic.logits { "logit" } else { "probability" })
                .meta("noise", sm.noise)
                .meta("blur_sigma", sm.blur_sigma)
                .meta("samples", sm.samples)
                .meta("max_track_length", ic.cuts.max_track_length)
                .meta("max_energy", ic.cuts.max_energy)
                .meta("interpolation", "bilinear")
                .meta("seed", seed);
            let prongs = prong_saliencies(&model, &ck.state.params, &events, &ic.cuts, sm, ic.logits, seed)?;
            match which {
                Analysis::SaliencyGrid => grid_sections(&mut doc, &saliency_grid_all(&prongs)?),
                Analysis::SaliencyGridMatched => grid_sections(&mut doc, &saliency_grid_matched(&prongs)?),
                _ => {
                    let weighting = if which == Analysis::Integrated {
                        Weighting::Flat
                    } else {
                        doc.meta("gaussian_width", ic.gaussian_width);
                        Weighting::Gaussian(ic.gaussian_width)
                    };
                    let grid = saliency_grid_matched(&prongs)?;
                    let mut peaks = Section::new("peaks", vec!["row".into(), "prongs".into(), "peak_px".into()]);
                    let mut profiles = Vec::new();
                    for k in ProngKind::ALL {
                        let profile = grid.get(k, k).map(|m| integrate_saliency(m, weighting));
                        peaks.push(
                            k.name(),
                            vec![
                                Some(grid.counts[k.index()] as f64),
                                profile.as_deref().and_then(profile_peak).map(|p| p as f64),
                            ],
                        );
                        if let Some(p) = profile {
                            profiles.push(Section::profile(k.name(), &p));
                        }
                    }
                    doc.sections.push(peaks);
                    doc.sections.extend(profiles);
                }
            }
        }
    }
    let path = paths.analysis(which.name(), split);
    doc.write(&path)?;
    Ok((path, doc))
}
