//! Stage functions shared by the command-line tool and the tests.

use std::path::Path;

use thiserror::Error;

use crate::adapt::{adapt_with_restart, predict_with_trend, AdaptError, AdaptResult};
use crate::config::RunConfig;
use crate::metrics::{compute_metrics, split_metrics, LatentMetrics, MetricsError, MetricsReport, SplitInput};
use crate::model::{GaussianPrediction, ModelError};
use crate::synth::{generate, read_dataset, train_test_split, DataError, Dataset, Sample};
use crate::train::{pretrain_feature_extractor, train_with_hook, TrainError, TrainReport, TrainedModel};
use crate::trend::TrendError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Trend(#[from] TrendError),
    #[error("sequence `{id}` has {got} samples, adaptation needs more than {need}")]
    ShortSequence { id: String, need: usize, got: usize },
    #[error("no held-out sequences to adapt to")]
    NoHeldOut,
}

pub fn generate_dataset(cfg: &RunConfig) -> Result<Dataset, DataError> {
    let specs = cfg.env_specs();
    let n = cfg.data.n_sequences.unwrap_or(specs.len());
    generate(&specs, n, cfg.seed, &cfg.generator)
}

/// Configured held-out ids, or every sequence whose environment is marked
/// held out.
pub fn held_out_ids(cfg: &RunConfig, dataset: &Dataset) -> Vec<String> {
    if let Some(ids) = &cfg.data.held_out {
        return ids.clone();
    }
    let held: Vec<String> = cfg
        .env_specs()
        .into_iter()
        .filter(|s| s.held_out)
        .map(|s| s.name)
        .collect();
    dataset
        .sequences
        .iter()
        .filter(|s| held.contains(&s.env))
        .map(|s| s.id.clone())
        .collect()
}

/// `(train, held_out)`.
pub fn split(cfg: &RunConfig, dataset: &Dataset) -> Result<(Dataset, Dataset), DataError> {
    dataset.validate()?;
    train_test_split(dataset, &held_out_ids(cfg, dataset))
}

pub fn load_split(cfg: &RunConfig, data: &Path) -> Result<(Dataset, Dataset), DataError> {
    let file = std::fs::File::open(data)?;
    let dataset = read_dataset(std::io::BufReader::new(file))?;
    split(cfg, &dataset)
}

pub fn pretrain(cfg: &RunConfig, train_set: &Dataset) -> Result<Option<TrainedModel>, TrainError> {
    Ok(pretrain_feature_extractor(train_set, &cfg.model, &cfg.train)?.map(|(m, report)| {
        log::info!(
            "pretrained F: pooled NLL {:.4} -> {:.4}",
            report.initial_nll,
            report.final_nll
        );
        m
    }))
}

/// Trains on `train_set`; `checkpoint` is called with every model due for
/// an intermediate checkpoint.
pub fn train(
    cfg: &RunConfig,
    train_set: &Dataset,
    pretrained: Option<&TrainedModel>,
    mut checkpoint: impl FnMut(usize, &TrainedModel) -> Result<(), TrainError>,
) -> Result<(TrainedModel, TrainReport), TrainError> {
    let every = cfg.train.checkpoint_every;
    let epochs = cfg.train.epochs;
    train_with_hook(train_set, &cfg.model, &cfg.train, pretrained, |epoch, m| {
        let done = epoch + 1;
        if done % (epochs / 10).max(1) == 0 {
            log::debug!("epoch {done}/{epochs}");
        }
        if every > 0 && done % every == 0 && done < epochs {
            checkpoint(done, m)?;
        }
        Ok(())
    })
}

fn support_and_queries<'a>(cfg: &RunConfig, id: &str, samples: &'a [Sample]) -> Result<(&'a [Sample], &'a [Sample]), PipelineError> {
    let m = cfg.adapt.support_size;
    if samples.len() <= m {
        return Err(PipelineError::ShortSequence {
            id: id.into(),
            need: m,
            got: samples.len(),
        });
    }
    Ok(samples.split_at(m))
}

fn predictions_at(model: &TrainedModel, queries: &[Sample], z: &[f64]) -> Result<Vec<GaussianPrediction>, ModelError> {
    queries
        .iter()
        .map(|s| predict_with_trend(model, &s.x, s.a, z))
        .collect()
}

/// Adaptation starts: the mean of all training trends first, then the
/// centroid of each training trajectory.
pub fn adaptation_starts(model: &TrainedModel) -> Result<Vec<Vec<f64>>, TrendError> {
    let mut starts = vec![model.trend_mean()?];
    for positions in model.trend_positions()? {
        let n = positions.len() as f64;
        let d = model.config().trend_dim;
        starts.push((0..d).map(|k| positions.iter().map(|p| p[k]).sum::<f64>() / n).collect());
    }
    Ok(starts)
}

/// Few-shot adaptation on the first `support_size` samples of each held-out
/// sequence; the rest are scored at the adapted position.
pub fn adapt_held_out(cfg: &RunConfig, model: &TrainedModel, test_set: &Dataset) -> Result<Vec<AdaptResult>, PipelineError> {
    if test_set.is_empty() {
        return Err(PipelineError::NoHeldOut);
    }
    let starts = adaptation_starts(model)?;
    let mut out = Vec::with_capacity(test_set.len());
    for seq in &test_set.sequences {
        let (support, queries) = support_and_queries(cfg, &seq.id, &seq.samples)?;
        let mut r = adapt_with_restart(model, &seq.id, support, &starts, &cfg.adapt)?;
        let z = r.hold_position()?;
        let preds = predictions_at(model, queries, &z)?;
        let ys: Vec<f64> = queries.iter().map(|s| s.y).collect();
        r.metrics = Some(split_metrics(&seq.id, &preds, &ys)?);
        log::info!("adapted {}: held-out NLL {:.4}", seq.id, r.metrics.as_ref().map_or(f64::NAN, |m| m.nll));
        out.push(r);
    }
    Ok(out)
}

/// Predictions for every training sample at its training-time trend.
pub fn training_predictions(model: &TrainedModel, train_set: &Dataset) -> Result<(Vec<GaussianPrediction>, Vec<f64>), PipelineError> {
    let positions = model.trend_positions()?;
    let mut preds = Vec::with_capacity(train_set.sample_count());
    let mut ys = Vec::with_capacity(train_set.sample_count());
    for seq in &train_set.sequences {
        let k = model
            .trends
            .iter()
            .position(|t| t.sequence_id == seq.id)
            .ok_or_else(|| DataError::UnknownId(seq.id.clone()))?;
        for (s, z) in seq.samples.iter().zip(&positions[k]) {
            preds.push(predict_with_trend(model, &s.x, s.a, z)?);
            ys.push(s.y);
        }
    }
    Ok((preds, ys))
}

/// Metrics over the training split (training trends), the adapted held-out
/// queries, and the same queries at `z = 0`.
pub fn evaluate(
    cfg: &RunConfig,
    model: &TrainedModel,
    train_set: &Dataset,
    test_set: &Dataset,
    adapted: &[AdaptResult],
) -> Result<MetricsReport, PipelineError> {
    let (train_preds, train_ys) = training_predictions(model, train_set)?;
    let zero = vec![0.0; model.config().trend_dim];
    let (mut ad, mut base, mut ys) = (Vec::new(), Vec::new(), Vec::new());
    for seq in &test_set.sequences {
        let (_, queries) = support_and_queries(cfg, &seq.id, &seq.samples)?;
        let r = adapted
            .iter()
            .find(|r| r.sequence_id == seq.id)
            .ok_or_else(|| DataError::UnknownId(seq.id.clone()))?;
        ad.extend(predictions_at(model, queries, &r.hold_position()?)?);
        base.extend(predictions_at(model, queries, &zero)?);
        ys.extend(queries.iter().map(|s| s.y));
    }
    let ids: Vec<String> = model.trends.iter().map(|t| t.sequence_id.clone()).collect();
    let trajectories = (0..model.trends.len())
        .map(|i| model.trajectory(i))
        .collect::<Result<Vec<_>, _>>()?;
    let latent = LatentMetrics::from_trajectories(&ids, &trajectories)?;
    let mut splits = vec![SplitInput {
        name: "train",
        predictions: &train_preds,
        targets: &train_ys,
    }];
    if !ys.is_empty() {
        splits.push(SplitInput {
            name: "held_out_adapted",
            predictions: &ad,
            targets: &ys,
        });
        splits.push(SplitInput {
            name: "held_out_no_adapt",
            predictions: &base,
            targets: &ys,
        });
    }
    Ok(compute_metrics(&splits, latent)?)
}
