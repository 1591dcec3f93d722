//! Training phase: pretrain and freeze F, then jointly optimize G and the
//! per-sequence trend parameters on the combined objective.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Eval, Graph, Tape};
use crate::model::{gaussian_nll, Model, ModelConfig, ModelError, FEATURE_PREFIX, HEAD_PREFIX};
use crate::params::{Adam, ParamEntry, ParamError, ParamStore, ParamStoreFile};
use crate::synth::{Dataset, Sequence};
use crate::trend::{
    add_trend_noise, total_loss, LossValues, LossWeights, Observation, SequenceTrend, TrendError, TrendMode,
    TrendState, TrendTrajectory,
};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const TRAIN_REPORT_FORMAT_VERSION: u32 = 1;

// RNG streams derived from the run seed.
const STREAM_MODEL_INIT: u64 = 0;
const STREAM_TREND_INIT: u64 = 2;
const STREAM_AUGMENT: u64 = 3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("epoch {epoch}: non-finite {term} ({value})")]
    NonFinite {
        epoch: usize,
        term: &'static str,
        value: f64,
    },
    #[error("epoch {epoch}: {source}")]
    Backward { epoch: usize, source: AutodiffError },
    #[error("invalid train config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Trend(#[from] TrendError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub mode: TrendMode,
    /// Std of the Gaussian noise added to trend positions in training
    /// forward passes.
    pub sigma_aug: f64,
    /// Std of the initial trend positions.
    pub init_std: f64,
    /// Learning-rate multiplier for the process-noise entries. Each noise
    /// vector moves every later position, so equal per-entry Adam steps
    /// shift the end of a long sequence quadratically in its length.
    pub noise_lr_scale: f64,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Ablation: pin every trend at the origin.
    pub no_trend: bool,
    /// Filled from the run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            lr: 1e-3,
            weights: LossWeights::default(),
            mode: TrendMode::Cv,
            sigma_aug: 0.05,
            init_std: 0.1,
            noise_lr_scale: 0.05,
            pretrain_epochs: 300,
            pretrain_lr: 1e-2,
            checkpoint_every: 0,
            no_trend: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), (String, String)> {
        if self.epochs == 0 {
            return Err(("epochs".into(), "must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(("lr".into(), "must be > 0".into()));
        }
        if !(self.pretrain_lr > 0.0) {
            return Err(("pretrain_lr".into(), "must be > 0".into()));
        }
        if !(self.sigma_aug >= 0.0) {
            return Err(("sigma_aug".into(), "must be >= 0".into()));
        }
        if !(self.init_std >= 0.0) {
            return Err(("init_std".into(), "must be >= 0".into()));
        }
        if !(self.noise_lr_scale > 0.0) {
            return Err(("noise_lr_scale".into(), "must be > 0".into()));
        }
        self.weights
            .validate()
            .map_err(|(f, m)| (format!("weights.{f}"), m))
    }
}

/// Loss terms of one epoch, summed over sequences, before that epoch's
/// update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L_obs")]
    pub obs: f64,
    #[serde(rename = "L_eps")]
    pub eps: f64,
    #[serde(rename = "L_v")]
    pub v: f64,
    #[serde(rename = "L_p")]
    pub p: f64,
    pub total: f64,
}

impl EpochRecord {
    fn new(epoch: usize, v: LossValues) -> Self {
        Self {
            epoch,
            obs: v.obs,
            eps: v.eps,
            v: v.v,
            p: v.p,
            total: v.total,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub pretrain: Option<PretrainReport>,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    /// JSON lines, one per epoch. Wall-clock time is left out so the file
    /// is reproducible.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            format_version: u32,
            #[serde(flatten)]
            record: &'a EpochRecord,
        }
        let mut out = String::new();
        for record in &self.history {
            let line = Line {
                format_version: TRAIN_REPORT_FORMAT_VERSION,
                record,
            };
            out.push_str(&serde_json::to_string(&line).expect("plain numbers"));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean pooled NLL of the randomly initialized F and head.
    pub initial_nll: f64,
    pub final_nll: f64,
}

/// Model architecture, parameters and trend layout after training.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: Model,
    pub store: ParamStore,
    pub trends: Vec<SequenceTrend>,
    /// `(sequence id, environment label)` for every trained sequence.
    pub environments: Vec<(String, String)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format_version: u32,
    model: ModelConfig,
    params: ParamStoreFile,
    trends: Vec<SequenceTrend>,
    environments: Vec<(String, String)>,
}

pub fn is_model_entry(e: &ParamEntry) -> bool {
    e.name.starts_with(FEATURE_PREFIX) || e.name.starts_with(HEAD_PREFIX)
}

impl TrainedModel {
    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    /// SHA-256 of the F and G values.
    pub fn model_digest(&self) -> String {
        self.store.digest(is_model_entry)
    }

    pub fn feature_digest(&self) -> String {
        self.store.digest(|e| e.name.starts_with(FEATURE_PREFIX))
    }

    pub fn trajectory(&self, index: usize) -> Result<TrendTrajectory, TrendError> {
        self.trends[index].trajectory(&self.store, self.config().trend_dim)
    }

    /// Trend positions of every trained sequence, in training order.
    pub fn trend_positions(&self) -> Result<Vec<Vec<Vec<f64>>>, TrendError> {
        (0..self.trends.len())
            .map(|i| self.trajectory(i)?.positions())
            .collect()
    }

    /// Mean of all trained trend positions.
    pub fn trend_mean(&self) -> Result<Vec<f64>, TrendError> {
        let d = self.config().trend_dim;
        let mut sum = vec![0.0; d];
        let mut n = 0usize;
        for seq in self.trend_positions()? {
            for z in seq {
                sum.iter_mut().zip(&z).for_each(|(s, v)| *s += v);
                n += 1;
            }
        }
        Ok(sum.into_iter().map(|s| s / n.max(1) as f64).collect())
    }

    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model: self.config().clone(),
            params: self.store.to_file(),
            trends: self.trends.clone(),
            environments: self.environments.clone(),
        };
        let mut s = serde_json::to_string(&file).expect("serializable checkpoint");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let file: CheckpointFile =
            serde_json::from_str(text).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if file.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "unsupported format_version {}",
                file.format_version
            )));
        }
        let store = ParamStore::from_file(file.params)?;
        let model = Model::attach(file.model, &store)?;
        for t in &file.trends {
            store.id(&t.state_entry)?;
        }
        Ok(Self {
            model,
            store,
            trends: file.trends,
            environments: file.environments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn ensure_nonempty(dataset: &Dataset) -> Result<(), TrainError> {
    if dataset.sample_count() == 0 {
        return Err(TrainError::EmptyDataset);
    }
    Ok(())
}

fn pooled_nll(model: &Model, store: &ParamStore, dataset: &Dataset) -> Result<f64, TrainError> {
    let p = store.bind(&Eval);
    let zero = vec![0.0; model.config().trend_dim];
    let mut total = 0.0;
    for s in dataset.sequences.iter().flat_map(|q| &q.samples) {
        let f = model.feature_extract(&Eval, &p, &s.x)?;
        let pred = model.forward_features(&Eval, &p, &f, &zero, s.a)?;
        total += gaussian_nll(&Eval, &pred, s.y);
    }
    Ok(total / dataset.sample_count() as f64)
}

/// Trains F together with a no-trend head (z = 0) on all sequences pooled,
/// then freezes F. Returns the model whose F entries are frozen, or `None`
/// for the identity extractor.
pub fn pretrain_feature_extractor(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Option<(TrainedModel, PretrainReport)>, TrainError> {
    ensure_nonempty(dataset)?;
    let mut store = ParamStore::new();
    let model = Model::init(model_cfg.clone(), &mut store, &mut stream_rng(cfg.seed, STREAM_MODEL_INIT))?;
    if !model.has_feature_params() {
        return Ok(None);
    }
    let initial_nll = pooled_nll(&model, &store, dataset)?;
    let adam = Adam::with_lr(cfg.pretrain_lr);
    let tape = Tape::new();
    let d = model_cfg.trend_dim;
    for epoch in 0..cfg.pretrain_epochs {
        tape.clear();
        let bound = store.bind(&tape);
        let zero = tape.constants(&vec![0.0; d]);
        let mut terms = Vec::with_capacity(dataset.sample_count());
        for s in dataset.sequences.iter().flat_map(|q| &q.samples) {
            let f = model.feature_extract(&tape, &bound, &s.x)?;
            let pred = model.forward_features(&tape, &bound, &f, &zero, s.a)?;
            terms.push(gaussian_nll(&tape, &pred, s.y));
        }
        let root = tape.sum(&terms);
        let value = tape.value(root);
        if !value.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                term: "pretrain L_obs",
                value,
            });
        }
        tape.backward(root)
            .map_err(|source| TrainError::Backward { epoch, source })?;
        store.zero_grad();
        store.accumulate_grads(&tape, &bound);
        store.adam_step(&adam)?;
    }
    let final_nll = pooled_nll(&model, &store, dataset)?;
    store.set_trainable_prefix(FEATURE_PREFIX, false);
    store.reset_optimizer();
    Ok(Some((
        TrainedModel {
            model,
            store,
            trends: Vec::new(),
            environments: Vec::new(),
        },
        PretrainReport {
            initial_nll,
            final_nll,
        },
    )))
}

/// Initial trend values: free mode draws every position from
/// `N(0, init_std^2 I)`; cv mode draws the initial position the same way
/// with zero velocity and zero noise.
pub fn init_trend_params(
    dataset: &Dataset,
    mode: TrendMode,
    d: usize,
    init_std: f64,
    rng: &mut impl rand::Rng,
) -> Vec<TrendTrajectory> {
    let normal = Normal::new(0.0, init_std).expect("init_std >= 0");
    let draw = |rng: &mut _| -> Vec<f64> { (0..d).map(|_| normal.sample(rng)).collect() };
    dataset
        .sequences
        .iter()
        .map(|s| {
            let times = s.times();
            match mode {
                TrendMode::Free => TrendTrajectory::Free {
                    positions: (0..times.len()).map(|_| draw(rng)).collect(),
                    times,
                },
                TrendMode::Cv => TrendTrajectory::Cv {
                    z0: TrendState::stationary(draw(rng)),
                    noise: vec![vec![0.0; d]; times.len().saturating_sub(1)],
                    times,
                },
            }
        })
        .collect()
}

pub(crate) fn sequence_features(
    model: &Model,
    store: &ParamStore,
    seq: &Sequence,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let p = store.bind_frozen(&Eval);
    seq.samples
        .iter()
        .map(|s| model.feature_extract(&Eval, &p, &s.x))
        .collect()
}

/// Joint optimization of G and the trend parameters with F frozen.
///
/// `pretrained` supplies F; without it F is pretrained here (a no-op for
/// the identity extractor). `on_epoch` runs after every update.
pub fn train_with_hook(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    pretrained: Option<&TrainedModel>,
    mut on_epoch: impl FnMut(usize, &TrainedModel) -> Result<(), TrainError>,
) -> Result<(TrainedModel, TrainReport), TrainError> {
    ensure_nonempty(dataset)?;
    cfg.validate()
        .map_err(|(f, m)| TrainError::Config(format!("{f}: {m}")))?;
    for s in &dataset.sequences {
        s.validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
    }
    let started = Instant::now();

    let mut store = ParamStore::new();
    let model = Model::init(model_cfg.clone(), &mut store, &mut stream_rng(cfg.seed, STREAM_MODEL_INIT))?;
    let mut pretrain = None;
    if model.has_feature_params() {
        let owned;
        let source = match pretrained {
            Some(p) => p,
            None => {
                let (m, report) = pretrain_feature_extractor(dataset, model_cfg, cfg)?
                    .expect("model has feature parameters");
                pretrain = Some(report);
                owned = m;
                &owned
            }
        };
        for (i, e) in store.entries().to_vec().iter().enumerate() {
            if e.name.starts_with(FEATURE_PREFIX) {
                let src = source.store.value(source.store.id(&e.name)?);
                if src.len() != e.value.len() {
                    return Err(TrainError::Checkpoint(format!("pretrained entry `{}` has the wrong size", e.name)));
                }
                store.value_mut(i).copy_from_slice(src);
            }
        }
        store.set_trainable_prefix(FEATURE_PREFIX, model_cfg.train_feature_extractor);
    }

    let d = model_cfg.trend_dim;
    let mut init_rng = stream_rng(cfg.seed, STREAM_TREND_INIT);
    let init_std = if cfg.no_trend { 0.0 } else { cfg.init_std };
    let trajectories = init_trend_params(dataset, cfg.mode, d, init_std, &mut init_rng);
    let mut trends = Vec::with_capacity(trajectories.len());
    for (seq, traj) in dataset.sequences.iter().zip(&trajectories) {
        let trend = SequenceTrend::register(&seq.id, traj, &mut store, !cfg.no_trend)?;
        if let Some(eps) = &trend.noise_entry {
            let id = store.id(eps)?;
            store.set_lr_scale(id, cfg.noise_lr_scale);
        }
        trends.push(trend);
    }

    let mut trained = TrainedModel {
        model,
        store,
        trends,
        environments: dataset.env_labels(),
    };

    let frozen_features = !model_cfg.train_feature_extractor || !trained.model.has_feature_params();
    let cached: Vec<Vec<Vec<f64>>> = if frozen_features {
        dataset
            .sequences
            .iter()
            .map(|s| sequence_features(&trained.model, &trained.store, s))
            .collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };

    let sigma_aug = if cfg.no_trend { 0.0 } else { cfg.sigma_aug };
    let mut aug_rng = stream_rng(cfg.seed, STREAM_AUGMENT);
    let adam = Adam::with_lr(cfg.lr);
    let tape = Tape::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        tape.clear();
        let bound = trained.store.bind(&tape);
        let mut epoch_values = LossValues::default();
        let mut totals = Vec::with_capacity(dataset.len());
        for (k, (seq, trend)) in dataset.sequences.iter().zip(&trained.trends).enumerate() {
            let feats: Vec<Vec<_>> = if frozen_features {
                cached[k].iter().map(|f| tape.constants(f)).collect()
            } else {
                seq.samples
                    .iter()
                    .map(|s| trained.model.feature_extract(&tape, &bound, &s.x))
                    .collect::<Result<_, _>>()?
            };
            let observations: Vec<_> = seq
                .samples
                .iter()
                .zip(&feats)
                .map(|(s, f)| Observation {
                    features: f,
                    action: s.a,
                    outcome: s.y,
                })
                .collect();
            let path = trend.path(&tape, &trained.store, &bound, d)?;
            let offsets: Option<Vec<Vec<f64>>> = (sigma_aug > 0.0).then(|| {
                let zero = vec![0.0; d];
                (0..seq.samples.len())
                    .map(|_| add_trend_noise(&zero, sigma_aug, &mut aug_rng))
                    .collect()
            });
            let terms = total_loss(
                &tape,
                &trained.model,
                &bound,
                &observations,
                &path,
                &cfg.weights,
                offsets.as_deref(),
            )?;
            if let Some((term, value)) = terms.first_non_finite(&tape) {
                return Err(TrainError::NonFinite { epoch, term, value });
            }
            epoch_values += terms.values(&tape);
            totals.push(terms.total);
        }
        let root = tape.sum(&totals);
        tape.backward(root)
            .map_err(|source| TrainError::Backward { epoch, source })?;
        trained.store.zero_grad();
        trained.store.accumulate_grads(&tape, &bound);
        trained.store.adam_step(&adam)?;
        history.push(EpochRecord::new(epoch, epoch_values));
        on_epoch(epoch, &trained)?;
    }

    let report = TrainReport {
        history,
        pretrain,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((trained, report))
}

pub fn train(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    pretrained: Option<&TrainedModel>,
) -> Result<(TrainedModel, TrainReport), TrainError> {
    train_with_hook(dataset, model_cfg, cfg, pretrained, |_, _| Ok(()))
}
