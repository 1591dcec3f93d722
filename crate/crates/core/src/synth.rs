//! Synthetic non-stationary regression benchmark with concept shift.
//!
//! Every environment shares the same input distribution and the same
//! response family
//!
//! ```text
//! y = (w(t) . psi(x)) * a + bias * a^2 + noise,   psi(x) = tanh(P x)
//! ```
//!
//! and differs only in its latent factors `w(t)` and `bias`, so the shift
//! between environments is in `P(y | x, a)` alone.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no environment specs given")]
    NoEnvironments,
    #[error("environment `{name}`: {msg}")]
    InvalidSpec { name: String, msg: String },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("sequence `{0}`: timestamps are not strictly increasing")]
    NonMonotone(String),
    #[error("sequence `{id}`: {msg}")]
    InvalidSequence { id: String, msg: String },
    #[error("duplicate sequence id `{0}`")]
    DuplicateId(String),
    #[error("unknown sequence id `{0}`")]
    UnknownId(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub a: f64,
    pub y: f64,
    pub t: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub id: String,
    /// Name of the environment spec that generated the sequence.
    pub env: String,
    pub samples: Vec<Sample>,
}

impl Sequence {
    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    pub fn time_steps(&self) -> Vec<f64> {
        self.samples.windows(2).map(|w| w[1].t - w[0].t).collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.samples.is_empty() {
            return Err(DataError::InvalidSequence {
                id: self.id.clone(),
                msg: "no samples".into(),
            });
        }
        if self.samples.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(DataError::NonMonotone(self.id.clone()));
        }
        let dim = self.samples[0].x.len();
        for s in &self.samples {
            if s.x.len() != dim {
                return Err(DataError::InvalidSequence {
                    id: self.id.clone(),
                    msg: format!("input dimension changes from {dim} to {}", s.x.len()),
                });
            }
            let finite = s.x.iter().all(|v| v.is_finite()) && s.a.is_finite() && s.y.is_finite() && s.t.is_finite();
            if !finite {
                return Err(DataError::InvalidSequence {
                    id: self.id.clone(),
                    msg: "non-finite value".into(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn sample_count(&self) -> usize {
        self.sequences.iter().map(|s| s.samples.len()).sum()
    }

    pub fn get(&self, id: &str) -> Option<&Sequence> {
        self.sequences.iter().find(|s| s.id == id)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = HashSet::new();
        for s in &self.sequences {
            if !seen.insert(s.id.as_str()) {
                return Err(DataError::DuplicateId(s.id.clone()));
            }
            s.validate()?;
        }
        Ok(())
    }

    /// Environment label of each sequence, in dataset order.
    pub fn env_labels(&self) -> Vec<(String, String)> {
        self.sequences
            .iter()
            .map(|s| (s.id.clone(), s.env.clone()))
            .collect()
    }
}

/// One environment of the benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub name: String,
    /// Latent factors at the start of a sequence.
    pub w0: Vec<f64>,
    pub bias: f64,
    /// Change of `w` per unit time.
    pub drift: Vec<f64>,
    /// When set, `w` moves toward this environment's `w0` at speed
    /// `|drift|` instead of along `drift`, stopping on arrival.
    #[serde(default)]
    pub recurrence_target: Option<String>,
    pub noise_std: f64,
    pub action_range: [f64; 2],
    #[serde(default)]
    pub x_mean: f64,
    #[serde(default = "one")]
    pub x_std: f64,
    /// Reserved for evaluation rather than training.
    #[serde(default)]
    pub held_out: bool,
}

fn one() -> f64 {
    1.0
}

impl EnvSpec {
    pub fn validate(&self, latent_dim: usize) -> Result<(), DataError> {
        let fail = |msg: &str| {
            Err(DataError::InvalidSpec {
                name: self.name.clone(),
                msg: msg.into(),
            })
        };
        if self.w0.len() != latent_dim || self.drift.len() != latent_dim {
            return fail("w0 and drift must match the generator latent dimension");
        }
        if !(self.noise_std > 0.0) {
            return fail("noise_std must be > 0");
        }
        if !(self.action_range[0] < self.action_range[1]) {
            return fail("action_range must satisfy a_min < a_max");
        }
        if !(self.x_std > 0.0) {
            return fail("x_std must be > 0");
        }
        Ok(())
    }

    /// `lambda * a + (1 - lambda) * b`, component-wise over the latent
    /// factors, bias, drift and noise level.
    pub fn convex_combination(name: impl Into<String>, a: &EnvSpec, b: &EnvSpec, lambda: f64) -> EnvSpec {
        let mix = |p: &[f64], q: &[f64]| -> Vec<f64> {
            p.iter().zip(q).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect()
        };
        EnvSpec {
            name: name.into(),
            w0: mix(&a.w0, &b.w0),
            bias: lambda * a.bias + (1.0 - lambda) * b.bias,
            drift: mix(&a.drift, &b.drift),
            recurrence_target: None,
            noise_std: lambda * a.noise_std + (1.0 - lambda) * b.noise_std,
            action_range: a.action_range,
            x_mean: a.x_mean,
            x_std: a.x_std,
            held_out: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub x_dim: usize,
    pub latent_dim: usize,
    pub seq_len: usize,
    pub dt_mean: f64,
    /// Relative jitter: each step is `dt_mean * U(1 - j, 1 + j)`.
    pub dt_jitter: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            x_dim: 2,
            latent_dim: 2,
            seq_len: 45,
            dt_mean: 1.0,
            dt_jitter: 0.25,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), (String, String)> {
        if self.x_dim == 0 {
            return Err(("x_dim".into(), "must be at least 1".into()));
        }
        if self.latent_dim == 0 {
            return Err(("latent_dim".into(), "must be at least 1".into()));
        }
        if self.seq_len == 0 {
            return Err(("seq_len".into(), "must be at least 1".into()));
        }
        if !(self.dt_mean > 0.0) {
            return Err(("dt_mean".into(), "must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.dt_jitter) {
            return Err(("dt_jitter".into(), "must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// The response function shared by all environments.
#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    // latent_dim x x_dim, row-major.
    projection: Vec<f64>,
}

impl Generator {
    /// Draws the fixed feature map from `task_seed`.
    pub fn new(cfg: GeneratorConfig, task_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(task_seed);
        rng.set_stream(0);
        let normal = Normal::new(0.0, (1.0 / cfg.x_dim as f64).sqrt()).expect("positive std");
        let projection = (0..cfg.latent_dim * cfg.x_dim).map(|_| normal.sample(&mut rng)).collect();
        Self { cfg, projection }
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn psi(&self, x: &[f64]) -> Vec<f64> {
        let dx = self.cfg.x_dim;
        self.projection
            .chunks(dx)
            .map(|row| row.iter().zip(x).map(|(p, v)| p * v).sum::<f64>().tanh())
            .collect()
    }

    /// Latent factors of `spec` at time `t` after the sequence start.
    pub fn latent_at(&self, spec: &EnvSpec, specs: &[EnvSpec], t: f64) -> Vec<f64> {
        let target = spec
            .recurrence_target
            .as_ref()
            .and_then(|name| specs.iter().find(|s| &s.name == name));
        match target {
            Some(target) => {
                let dir: Vec<f64> = target.w0.iter().zip(&spec.w0).map(|(b, a)| b - a).collect();
                let dist = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                let speed = spec.drift.iter().map(|v| v * v).sum::<f64>().sqrt();
                if dist == 0.0 {
                    return spec.w0.clone();
                }
                let travel = (speed * t).min(dist);
                spec.w0.iter().zip(&dir).map(|(w, d)| w + d / dist * travel).collect()
            }
            None => spec.w0.iter().zip(&spec.drift).map(|(w, d)| w + d * t).collect(),
        }
    }

    /// Noise-free mean outcome.
    pub fn mean_outcome(&self, spec: &EnvSpec, specs: &[EnvSpec], x: &[f64], a: f64, t: f64) -> f64 {
        let w = self.latent_at(spec, specs, t);
        let lin: f64 = w.iter().zip(self.psi(x)).map(|(w, p)| w * p).sum();
        lin * a + spec.bias * a * a
    }

    pub fn sequence(&self, id: impl Into<String>, spec: &EnvSpec, specs: &[EnvSpec], rng: &mut impl Rng) -> Sequence {
        let x_dist = Normal::new(spec.x_mean, spec.x_std).expect("validated");
        let noise = Normal::new(0.0, spec.noise_std).expect("validated");
        let mut t = 0.0;
        let mut samples = Vec::with_capacity(self.cfg.seq_len);
        for i in 0..self.cfg.seq_len {
            if i > 0 {
                let j = self.cfg.dt_jitter;
                let u: f64 = if j > 0.0 { rng.gen_range(1.0 - j..1.0 + j) } else { 1.0 };
                t += self.cfg.dt_mean * u;
            }
            let x: Vec<f64> = (0..self.cfg.x_dim).map(|_| x_dist.sample(rng)).collect();
            let a = rng.gen_range(spec.action_range[0]..spec.action_range[1]);
            let y = self.mean_outcome(spec, specs, &x, a, t) + noise.sample(rng);
            samples.push(Sample { x, a, y, t });
        }
        Sequence {
            id: id.into(),
            env: spec.name.clone(),
            samples,
        }
    }

    /// `n_sequences` sequences cycling through `specs`. Sequence `i` draws
    /// from its own RNG stream, so results do not depend on evaluation order.
    pub fn generate(&self, specs: &[EnvSpec], n_sequences: usize, seed: u64) -> Result<Dataset, DataError> {
        if specs.is_empty() {
            return Err(DataError::NoEnvironments);
        }
        for s in specs {
            s.validate(self.cfg.latent_dim)?;
            if let Some(target) = &s.recurrence_target {
                if !specs.iter().any(|o| &o.name == target) {
                    return Err(DataError::InvalidSpec {
                        name: s.name.clone(),
                        msg: format!("unknown recurrence target `{target}`"),
                    });
                }
            }
        }
        let sequences = (0..n_sequences)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(1 + i as u64);
                self.sequence(format!("seq{i:02}"), &specs[i % specs.len()], specs, &mut rng)
            })
            .collect();
        Ok(Dataset { sequences })
    }
}

/// Generates a dataset whose response function is drawn from `seed`.
pub fn generate(
    specs: &[EnvSpec],
    n_sequences: usize,
    seed: u64,
    cfg: &GeneratorConfig,
) -> Result<Dataset, DataError> {
    Generator::new(cfg.clone(), seed).generate(specs, n_sequences, seed)
}

/// Parameters of the default benchmark: families of environments
/// ("object types") with a distinct base response each, plus held-out
/// environments mixed from two training environments of the same family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub families: usize,
    pub envs_per_family: usize,
    pub held_out_per_family: usize,
    /// Distance of each family's base factors from the origin.
    pub family_radius: f64,
    /// Family base directions are spread evenly over this arc (radians).
    pub family_arc: f64,
    /// Std of an environment's factors around its family base.
    pub env_spread: f64,
    /// Family `f` has bias `family_bias * (-1)^f`.
    pub family_bias: f64,
    pub drift_std: f64,
    pub noise_std: f64,
    pub action_range: [f64; 2],
    /// Held-out mixing weights are drawn from this interval.
    pub mix_range: [f64; 2],
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            families: 2,
            envs_per_family: 9,
            held_out_per_family: 1,
            family_radius: 1.2,
            family_arc: std::f64::consts::TAU,
            env_spread: 0.6,
            family_bias: 0.4,
            drift_std: 0.003,
            noise_std: 0.1,
            action_range: [0.5, 1.5],
            mix_range: [0.3, 0.7],
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<(), (String, String)> {
        if self.families == 0 || self.envs_per_family == 0 {
            return Err(("families".into(), "need at least one family with one environment".into()));
        }
        if self.held_out_per_family > 0 && self.envs_per_family < 2 {
            return Err((
                "envs_per_family".into(),
                "held-out mixtures need two environments per family".into(),
            ));
        }
        if !(self.noise_std > 0.0) {
            return Err(("noise_std".into(), "must be > 0".into()));
        }
        if !(self.action_range[0] < self.action_range[1]) {
            return Err(("action_range".into(), "must satisfy a_min < a_max".into()));
        }
        if !(0.0 <= self.mix_range[0] && self.mix_range[0] <= self.mix_range[1] && self.mix_range[1] <= 1.0) {
            return Err(("mix_range".into(), "must be an interval inside [0, 1]".into()));
        }
        Ok(())
    }

    /// Environment specs, training environments of each family followed by
    /// its held-out mixtures.
    pub fn specs(&self, latent_dim: usize, seed: u64) -> Vec<EnvSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let spread = Normal::new(0.0, self.env_spread.max(0.0)).expect("std >= 0");
        let drift = Normal::new(0.0, self.drift_std.max(0.0)).expect("std >= 0");
        let mut out = Vec::new();
        for f in 0..self.families {
            let angle = self.family_arc * f as f64 / self.families as f64 + 0.3;
            let base: Vec<f64> = (0..latent_dim)
                .map(|k| {
                    let c = if k % 2 == 0 { angle.cos() } else { angle.sin() };
                    self.family_radius * c
                })
                .collect();
            let bias = if f % 2 == 0 { self.family_bias } else { -self.family_bias };
            let first = out.len();
            for e in 0..self.envs_per_family {
                out.push(EnvSpec {
                    name: format!("f{f}e{e}"),
                    w0: base.iter().map(|b| b + spread.sample(&mut rng)).collect(),
                    bias,
                    drift: (0..latent_dim).map(|_| drift.sample(&mut rng)).collect(),
                    recurrence_target: None,
                    noise_std: self.noise_std,
                    action_range: self.action_range,
                    x_mean: 0.0,
                    x_std: 1.0,
                    held_out: false,
                });
            }
            for h in 0..self.held_out_per_family {
                let i = rng.gen_range(0..self.envs_per_family);
                let mut j = rng.gen_range(0..self.envs_per_family - 1);
                if j >= i {
                    j += 1;
                }
                let lambda = rng.gen_range(self.mix_range[0]..=self.mix_range[1]);
                let mut mixed = EnvSpec::convex_combination(
                    format!("f{f}mix{h}"),
                    &out[first + i],
                    &out[first + j],
                    lambda,
                );
                mixed.held_out = true;
                out.push(mixed);
            }
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum Record {
    Dataset { format_version: u32, sequences: usize },
    Sequence { id: String, env: String, samples: usize },
    Sample { t: f64, x: Vec<f64>, a: f64, y: f64 },
}

pub fn write_dataset(dataset: &Dataset, out: &mut impl Write) -> Result<(), DataError> {
    let mut line = |r: &Record| -> Result<(), DataError> {
        serde_json::to_writer(&mut *out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        Ok(())
    };
    line(&Record::Dataset {
        format_version: DATASET_FORMAT_VERSION,
        sequences: dataset.sequences.len(),
    })?;
    for s in &dataset.sequences {
        line(&Record::Sequence {
            id: s.id.clone(),
            env: s.env.clone(),
            samples: s.samples.len(),
        })?;
        for p in &s.samples {
            line(&Record::Sample {
                t: p.t,
                x: p.x.clone(),
                a: p.a,
                y: p.y,
            })?;
        }
    }
    Ok(())
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(dataset, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Parses a dataset and validates it. A file that ends early is an error;
/// no partial dataset is returned.
pub fn read_dataset(input: impl BufRead) -> Result<Dataset, DataError> {
    let mut lines = input.lines().enumerate();
    let mut next = |expect: &str| -> Result<(usize, Record), DataError> {
        match lines.next() {
            None => Err(DataError::Parse {
                line: 0,
                msg: format!("unexpected end of file, expected {expect} record"),
            }),
            Some((i, line)) => {
                let line = line?;
                let rec = serde_json::from_str(&line).map_err(|e| DataError::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })?;
                Ok((i + 1, rec))
            }
        }
    };
    let n_seq = match next("dataset")? {
        (_, Record::Dataset { format_version, sequences }) => {
            if format_version != DATASET_FORMAT_VERSION {
                return Err(DataError::Parse {
                    line: 1,
                    msg: format!("unsupported format_version {format_version}"),
                });
            }
            sequences
        }
        (line, _) => {
            return Err(DataError::Parse {
                line,
                msg: "expected dataset header".into(),
            })
        }
    };
    let mut sequences = Vec::with_capacity(n_seq);
    for _ in 0..n_seq {
        let (id, env, n) = match next("sequence")? {
            (_, Record::Sequence { id, env, samples }) => (id, env, samples),
            (line, _) => {
                return Err(DataError::Parse {
                    line,
                    msg: "expected sequence header".into(),
                })
            }
        };
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            match next("sample")? {
                (_, Record::Sample { t, x, a, y }) => samples.push(Sample { x, a, y, t }),
                (line, _) => {
                    return Err(DataError::Parse {
                        line,
                        msg: format!("sequence `{id}` declares {n} samples but has fewer"),
                    })
                }
            }
        }
        sequences.push(Sequence { id, env, samples });
    }
    if let Some((i, line)) = lines.next() {
        if !line?.trim().is_empty() {
            return Err(DataError::Parse {
                line: i + 1,
                msg: "trailing records after the declared sequences".into(),
            });
        }
    }
    let dataset = Dataset { sequences };
    dataset.validate()?;
    Ok(dataset)
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    read_dataset(BufReader::new(File::open(path)?))
}

/// Disjoint split by sequence id; dataset order is kept on both sides.
pub fn train_test_split(dataset: &Dataset, held_out_ids: &[String]) -> Result<(Dataset, Dataset), DataError> {
    let mut held = HashSet::new();
    for id in held_out_ids {
        if !held.insert(id.as_str()) {
            return Err(DataError::DuplicateId(id.clone()));
        }
        if dataset.get(id).is_none() {
            return Err(DataError::UnknownId(id.clone()));
        }
    }
    let (test, train): (Vec<_>, Vec<_>) = dataset
        .sequences
        .iter()
        .cloned()
        .partition(|s| held.contains(s.id.as_str()));
    Ok((Dataset { sequences: train }, Dataset { sequences: test }))
}

/// Closed-form no-trend baseline: Gaussian with mean linear in
/// `[1, a, a^2, a*x_1, .., a*x_D]` by least squares, with one shared
/// variance.
#[derive(Clone, Debug)]
pub struct LinearGaussian {
    coef: DVector<f64>,
    variance: f64,
}

fn baseline_basis(s: &Sample) -> Vec<f64> {
    let mut b = vec![1.0, s.a, s.a * s.a];
    b.extend(s.x.iter().map(|x| s.a * x));
    b
}

impl LinearGaussian {
    pub fn fit(samples: &[&Sample]) -> Option<Self> {
        let first = samples.first()?;
        let p = baseline_basis(first).len();
        let rows: Vec<f64> = samples.iter().flat_map(|s| baseline_basis(s)).collect();
        let x = DMatrix::from_row_slice(samples.len(), p, &rows);
        let y = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.y));
        let mut gram = x.transpose() * &x;
        for i in 0..p {
            gram[(i, i)] += 1e-8;
        }
        let coef = gram.cholesky()?.solve(&(x.transpose() * &y));
        let resid = &y - &x * &coef;
        // Unbiased residual variance; with few samples per environment the
        // ML estimate is too small for out-of-fold scoring.
        let dof = samples.len().saturating_sub(p).max(1);
        let variance = (resid.norm_squared() / dof as f64).max(1e-12);
        Some(Self { coef, variance })
    }

    pub fn mean(&self, s: &Sample) -> f64 {
        baseline_basis(s).iter().zip(self.coef.iter()).map(|(b, c)| b * c).sum()
    }

    pub fn nll(&self, s: &Sample) -> f64 {
        let r = s.y - self.mean(s);
        r * r / self.variance + (std::f64::consts::TAU * self.variance).ln()
    }
}

/// Mean held-out NLL of the baseline under two-fold cross-fitting (even vs
/// odd position within each sequence).
pub fn cross_fit_nll(sequences: &[&Sequence]) -> Option<f64> {
    let folds: [Vec<&Sample>; 2] = [0, 1].map(|parity| {
        sequences
            .iter()
            .flat_map(|s| s.samples.iter().enumerate())
            .filter(|(i, _)| i % 2 == parity)
            .map(|(_, s)| s)
            .collect()
    });
    let mut total = 0.0;
    let mut n = 0usize;
    for k in 0..2 {
        let model = LinearGaussian::fit(&folds[k])?;
        for s in &folds[1 - k] {
            total += model.nll(s);
            n += 1;
        }
    }
    (n > 0).then(|| total / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptShiftReport {
    pub pooled_nll: f64,
    /// Sample-weighted mean over environments.
    pub per_env_nll: f64,
    pub per_env: Vec<(String, f64)>,
}

impl ConceptShiftReport {
    pub fn has_concept_shift(&self) -> bool {
        self.pooled_nll > self.per_env_nll
    }
}

/// Compares one baseline fitted to all sequences against one baseline per
/// environment label.
pub fn concept_shift_check(dataset: &Dataset) -> Option<ConceptShiftReport> {
    let all: Vec<&Sequence> = dataset.sequences.iter().collect();
    let pooled_nll = cross_fit_nll(&all)?;
    let mut groups: Vec<(String, Vec<&Sequence>)> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for s in &dataset.sequences {
        let k = *index.entry(s.env.as_str()).or_insert_with(|| {
            groups.push((s.env.clone(), Vec::new()));
            groups.len() - 1
        });
        groups[k].1.push(s);
    }
    let mut per_env = Vec::with_capacity(groups.len());
    let mut weighted = 0.0;
    let mut n = 0usize;
    for (env, seqs) in groups {
        let nll = cross_fit_nll(&seqs)?;
        let count: usize = seqs.iter().map(|s| s.samples.len()).sum();
        weighted += nll * count as f64;
        n += count;
        per_env.push((env, nll));
    }
    Some(ConceptShiftReport {
        pooled_nll,
        per_env_nll: weighted / n as f64,
        per_env,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalCheck {
    /// Per input dimension, |mean difference| in standard errors.
    pub mean_z: Vec<f64>,
    /// Per input dimension, |variance difference| in standard errors.
    pub var_z: Vec<f64>,
    pub threshold: f64,
}

impl MarginalCheck {
    pub fn passed(&self) -> bool {
        self.mean_z.iter().chain(&self.var_z).all(|&z| z < self.threshold)
    }
}

fn moments(xs: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    (mean, var, m4)
}

/// Two-sample comparison of the input marginals of two groups of
/// sequences, dimension by dimension.
pub fn x_marginal_check(a: &[&Sequence], b: &[&Sequence], threshold: f64) -> MarginalCheck {
    let dim = a
        .iter()
        .chain(b)
        .find_map(|s| s.samples.first())
        .map_or(0, |s| s.x.len());
    let column = |group: &[&Sequence], k: usize| -> Vec<f64> {
        group.iter().flat_map(|s| s.samples.iter().map(move |p| p.x[k])).collect()
    };
    let mut mean_z = Vec::with_capacity(dim);
    let mut var_z = Vec::with_capacity(dim);
    for k in 0..dim {
        let (xa, xb) = (column(a, k), column(b, k));
        let (na, nb) = (xa.len() as f64, xb.len() as f64);
        let (ma, va, m4a) = moments(&xa);
        let (mb, vb, m4b) = moments(&xb);
        let se_mean = (va / na + vb / nb).sqrt();
        mean_z.push((ma - mb).abs() / se_mean);
        // Var(s^2) ~ (m4 - s^4) / n, valid without a normality assumption.
        let se_var = ((m4a - va * va) / na + (m4b - vb * vb) / nb).sqrt();
        var_z.push((va - vb).abs() / se_var);
    }
    MarginalCheck {
        mean_z,
        var_z,
        threshold,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_dataset(seed: u64) -> (Vec<EnvSpec>, Dataset) {
        let gcfg = GeneratorConfig::default();
        let specs = BenchmarkConfig::default().specs(gcfg.latent_dim, seed);
        let data = generate(&specs, specs.len(), seed, &gcfg).unwrap();
        (specs, data)
    }

    #[test]
    fn default_shape() {
        let (specs, data) = default_dataset(1);
        assert_eq!(specs.len(), 20);
        assert_eq!(specs.iter().filter(|s| s.held_out).count(), 2);
        assert_eq!(data.len(), 20);
        assert!(data.sequences.iter().all(|s| s.samples.len() == 45));
        assert_eq!(data.sample_count(), 900);
        data.validate().unwrap();
    }

    #[test]
    fn zero_environments_rejected() {
        assert!(matches!(
            generate(&[], 3, 0, &GeneratorConfig::default()),
            Err(DataError::NoEnvironments)
        ));
    }

    #[test]
    fn zero_drift_keeps_latent_constant() {
        let (mut specs, _) = default_dataset(2);
        specs[0].drift = vec![0.0, 0.0];
        let g = Generator::new(GeneratorConfig::default(), 2);
        for t in [0.0, 10.0, 44.0] {
            assert_eq!(g.latent_at(&specs[0], &specs, t), specs[0].w0);
        }
    }

    #[test]
    fn recurrence_moves_toward_target_and_stops() {
        let (mut specs, _) = default_dataset(3);
        specs[0].drift = vec![0.1, 0.0];
        specs[0].recurrence_target = Some(specs[1].name.clone());
        let g = Generator::new(GeneratorConfig::default(), 3);
        let w_far = g.latent_at(&specs[0], &specs, 1e6);
        for (a, b) in w_far.iter().zip(&specs[1].w0) {
            assert!((a - b).abs() < 1e-12);
        }
        let d0: f64 = specs[0].w0.iter().zip(&specs[1].w0).map(|(a, b)| (a - b).powi(2)).sum();
        let w1 = g.latent_at(&specs[0], &specs, 1.0);
        let d1: f64 = w1.iter().zip(&specs[1].w0).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(d1 < d0);
    }

    #[test]
    fn same_seed_same_bytes() {
        let (_, a) = default_dataset(4);
        let (_, b) = default_dataset(4);
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        write_dataset(&a, &mut ba).unwrap();
        write_dataset(&b, &mut bb).unwrap();
        assert_eq!(ba, bb);
        let (_, c) = default_dataset(5);
        let mut bc = Vec::new();
        write_dataset(&c, &mut bc).unwrap();
        assert_ne!(ba, bc);
    }

    #[test]
    fn round_trip_is_exact() {
        let (_, data) = default_dataset(6);
        let mut buf = Vec::new();
        write_dataset(&data, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn truncated_file_is_an_error() {
        let (_, data) = default_dataset(7);
        let mut buf = Vec::new();
        write_dataset(&data, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut: String = text.lines().take(100).map(|l| format!("{l}\n")).collect();
        assert!(matches!(read_dataset(cut.as_bytes()), Err(DataError::Parse { .. })));
        // Cut mid-line.
        let half = &text[..text.len() / 2];
        assert!(read_dataset(half.as_bytes()).is_err());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"kind\":\"dataset\",\"format_version\":1,\"sequences\":1}\n\
                    {\"kind\":\"sequence\",\"id\":\"s\",\"env\":\"e\",\"samples\":1}\n\
                    {\"kind\":\"sample\",\"t\":oops}\n";
        match read_dataset(text.as_bytes()) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_monotone_timestamps_name_the_sequence() {
        let (_, mut data) = default_dataset(8);
        data.sequences[3].samples[10].t = data.sequences[3].samples[9].t;
        let mut buf = Vec::new();
        write_dataset(&data, &mut buf).unwrap();
        match read_dataset(buf.as_slice()) {
            Err(DataError::NonMonotone(id)) => assert_eq!(id, data.sequences[3].id),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn split_examples() {
        let (specs, data) = default_dataset(9);
        let held: Vec<String> = data
            .sequences
            .iter()
            .zip(&specs)
            .filter(|(_, s)| s.held_out)
            .map(|(q, _)| q.id.clone())
            .collect();
        let (train, test) = train_test_split(&data, &held).unwrap();
        assert_eq!((train.len(), test.len()), (18, 2));
        let (train, test) = train_test_split(&data, &[]).unwrap();
        assert_eq!((train.len(), test.len()), (20, 0));
        let dup = vec![held[0].clone(), held[0].clone()];
        assert!(matches!(train_test_split(&data, &dup), Err(DataError::DuplicateId(_))));
        assert!(matches!(
            train_test_split(&data, &["nope".to_string()]),
            Err(DataError::UnknownId(_))
        ));
    }

    #[test]
    fn identical_specs_have_equal_optimal_nll() {
        let (specs, _) = default_dataset(10);
        let mut twin = specs[0].clone();
        twin.name = "twin".into();
        let pair = vec![specs[0].clone(), twin];
        let g = Generator::new(
            GeneratorConfig {
                seq_len: 400,
                ..GeneratorConfig::default()
            },
            10,
        );
        let data = g.generate(&pair, 2, 10).unwrap();
        // NLL under the true mean and noise level of each environment.
        let optimal: Vec<f64> = data
            .sequences
            .iter()
            .zip(&pair)
            .map(|(seq, spec)| {
                let var = spec.noise_std * spec.noise_std;
                let total: f64 = seq
                    .samples
                    .iter()
                    .map(|s| {
                        let r = s.y - g.mean_outcome(spec, &pair, &s.x, s.a, s.t);
                        r * r / var + (std::f64::consts::TAU * var).ln()
                    })
                    .sum();
                total / seq.samples.len() as f64
            })
            .collect();
        // Std of a mean of 400 chi-square(1) terms is about 0.07.
        assert!((optimal[0] - optimal[1]).abs() < 0.3, "{optimal:?}");
    }

    #[test]
    fn default_benchmark_has_concept_shift_without_covariate_shift() {
        let (_, data) = default_dataset(11);
        let report = concept_shift_check(&data).unwrap();
        assert!(report.has_concept_shift(), "{report:?}");
        let (first, second) = data.sequences.split_at(10);
        let a: Vec<&Sequence> = first.iter().collect();
        let b: Vec<&Sequence> = second.iter().collect();
        let check = x_marginal_check(&a, &b, 3.0);
        assert!(check.passed(), "{check:?}");
    }

    #[test]
    fn marginal_check_detects_covariate_shift() {
        let (mut specs, _) = default_dataset(12);
        specs[1].x_mean = 0.5;
        let data = generate(&specs[..2], 2, 12, &GeneratorConfig {
            seq_len: 200,
            ..GeneratorConfig::default()
        })
        .unwrap();
        let check = x_marginal_check(&[&data.sequences[0]], &[&data.sequences[1]], 3.0);
        assert!(!check.passed());
    }
}
