//! Predictive and latent-space metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::GaussianPrediction;
use crate::trend::{TrendTrajectory, DIRECTION_EPS};

pub const METRICS_FORMAT_VERSION: u32 = 1;

/// Two-sided 95% standard normal quantile.
const Z95: f64 = 1.959963984540054;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("split `{0}` has no predictions")]
    Empty(String),
    #[error("split `{split}`: {predictions} predictions for {targets} targets")]
    Misaligned {
        split: String,
        predictions: usize,
        targets: usize,
    },
    #[error("{0} labels for {1} points")]
    Labels(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub n: usize,
    /// Mean per-sample NLL.
    pub nll: f64,
    pub rmse: f64,
    /// Fraction of targets inside `mu +- 1.96 sigma`.
    pub coverage95: f64,
}

pub fn nll(pred: &GaussianPrediction, y: f64) -> f64 {
    (y - pred.mu).powi(2) / pred.sigma2 + (2.0 * std::f64::consts::PI * pred.sigma2).ln()
}

pub fn split_metrics(name: &str, preds: &[GaussianPrediction], ys: &[f64]) -> Result<SplitMetrics, MetricsError> {
    if preds.len() != ys.len() {
        return Err(MetricsError::Misaligned {
            split: name.into(),
            predictions: preds.len(),
            targets: ys.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricsError::Empty(name.into()));
    }
    let n = preds.len() as f64;
    let mut total_nll = 0.0;
    let mut sq = 0.0;
    let mut inside = 0usize;
    for (p, &y) in preds.iter().zip(ys) {
        total_nll += nll(p, y);
        sq += (y - p.mu).powi(2);
        if (y - p.mu).abs() <= Z95 * p.sigma2.sqrt() {
            inside += 1;
        }
    }
    Ok(SplitMetrics {
        n: preds.len(),
        nll: total_nll / n,
        rmse: (sq / n).sqrt(),
        coverage95: inside as f64 / n,
    })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean silhouette coefficient with Euclidean distance. `None` when there
/// are fewer than two distinct labels. Points alone in their cluster score 0.
pub fn silhouette<L: Ord + Clone>(points: &[Vec<f64>], labels: &[L]) -> Result<Option<f64>, MetricsError> {
    if points.len() != labels.len() {
        return Err(MetricsError::Labels(labels.len(), points.len()));
    }
    let mut index: BTreeMap<L, usize> = BTreeMap::new();
    for l in labels {
        let next = index.len();
        index.entry(l.clone()).or_insert(next);
    }
    let k = index.len();
    if k < 2 {
        return Ok(None);
    }
    let cluster: Vec<usize> = labels.iter().map(|l| index[l]).collect();
    let mut sizes = vec![0usize; k];
    cluster.iter().for_each(|&c| sizes[c] += 1);

    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..points.len() {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..points.len() {
            if i != j {
                sums[cluster[j]] += dist(&points[i], &points[j]);
            }
        }
        let own = cluster[i];
        if sizes[own] == 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(Some(total / points.len() as f64))
}

/// Mean angle in radians between consecutive finite-difference velocities.
/// Pairs involving a near-zero velocity are skipped; `None` if none remain.
pub fn mean_turn_angle(trajectories: &[(Vec<f64>, Vec<Vec<f64>>)]) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (times, positions) in trajectories {
        let v: Vec<Vec<f64>> = positions
            .windows(2)
            .zip(times.windows(2))
            .map(|(p, t)| p[1].iter().zip(&p[0]).map(|(b, a)| (b - a) / (t[1] - t[0])).collect())
            .collect();
        for w in v.windows(2) {
            let na = dist(&w[0], &vec![0.0; w[0].len()]);
            let nb = dist(&w[1], &vec![0.0; w[1].len()]);
            if na < DIRECTION_EPS || nb < DIRECTION_EPS {
                continue;
            }
            let cos = w[0].iter().zip(&w[1]).map(|(a, b)| a * b).sum::<f64>() / (na * nb);
            sum += cos.clamp(-1.0, 1.0).acos();
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

/// Mean process-noise norm over cv trajectories; `None` without any.
pub fn mean_noise_norm(trajectories: &[TrendTrajectory]) -> Option<f64> {
    let norms: Vec<f64> = trajectories
        .iter()
        .filter_map(|t| match t {
            TrendTrajectory::Cv { noise, .. } => Some(noise),
            TrendTrajectory::Free { .. } => None,
        })
        .flatten()
        .map(|e| e.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    (!norms.is_empty()).then(|| norms.iter().sum::<f64>() / norms.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatentMetrics {
    /// Silhouette of trend positions labeled by sequence id.
    pub silhouette: Option<f64>,
    pub mean_noise_norm: Option<f64>,
    pub mean_turn_angle: Option<f64>,
}

impl LatentMetrics {
    pub fn from_trajectories(
        sequence_ids: &[String],
        trajectories: &[TrendTrajectory],
    ) -> Result<Self, crate::trend::TrendError> {
        let mut points = Vec::new();
        let mut labels = Vec::new();
        let mut paths = Vec::with_capacity(trajectories.len());
        for (id, t) in sequence_ids.iter().zip(trajectories) {
            let pos = t.positions()?;
            labels.extend(std::iter::repeat(id.clone()).take(pos.len()));
            points.extend(pos.iter().cloned());
            paths.push((t.times().to_vec(), pos));
        }
        Ok(Self {
            silhouette: silhouette(&points, &labels).expect("aligned by construction"),
            mean_noise_norm: mean_noise_norm(trajectories),
            mean_turn_angle: mean_turn_angle(&paths),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format_version: u32,
    pub splits: BTreeMap<String, SplitMetrics>,
    pub latent: LatentMetrics,
}

/// One named split: predictions and the matching targets.
pub struct SplitInput<'a> {
    pub name: &'a str,
    pub predictions: &'a [GaussianPrediction],
    pub targets: &'a [f64],
}

pub fn compute_metrics(splits: &[SplitInput<'_>], latent: LatentMetrics) -> Result<MetricsReport, MetricsError> {
    let mut out = BTreeMap::new();
    for s in splits {
        out.insert(s.name.to_string(), split_metrics(s.name, s.predictions, s.targets)?);
    }
    Ok(MetricsReport {
        format_version: METRICS_FORMAT_VERSION,
        splits: out,
        latent,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable metrics");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let preds: Vec<_> = [0.5, -1.0, 3.0]
            .iter()
            .map(|&mu| GaussianPrediction { mu, sigma2: 1.0 })
            .collect();
        let m = split_metrics("s", &preds, &[0.5, -1.0, 3.0]).unwrap();
        assert_eq!(m.rmse, 0.0);
        assert!((m.nll - (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        assert_eq!(m.coverage95, 1.0);
    }

    #[test]
    fn empty_and_misaligned() {
        assert_eq!(split_metrics("s", &[], &[]), Err(MetricsError::Empty("s".into())));
        let p = [GaussianPrediction { mu: 0.0, sigma2: 1.0 }];
        assert!(matches!(split_metrics("s", &p, &[]), Err(MetricsError::Misaligned { .. })));
    }

    // Direct O(n^2) definition written independently of the implementation.
    fn silhouette_oracle(points: &[Vec<f64>], labels: &[u32]) -> f64 {
        let n = points.len();
        let mut s = 0.0;
        for i in 0..n {
            let mean_to = |l: u32| {
                let d: Vec<f64> = (0..n)
                    .filter(|&j| j != i && labels[j] == l)
                    .map(|j| dist(&points[i], &points[j]))
                    .collect();
                d.iter().sum::<f64>() / d.len() as f64
            };
            let a = mean_to(labels[i]);
            let mut others: Vec<u32> = labels.iter().copied().filter(|&l| l != labels[i]).collect();
            others.dedup();
            let b = others.into_iter().map(mean_to).fold(f64::INFINITY, f64::min);
            s += (b - a) / a.max(b);
        }
        s / n as f64
    }

    #[test]
    fn separated_clusters_score_high() {
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for k in 0..6 {
            let d = k as f64 * 0.01;
            points.push(vec![d, -d]);
            labels.push(0u32);
            points.push(vec![10.0 + d, 5.0 + d]);
            labels.push(1u32);
        }
        let s = silhouette(&points, &labels).unwrap().unwrap();
        assert!(s > 0.5, "{s}");
        assert!((s - silhouette_oracle(&points, &labels)).abs() < 1e-12);
    }

    #[test]
    fn silhouette_matches_oracle_on_overlap() {
        let points: Vec<Vec<f64>> = (0..9).map(|i| vec![(i as f64 * 1.3).sin(), (i as f64 * 0.7).cos()]).collect();
        let labels: Vec<u32> = (0..9).map(|i| i % 3).collect();
        let s = silhouette(&points, &labels).unwrap().unwrap();
        assert!((-1.0..=1.0).contains(&s));
        assert!((s - silhouette_oracle(&points, &labels)).abs() < 1e-12);
    }

    #[test]
    fn single_label_is_undefined() {
        let points = vec![vec![0.0], vec![1.0]];
        assert_eq!(silhouette(&points, &["a", "a"]).unwrap(), None);
    }

    #[test]
    fn turn_angle_of_straight_and_zigzag_paths() {
        let times: Vec<f64> = (0..5).map(f64::from).collect();
        let straight: Vec<Vec<f64>> = times.iter().map(|&t| vec![t, 2.0 * t]).collect();
        assert!(mean_turn_angle(&[(times.clone(), straight)]).unwrap().abs() < 1e-7);
        let zigzag: Vec<Vec<f64>> = times.iter().map(|&t| vec![t, (t as i32 % 2) as f64]).collect();
        let a = mean_turn_angle(&[(times.clone(), zigzag)]).unwrap();
        assert!((a - std::f64::consts::FRAC_PI_2).abs() < 1e-12, "{a}");
        let still = vec![vec![1.0, 1.0]; 5];
        assert_eq!(mean_turn_angle(&[(times, still)]), None);
    }

    #[test]
    fn noise_norm_ignores_free_trajectories() {
        let cv = TrendTrajectory::Cv {
            times: vec![0.0, 1.0, 2.0],
            z0: crate::trend::TrendState::stationary(vec![0.0, 0.0]),
            noise: vec![vec![3.0, 4.0], vec![0.0, 1.0]],
        };
        let free = TrendTrajectory::Free {
            times: vec![0.0],
            positions: vec![vec![9.0, 9.0]],
        };
        assert_eq!(mean_noise_norm(&[cv, free.clone()]), Some(3.0));
        assert_eq!(mean_noise_norm(&[free]), None);
    }
}
