//! Trend IDs: latent environment positions, the constant-velocity
//! transition model and the regularizers that couple adjacent samples.
//!
//! A sequence's trend is either *free* (one position per sample) or *cv*
//! (an initial state `[z; zdot]` plus one velocity perturbation per
//! transition). Positions advance by `dt * zdot`; process noise enters the
//! velocity only.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Eval, Graph};
use crate::model::{gaussian_nll, Model, ModelError};
use crate::params::{Bound, ParamError, ParamStore};

/// Velocity norms below this are treated as undefined directions.
pub const DIRECTION_EPS: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrendError {
    #[error("non-positive time step {dt} at transition {index}")]
    NonPositiveDt { index: usize, dt: f64 },
    #[error("{what}: expected length {expected}, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("operation requires cv mode")]
    NotCv,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendMode {
    Free,
    Cv,
}

impl std::fmt::Display for TrendMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrendMode::Free => "free",
            TrendMode::Cv => "cv",
        })
    }
}

/// Coefficients of the combined objective
/// `alpha*L_obs + beta*L_eps + gamma*L_v + zeta*L_p`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub zeta: f64,
    pub sigma_v2: f64,
    pub sigma_eps2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 100.0,
            gamma: 1000.0,
            zeta: 1000.0,
            sigma_v2: 1.0,
            sigma_eps2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn obs_only() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
            zeta: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), (String, String)> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("zeta", self.zeta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err((name.into(), "must be finite and >= 0".into()));
            }
        }
        for (name, v) in [("sigma_v2", self.sigma_v2), ("sigma_eps2", self.sigma_eps2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err((name.into(), "must be finite and > 0".into()));
            }
        }
        Ok(())
    }
}

/// `[z; zdot]`: latent position and its rate of change per unit time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendState<V = f64> {
    pub z: Vec<V>,
    pub zdot: Vec<V>,
}

impl TrendState<f64> {
    pub fn stationary(z: Vec<f64>) -> Self {
        let zdot = vec![0.0; z.len()];
        Self { z, zdot }
    }

    /// Constant-velocity prediction `dt` time units ahead.
    pub fn extrapolate(&self, dt: f64) -> Vec<f64> {
        self.z.iter().zip(&self.zdot).map(|(z, v)| z + dt * v).collect()
    }
}

/// Velocity perturbation applied over a transition of length `dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessNoise<V = f64> {
    pub eps: Vec<V>,
    pub dt: f64,
}

pub fn transition_apply<G: Graph>(
    g: &G,
    prev: &TrendState<G::Value>,
    noise: &ProcessNoise<G::Value>,
) -> TrendState<G::Value> {
    debug_assert!(noise.dt > 0.0);
    let z = prev
        .z
        .iter()
        .zip(&prev.zdot)
        .map(|(&z, &v)| g.add(z, g.scale(v, noise.dt)))
        .collect();
    let zdot = prev
        .zdot
        .iter()
        .zip(&noise.eps)
        .map(|(&v, &e)| g.add(v, e))
        .collect();
    TrendState { z, zdot }
}

/// States `Z_0 .. Z_{n}` for `n` transitions.
pub fn unroll<G: Graph>(
    g: &G,
    z0: TrendState<G::Value>,
    noise: &[ProcessNoise<G::Value>],
) -> Result<Vec<TrendState<G::Value>>, TrendError> {
    if let Some((index, n)) = noise.iter().enumerate().find(|(_, n)| !(n.dt > 0.0)) {
        return Err(TrendError::NonPositiveDt { index, dt: n.dt });
    }
    let mut states = Vec::with_capacity(noise.len() + 1);
    states.push(z0);
    for n in noise {
        let next = transition_apply(g, states.last().expect("non-empty"), n);
        states.push(next);
    }
    Ok(states)
}

/// Process-noise penalty `sum_i ||eps_i||^2 / (sigma_eps2 * dt_i)`.
pub fn loss_eps<G: Graph>(g: &G, noise: &[ProcessNoise<G::Value>], sigma_eps2: f64) -> G::Value {
    let terms: Vec<_> = noise
        .iter()
        .map(|n| {
            let sq = g.dot(&n.eps, &n.eps);
            g.scale(sq, 1.0 / (sigma_eps2 * n.dt))
        })
        .collect();
    g.sum(&terms)
}

fn check_dts(dts: &[f64]) -> Result<(), TrendError> {
    match dts.iter().enumerate().find(|(_, &dt)| !(dt > 0.0)) {
        Some((index, &dt)) => Err(TrendError::NonPositiveDt { index, dt }),
        None => Ok(()),
    }
}

/// Step-size penalty `sum_i ||z_{i+1} - z_i||^2 / (sigma_v2 * dt_i)`.
pub fn loss_v<G: Graph>(
    g: &G,
    positions: &[Vec<G::Value>],
    dts: &[f64],
    sigma_v2: f64,
) -> Result<G::Value, TrendError> {
    if positions.len() != dts.len() + 1 && !(positions.is_empty() && dts.is_empty()) {
        return Err(TrendError::Length {
            what: "positions for loss_v",
            expected: dts.len() + 1,
            got: positions.len(),
        });
    }
    check_dts(dts)?;
    let terms: Vec<_> = positions
        .windows(2)
        .zip(dts)
        .map(|(w, &dt)| {
            let diff: Vec<_> = w[1].iter().zip(&w[0]).map(|(&b, &a)| g.sub(b, a)).collect();
            let sq = g.dot(&diff, &diff);
            g.scale(sq, 1.0 / (sigma_v2 * dt))
        })
        .collect();
    Ok(g.sum(&terms))
}

/// Direction-change penalty `sum_i (1 - cos(v_{i+1}, v_i))`. Pairs where
/// either velocity has norm below [`DIRECTION_EPS`] contribute nothing.
pub fn loss_p<G: Graph>(g: &G, velocities: &[Vec<G::Value>]) -> G::Value {
    let norms: Vec<_> = velocities.iter().map(|v| g.norm(v)).collect();
    let mut terms = Vec::with_capacity(velocities.len().saturating_sub(1));
    for i in 0..velocities.len().saturating_sub(1) {
        let (na, nb) = (norms[i], norms[i + 1]);
        if g.value(na) < DIRECTION_EPS || g.value(nb) < DIRECTION_EPS {
            continue;
        }
        let cos = g.div(g.dot(&velocities[i + 1], &velocities[i]), g.mul(na, nb));
        let one = g.constant(1.0);
        terms.push(g.sub(one, cos));
    }
    g.sum(&terms)
}

/// `(z_{i+1} - z_i) / dt_i` for each adjacent pair.
pub fn finite_difference_velocities<G: Graph>(
    g: &G,
    positions: &[Vec<G::Value>],
    dts: &[f64],
) -> Vec<Vec<G::Value>> {
    positions
        .windows(2)
        .zip(dts)
        .map(|(w, &dt)| {
            w[1].iter()
                .zip(&w[0])
                .map(|(&b, &a)| g.scale(g.sub(b, a), 1.0 / dt))
                .collect()
        })
        .collect()
}

/// `z + eta` with `eta ~ N(0, sigma_aug^2 I)`.
pub fn add_trend_noise(z: &[f64], sigma_aug: f64, rng: &mut impl Rng) -> Vec<f64> {
    if sigma_aug == 0.0 {
        return z.to_vec();
    }
    let normal = Normal::new(0.0, sigma_aug).expect("sigma_aug >= 0");
    z.iter().map(|&v| v + normal.sample(rng)).collect()
}

pub fn time_steps(times: &[f64]) -> Result<Vec<f64>, TrendError> {
    let dts: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    check_dts(&dts)?;
    Ok(dts)
}

/// Concrete trend values for one sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TrendTrajectory {
    Free {
        times: Vec<f64>,
        positions: Vec<Vec<f64>>,
    },
    Cv {
        times: Vec<f64>,
        z0: TrendState,
        noise: Vec<Vec<f64>>,
    },
}

impl TrendTrajectory {
    pub fn mode(&self) -> TrendMode {
        match self {
            TrendTrajectory::Free { .. } => TrendMode::Free,
            TrendTrajectory::Cv { .. } => TrendMode::Cv,
        }
    }

    pub fn times(&self) -> &[f64] {
        match self {
            TrendTrajectory::Free { times, .. } | TrendTrajectory::Cv { times, .. } => times,
        }
    }

    pub fn len(&self) -> usize {
        self.times().len()
    }

    pub fn is_empty(&self) -> bool {
        self.times().is_empty()
    }

    /// Unrolled states in cv mode.
    pub fn states(&self) -> Result<Vec<TrendState>, TrendError> {
        match self {
            TrendTrajectory::Free { .. } => Err(TrendError::NotCv),
            TrendTrajectory::Cv { times, z0, noise } => {
                let dts = time_steps(times)?;
                if noise.len() != dts.len() {
                    return Err(TrendError::Length {
                        what: "process noise sequence",
                        expected: dts.len(),
                        got: noise.len(),
                    });
                }
                let noise: Vec<_> = noise
                    .iter()
                    .zip(&dts)
                    .map(|(e, &dt)| ProcessNoise { eps: e.clone(), dt })
                    .collect();
                unroll(&Eval, z0.clone(), &noise)
            }
        }
    }

    pub fn positions(&self) -> Result<Vec<Vec<f64>>, TrendError> {
        match self {
            TrendTrajectory::Free { positions, .. } => Ok(positions.clone()),
            TrendTrajectory::Cv { .. } => Ok(self.states()?.into_iter().map(|s| s.z).collect()),
        }
    }
}

/// Where a sequence's trend parameters live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceTrend {
    pub sequence_id: String,
    pub times: Vec<f64>,
    pub mode: TrendMode,
    /// Free mode: all positions; cv mode: the initial state `[z; zdot]`.
    pub state_entry: String,
    /// Cv mode only: process noise, `d` values per transition.
    pub noise_entry: Option<String>,
}

/// Differentiable positions and velocities of one sequence's trend.
pub struct TrendPath<V> {
    pub positions: Vec<Vec<V>>,
    pub velocities: Vec<Vec<V>>,
    pub noise: Vec<ProcessNoise<V>>,
    pub dts: Vec<f64>,
}

impl SequenceTrend {
    pub fn free_entry_name(sequence_id: &str) -> String {
        format!("trend.{sequence_id}.z")
    }

    pub fn cv_entry_names(sequence_id: &str) -> (String, String) {
        (
            format!("trend.{sequence_id}.z0"),
            format!("trend.{sequence_id}.eps"),
        )
    }

    /// Registers the parameters of `traj` in `store`.
    pub fn register(
        sequence_id: &str,
        traj: &TrendTrajectory,
        store: &mut ParamStore,
        trainable: bool,
    ) -> Result<Self, TrendError> {
        match traj {
            TrendTrajectory::Free { times, positions } => {
                let name = Self::free_entry_name(sequence_id);
                store.insert(&name, positions.concat(), trainable)?;
                Ok(SequenceTrend {
                    sequence_id: sequence_id.into(),
                    times: times.clone(),
                    mode: TrendMode::Free,
                    state_entry: name,
                    noise_entry: None,
                })
            }
            TrendTrajectory::Cv { times, z0, noise } => {
                let (state, eps) = Self::cv_entry_names(sequence_id);
                let mut s = z0.z.clone();
                s.extend_from_slice(&z0.zdot);
                store.insert(&state, s, trainable)?;
                store.insert(&eps, noise.concat(), trainable)?;
                Ok(SequenceTrend {
                    sequence_id: sequence_id.into(),
                    times: times.clone(),
                    mode: TrendMode::Cv,
                    state_entry: state,
                    noise_entry: Some(eps),
                })
            }
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Reads the current values back out of `store`.
    pub fn trajectory(&self, store: &ParamStore, d: usize) -> Result<TrendTrajectory, TrendError> {
        let state = store.value(store.id(&self.state_entry)?);
        Ok(match self.mode {
            TrendMode::Free => TrendTrajectory::Free {
                times: self.times.clone(),
                positions: state.chunks(d).map(<[f64]>::to_vec).collect(),
            },
            TrendMode::Cv => {
                let eps_name = self.noise_entry.as_deref().ok_or(TrendError::NotCv)?;
                let eps = store.value(store.id(eps_name)?);
                TrendTrajectory::Cv {
                    times: self.times.clone(),
                    z0: TrendState {
                        z: state[..d].to_vec(),
                        zdot: state[d..].to_vec(),
                    },
                    noise: eps.chunks(d).map(<[f64]>::to_vec).collect(),
                }
            }
        })
    }

    /// Builds positions and velocities from bound parameters.
    pub fn path<G: Graph>(
        &self,
        g: &G,
        store: &ParamStore,
        bound: &Bound<G::Value>,
        d: usize,
    ) -> Result<TrendPath<G::Value>, TrendError> {
        let dts = time_steps(&self.times)?;
        let state = &bound[store.id(&self.state_entry)?];
        match self.mode {
            TrendMode::Free => {
                if state.len() != self.len() * d {
                    return Err(TrendError::Length {
                        what: "free trend entry",
                        expected: self.len() * d,
                        got: state.len(),
                    });
                }
                let positions: Vec<Vec<_>> = state.chunks(d).map(<[_]>::to_vec).collect();
                let velocities = finite_difference_velocities(g, &positions, &dts);
                Ok(TrendPath {
                    positions,
                    velocities,
                    noise: Vec::new(),
                    dts,
                })
            }
            TrendMode::Cv => {
                let eps = &bound[store.id(self.noise_entry.as_deref().ok_or(TrendError::NotCv)?)?];
                if state.len() != 2 * d || eps.len() != dts.len() * d {
                    return Err(TrendError::Length {
                        what: "cv trend entries",
                        expected: 2 * d + dts.len() * d,
                        got: state.len() + eps.len(),
                    });
                }
                let z0 = TrendState {
                    z: state[..d].to_vec(),
                    zdot: state[d..].to_vec(),
                };
                let noise: Vec<_> = eps
                    .chunks(d)
                    .zip(&dts)
                    .map(|(e, &dt)| ProcessNoise { eps: e.to_vec(), dt })
                    .collect();
                let states = unroll(g, z0, &noise)?;
                let (positions, velocities) = states.into_iter().map(|s| (s.z, s.zdot)).unzip();
                Ok(TrendPath {
                    positions,
                    velocities,
                    noise,
                    dts,
                })
            }
        }
    }
}

/// The four objective terms and their weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<V> {
    pub obs: V,
    pub eps: V,
    pub v: V,
    pub p: V,
    pub total: V,
}

/// Numeric loss terms, as logged per epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub obs: f64,
    pub eps: f64,
    pub v: f64,
    pub p: f64,
    pub total: f64,
}

impl std::ops::AddAssign for LossValues {
    fn add_assign(&mut self, o: Self) {
        self.obs += o.obs;
        self.eps += o.eps;
        self.v += o.v;
        self.p += o.p;
        self.total += o.total;
    }
}

impl<V: Copy> LossTerms<V> {
    pub fn values<G: Graph<Value = V>>(&self, g: &G) -> LossValues {
        LossValues {
            obs: g.value(self.obs),
            eps: g.value(self.eps),
            v: g.value(self.v),
            p: g.value(self.p),
            total: g.value(self.total),
        }
    }

    /// Name and value of the first non-finite term, if any.
    pub fn first_non_finite<G: Graph<Value = V>>(&self, g: &G) -> Option<(&'static str, f64)> {
        let v = self.values(g);
        [
            ("L_obs", v.obs),
            ("L_eps", v.eps),
            ("L_v", v.v),
            ("L_p", v.p),
            ("total", v.total),
        ]
        .into_iter()
        .find(|(_, x)| !x.is_finite())
    }
}

/// Regularizers of one sequence. `L_eps` is zero in free mode.
pub fn regularizers<G: Graph>(
    g: &G,
    path: &TrendPath<G::Value>,
    weights: &LossWeights,
) -> Result<(G::Value, G::Value, G::Value), TrendError> {
    let eps = loss_eps(g, &path.noise, weights.sigma_eps2);
    let v = loss_v(g, &path.positions, &path.dts, weights.sigma_v2)?;
    let p = loss_p(g, &path.velocities);
    Ok((eps, v, p))
}

/// One observation as seen by the objective: precomputed features, action
/// and outcome.
pub struct Observation<'a, V> {
    pub features: &'a [V],
    pub action: f64,
    pub outcome: f64,
}

/// Combined objective for one sequence. `offsets`, when given, is added to
/// each position before it reaches the head (training-time augmentation).
pub fn total_loss<G: Graph>(
    g: &G,
    model: &Model,
    model_params: &Bound<G::Value>,
    observations: &[Observation<'_, G::Value>],
    path: &TrendPath<G::Value>,
    weights: &LossWeights,
    offsets: Option<&[Vec<f64>]>,
) -> Result<LossTerms<G::Value>, TrendError> {
    if observations.len() != path.positions.len() {
        return Err(TrendError::Length {
            what: "trend positions",
            expected: observations.len(),
            got: path.positions.len(),
        });
    }
    let mut nll = Vec::with_capacity(observations.len());
    for (i, (obs, z)) in observations.iter().zip(&path.positions).enumerate() {
        let shifted;
        let z_in: &[G::Value] = match offsets {
            Some(off) => {
                shifted = z
                    .iter()
                    .zip(&off[i])
                    .map(|(&zi, &o)| g.add_const(zi, o))
                    .collect::<Vec<_>>();
                &shifted
            }
            None => z,
        };
        let pred = model.forward_features(g, model_params, obs.features, z_in, obs.action)?;
        nll.push(gaussian_nll(g, &pred, obs.outcome));
    }
    let obs = g.sum(&nll);
    let (eps, v, p) = regularizers(g, path, weights)?;
    let parts = [
        g.scale(obs, weights.alpha),
        g.scale(eps, weights.beta),
        g.scale(v, weights.gamma),
        g.scale(p, weights.zeta),
    ];
    let total = g.sum(&parts);
    Ok(LossTerms {
        obs,
        eps,
        v,
        p,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(z: &[f64], zdot: &[f64]) -> TrendState {
        TrendState {
            z: z.to_vec(),
            zdot: zdot.to_vec(),
        }
    }

    #[test]
    fn transition_examples() {
        let s = transition_apply(
            &Eval,
            &state(&[0.0, 0.0], &[1.0, 0.0]),
            &ProcessNoise {
                eps: vec![0.0, 0.0],
                dt: 1.0,
            },
        );
        assert_eq!(s, state(&[1.0, 0.0], &[1.0, 0.0]));

        let still = state(&[0.3, -0.7], &[0.0, 0.0]);
        for dt in [0.1, 1.0, 17.0] {
            let s = transition_apply(
                &Eval,
                &still,
                &ProcessNoise {
                    eps: vec![0.0, 0.0],
                    dt,
                },
            );
            assert_eq!(s, still);
        }

        let s = transition_apply(
            &Eval,
            &state(&[0.0], &[1.0]),
            &ProcessNoise { eps: vec![2.0], dt: 0.5 },
        );
        assert_eq!(s, state(&[0.5], &[3.0]));
    }

    #[test]
    fn unroll_zero_noise_is_affine() {
        let times = [0.0, 0.7, 1.1, 2.5, 4.0, 4.2];
        let dts = time_steps(&times).unwrap();
        let z0 = state(&[0.2, -1.0], &[0.3, 0.05]);
        let noise: Vec<_> = dts
            .iter()
            .map(|&dt| ProcessNoise {
                eps: vec![0.0, 0.0],
                dt,
            })
            .collect();
        let states = unroll(&Eval, z0.clone(), &noise).unwrap();
        assert_eq!(states.len(), times.len());
        for (s, &t) in states.iter().zip(&times) {
            for k in 0..2 {
                let expected = z0.z[k] + (t - times[0]) * z0.zdot[k];
                assert!((s.z[k] - expected).abs() < 1e-12);
            }
        }
        assert_eq!(unroll(&Eval, z0.clone(), &[]).unwrap(), vec![z0]);
    }

    #[test]
    fn unroll_rejects_non_positive_dt() {
        let z0 = state(&[0.0], &[0.0]);
        let noise = [
            ProcessNoise { eps: vec![0.0], dt: 1.0 },
            ProcessNoise { eps: vec![0.0], dt: 0.0 },
        ];
        assert_eq!(
            unroll(&Eval, z0, &noise).unwrap_err(),
            TrendError::NonPositiveDt { index: 1, dt: 0.0 }
        );
    }

    #[test]
    fn unroll_matches_step_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 3;
        let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let noise: Vec<_> = (0..12)
            .map(|_| ProcessNoise {
                eps: (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                dt: rng.gen_range(0.1..2.0),
            })
            .collect();
        let states = unroll(&Eval, state(&z, &v), &noise).unwrap();
        // Independent loop over raw arrays.
        let (mut pz, mut pv) = (z.clone(), v.clone());
        for (i, n) in noise.iter().enumerate() {
            for k in 0..d {
                pz[k] += n.dt * pv[k];
                pv[k] += n.eps[k];
            }
            assert_eq!(states[i + 1].z, pz);
            assert_eq!(states[i + 1].zdot, pv);
        }
    }

    #[test]
    fn loss_eps_examples() {
        let zero = [ProcessNoise { eps: vec![0.0, 0.0], dt: 1.0 }];
        assert_eq!(loss_eps(&Eval, &zero, 1.0), 0.0);
        let one = [ProcessNoise { eps: vec![2.0, 0.0], dt: 2.0 }];
        assert!((loss_eps(&Eval, &one, 2.0) - 1.0).abs() < 1e-12);
        let a = loss_eps(&Eval, &one, 3.0);
        let b = loss_eps(&Eval, &one, 6.0);
        assert!((a - 2.0 * b).abs() < 1e-15);
    }

    #[test]
    fn loss_v_examples() {
        let c = vec![vec![0.4, 0.4]; 4];
        assert_eq!(loss_v(&Eval, &c, &[1.0, 1.0, 1.0], 1.0).unwrap(), 0.0);
        let one = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
        assert!((loss_v(&Eval, &one, &[1.0], 1.0).unwrap() - 1.0).abs() < 1e-12);
        let two = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![2.0, 0.0]];
        assert_eq!(
            loss_v(&Eval, &two, &[1.0, 1.0], 1.0).unwrap(),
            2.0 * loss_v(&Eval, &one, &[1.0], 1.0).unwrap()
        );
        assert!(matches!(
            loss_v(&Eval, &one, &[-1.0], 1.0),
            Err(TrendError::NonPositiveDt { .. })
        ));
        assert!(matches!(
            loss_v(&Eval, &one, &[1.0, 1.0], 1.0),
            Err(TrendError::Length { .. })
        ));
    }

    #[test]
    fn loss_p_examples() {
        let parallel = vec![vec![1.0, 1.0], vec![2.0, 2.0], vec![0.1, 0.1]];
        assert!(loss_p(&Eval, &parallel).abs() < 1e-12);
        let anti = vec![vec![1.0, 0.0], vec![-3.0, 0.0]];
        assert!((loss_p(&Eval, &anti) - 2.0).abs() < 1e-12);
        let ortho = vec![vec![1.0, 0.0], vec![0.0, 0.5]];
        assert!((loss_p(&Eval, &ortho) - 1.0).abs() < 1e-12);
        let degenerate = vec![vec![1.0, 0.0], vec![0.0, 0.0], vec![-1.0, 0.0]];
        assert_eq!(loss_p(&Eval, &degenerate), 0.0);
    }

    #[test]
    fn augmentation_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = [0.5, -0.5];
        assert_eq!(add_trend_noise(&z, 0.0, &mut rng), z.to_vec());
        let a = add_trend_noise(&z, 0.1, &mut ChaCha8Rng::seed_from_u64(4));
        let b = add_trend_noise(&z, 0.1, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);

        let sigma = 0.05;
        let n = 100_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let out = add_trend_noise(&[1.0], sigma, &mut rng);
            let d = out[0] - 1.0;
            sum += d;
            sq += d * d;
        }
        let mean = sum / n as f64;
        let std = (sq / n as f64 - mean * mean).sqrt();
        assert!(std > 0.99 * sigma && std < 1.01 * sigma, "{std}");
    }

    #[test]
    fn trajectory_round_trips_through_store() {
        let traj = TrendTrajectory::Cv {
            times: vec![0.0, 1.0, 2.5],
            z0: state(&[0.1, 0.2], &[0.0, 0.3]),
            noise: vec![vec![0.1, 0.0], vec![0.0, -0.2]],
        };
        let mut store = ParamStore::new();
        let seq = SequenceTrend::register("s0", &traj, &mut store, true).unwrap();
        assert_eq!(seq.trajectory(&store, 2).unwrap(), traj);

        let tape = Tape::new();
        let bound = store.bind(&tape);
        let path = seq.path(&tape, &store, &bound, 2).unwrap();
        let numeric = traj.positions().unwrap();
        for (p, q) in path.positions.iter().zip(&numeric) {
            let vals: Vec<f64> = p.iter().map(|&v| tape.value(v)).collect();
            assert_eq!(&vals, q);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vec2() -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-5.0f64..5.0, 2)
        }

        proptest! {
            #[test]
            fn regularizers_are_nonnegative(
                pos in prop::collection::vec(vec2(), 2..8),
                eps in prop::collection::vec(vec2(), 1..8),
                dt in 0.01f64..3.0,
            ) {
                let dts = vec![dt; pos.len() - 1];
                prop_assert!(loss_v(&Eval, &pos, &dts, 0.7).unwrap() >= 0.0);
                prop_assert!(loss_p(&Eval, &pos) >= -1e-12);
                let noise: Vec<_> = eps.into_iter().map(|e| ProcessNoise { eps: e, dt }).collect();
                prop_assert!(loss_eps(&Eval, &noise, 0.3) >= 0.0);
            }

            #[test]
            fn loss_p_scale_invariant(
                vels in prop::collection::vec(vec2(), 2..8),
                log_scales in prop::collection::vec(-3.0f64..3.0, 8),
            ) {
                prop_assume!(vels.iter().all(|v| (v[0] * v[0] + v[1] * v[1]).sqrt() > 1e-3));
                let scaled: Vec<Vec<f64>> = vels
                    .iter()
                    .zip(&log_scales)
                    .map(|(v, s)| v.iter().map(|x| x * 10f64.powf(*s)).collect())
                    .collect();
                let a = loss_p(&Eval, &vels);
                let b = loss_p(&Eval, &scaled);
                prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
            }
        }
    }
}
