//! Base probabilistic regression model: a feature extractor F, a head G on
//! `[f; z]` producing mean and variance coefficients, and an
//! action-conditioned Gaussian output.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{softplus_f64, Eval, Graph};
use crate::params::{Bound, ParamError, ParamStore};

pub const FEATURE_PREFIX: &str = "F.";
pub const HEAD_PREFIX: &str = "G.";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("{what}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Identity,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveLink {
    Softplus,
    Exp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub feature_dim: usize,
    /// Dimension d of the trend position.
    pub trend_dim: usize,
    /// Number K of polynomial action-basis terms.
    pub basis_order: usize,
    pub feature_extractor: FeatureKind,
    pub feature_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub positive_link: PositiveLink,
    pub variance_floor: f64,
    /// Keep F trainable during the trend training phase.
    pub train_feature_extractor: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 2,
            feature_dim: 8,
            trend_dim: 2,
            basis_order: 3,
            feature_extractor: FeatureKind::Mlp,
            feature_hidden: vec![16],
            head_hidden: vec![32, 32],
            positive_link: PositiveLink::Softplus,
            variance_floor: 1e-4,
            train_feature_extractor: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), (String, String)> {
        let dims = [
            ("input_dim", self.input_dim),
            ("feature_dim", self.feature_dim),
            ("trend_dim", self.trend_dim),
            ("basis_order", self.basis_order),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err((name.into(), "must be at least 1".into()));
            }
        }
        if self.feature_extractor == FeatureKind::Identity && self.feature_dim != self.input_dim {
            return Err((
                "feature_dim".into(),
                "identity feature extractor requires feature_dim == input_dim".into(),
            ));
        }
        if self.feature_hidden.iter().chain(&self.head_hidden).any(|&h| h == 0) {
            return Err(("head_hidden".into(), "hidden sizes must be at least 1".into()));
        }
        if !(self.variance_floor >= 0.0 && self.variance_floor.is_finite()) {
            return Err(("variance_floor".into(), "must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Number of head outputs: K mean and K variance coefficients.
    pub fn head_outputs(&self) -> usize {
        2 * self.basis_order
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Activation {
    Tanh,
    Linear,
}

#[derive(Clone, Debug)]
struct Dense {
    weight: usize,
    bias: usize,
    inputs: usize,
    outputs: usize,
    activation: Activation,
}

impl Dense {
    fn forward<G: Graph>(&self, g: &G, p: &Bound<G::Value>, input: &[G::Value]) -> Vec<G::Value> {
        let w = &p[self.weight];
        let b = &p[self.bias];
        (0..self.outputs)
            .map(|j| {
                let row = &w[j * self.inputs..(j + 1) * self.inputs];
                let pre = g.add(g.dot(row, input), b[j]);
                match self.activation {
                    Activation::Tanh => g.tanh(pre),
                    Activation::Linear => pre,
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    fn shapes(input: usize, hidden: &[usize], output: usize, last: Activation) -> Vec<(usize, usize, Activation)> {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        let n = sizes.len() - 1;
        (0..n)
            .map(|l| {
                let act = if l + 1 == n { last } else { Activation::Tanh };
                (sizes[l], sizes[l + 1], act)
            })
            .collect()
    }

    fn register(
        prefix: &str,
        shapes: &[(usize, usize, Activation)],
        store: &mut ParamStore,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Result<Self, ParamError> {
        let mut layers = Vec::with_capacity(shapes.len());
        for (l, &(inputs, outputs, activation)) in shapes.iter().enumerate() {
            let weight = store.insert(
                format!("{prefix}{l}.weight"),
                init_weights(inputs, outputs, rng),
                trainable,
            )?;
            let bias = store.insert(format!("{prefix}{l}.bias"), vec![0.0; outputs], trainable)?;
            layers.push(Dense {
                weight,
                bias,
                inputs,
                outputs,
                activation,
            });
        }
        Ok(Mlp { layers })
    }

    fn attach(prefix: &str, shapes: &[(usize, usize, Activation)], store: &ParamStore) -> Result<Self, ModelError> {
        let mut layers = Vec::with_capacity(shapes.len());
        for (l, &(inputs, outputs, activation)) in shapes.iter().enumerate() {
            let weight = store.id(&format!("{prefix}{l}.weight"))?;
            let bias = store.id(&format!("{prefix}{l}.bias"))?;
            if store.value(weight).len() != inputs * outputs {
                return Err(ModelError::DimensionMismatch {
                    what: "layer weight",
                    expected: inputs * outputs,
                    got: store.value(weight).len(),
                });
            }
            if store.value(bias).len() != outputs {
                return Err(ModelError::DimensionMismatch {
                    what: "layer bias",
                    expected: outputs,
                    got: store.value(bias).len(),
                });
            }
            layers.push(Dense {
                weight,
                bias,
                inputs,
                outputs,
                activation,
            });
        }
        Ok(Mlp { layers })
    }

    fn forward<G: Graph>(&self, g: &G, p: &Bound<G::Value>, input: Vec<G::Value>) -> Vec<G::Value> {
        self.layers
            .iter()
            .fold(input, |h, layer| layer.forward(g, p, &h))
    }
}

// Normal with variance 1 / fan_in.
fn init_weights(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, (1.0 / inputs as f64).sqrt()).expect("positive std");
    (0..inputs * outputs).map(|_| normal.sample(rng)).collect()
}

/// Mean and variance coefficients over the action basis.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<V> {
    pub theta: Vec<V>,
    pub tau: Vec<V>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrediction<V = f64> {
    pub mu: V,
    pub sigma2: V,
}

/// Polynomial action basis `(1, a, a^2, ..., a^(K-1))`.
pub fn action_basis(a: f64, order: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(order);
    let mut p = 1.0;
    for _ in 0..order {
        out.push(p);
        p *= a;
    }
    out
}

/// `(y - mu)^2 / sigma2 + log(2 pi sigma2)`; no one-half factor.
pub fn gaussian_nll<G: Graph>(g: &G, pred: &GaussianPrediction<G::Value>, y: f64) -> G::Value {
    let y = g.constant(y);
    let r = g.sub(y, pred.mu);
    let quad = g.div(g.square(r), pred.sigma2);
    let scaled = g.scale(pred.sigma2, 2.0 * std::f64::consts::PI);
    g.add(quad, g.log(scaled))
}

/// The model's architecture with the parameter-store ids of its layers.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    feature: Option<Mlp>,
    head: Mlp,
}

impl Model {
    fn feature_shapes(cfg: &ModelConfig) -> Vec<(usize, usize, Activation)> {
        Mlp::shapes(cfg.input_dim, &cfg.feature_hidden, cfg.feature_dim, Activation::Tanh)
    }

    fn head_shapes(cfg: &ModelConfig) -> Vec<(usize, usize, Activation)> {
        Mlp::shapes(
            cfg.feature_dim + cfg.trend_dim,
            &cfg.head_hidden,
            cfg.head_outputs(),
            Activation::Linear,
        )
    }

    /// Registers freshly initialized F and G parameters in `store`. F starts
    /// trainable so it can be pretrained; G is always trainable.
    pub fn init(cfg: ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self, ModelError> {
        cfg.validate().map_err(|(f, m)| ModelError::Config(format!("{f}: {m}")))?;
        let feature = match cfg.feature_extractor {
            FeatureKind::Identity => None,
            FeatureKind::Mlp => Some(Mlp::register(
                FEATURE_PREFIX,
                &Self::feature_shapes(&cfg),
                store,
                true,
                rng,
            )?),
        };
        let head = Mlp::register(HEAD_PREFIX, &Self::head_shapes(&cfg), store, true, rng)?;
        Ok(Model {
            config: cfg,
            feature,
            head,
        })
    }

    /// Looks up existing F and G entries by name.
    pub fn attach(cfg: ModelConfig, store: &ParamStore) -> Result<Self, ModelError> {
        cfg.validate().map_err(|(f, m)| ModelError::Config(format!("{f}: {m}")))?;
        let feature = match cfg.feature_extractor {
            FeatureKind::Identity => None,
            FeatureKind::Mlp => Some(Mlp::attach(FEATURE_PREFIX, &Self::feature_shapes(&cfg), store)?),
        };
        let head = Mlp::attach(HEAD_PREFIX, &Self::head_shapes(&cfg), store)?;
        Ok(Model {
            config: cfg,
            feature,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn has_feature_params(&self) -> bool {
        self.feature.is_some()
    }

    pub fn feature_extract<G: Graph>(
        &self,
        g: &G,
        p: &Bound<G::Value>,
        x: &[f64],
    ) -> Result<Vec<G::Value>, ModelError> {
        if x.len() != self.config.input_dim {
            return Err(ModelError::DimensionMismatch {
                what: "input x",
                expected: self.config.input_dim,
                got: x.len(),
            });
        }
        let input = g.constants(x);
        Ok(match &self.feature {
            None => input,
            Some(mlp) => mlp.forward(g, p, input),
        })
    }

    /// Features evaluated directly on `f64`.
    pub fn features(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.feature_extract(&Eval, &store.bind(&Eval), x)
    }

    pub fn head_forward<G: Graph>(
        &self,
        g: &G,
        p: &Bound<G::Value>,
        f: &[G::Value],
        z: &[G::Value],
    ) -> Result<HeadParams<G::Value>, ModelError> {
        if f.len() != self.config.feature_dim {
            return Err(ModelError::DimensionMismatch {
                what: "feature vector",
                expected: self.config.feature_dim,
                got: f.len(),
            });
        }
        if z.len() != self.config.trend_dim {
            return Err(ModelError::DimensionMismatch {
                what: "trend position",
                expected: self.config.trend_dim,
                got: z.len(),
            });
        }
        let mut input = Vec::with_capacity(f.len() + z.len());
        input.extend_from_slice(f);
        input.extend_from_slice(z);
        let mut out = self.head.forward(g, p, input);
        let tau = out.split_off(self.config.basis_order);
        Ok(HeadParams { theta: out, tau })
    }

    pub fn predict<G: Graph>(&self, g: &G, hp: &HeadParams<G::Value>, a: f64) -> GaussianPrediction<G::Value> {
        let phi = g.constants(&action_basis(a, self.config.basis_order));
        let mu = g.dot(&hp.theta, &phi);
        let u = g.dot(&hp.tau, &phi);
        let positive = match self.config.positive_link {
            PositiveLink::Softplus => g.softplus(u),
            PositiveLink::Exp => g.exp(u),
        };
        let sigma2 = g.add_const(positive, self.config.variance_floor);
        GaussianPrediction { mu, sigma2 }
    }

    /// Full composition on precomputed features.
    pub fn forward_features<G: Graph>(
        &self,
        g: &G,
        p: &Bound<G::Value>,
        f: &[G::Value],
        z: &[G::Value],
        a: f64,
    ) -> Result<GaussianPrediction<G::Value>, ModelError> {
        let hp = self.head_forward(g, p, f, z)?;
        Ok(self.predict(g, &hp, a))
    }

    /// Prediction for one input on `f64`.
    pub fn predict_f64(
        &self,
        store: &ParamStore,
        x: &[f64],
        a: f64,
        z: &[f64],
    ) -> Result<GaussianPrediction, ModelError> {
        let p = store.bind(&Eval);
        let f = self.feature_extract(&Eval, &p, x)?;
        self.forward_features(&Eval, &p, &f, z, a)
    }
}

/// Positive link on `f64`, for callers outside a graph.
pub fn positive_link_f64(link: PositiveLink, u: f64, floor: f64) -> f64 {
    match link {
        PositiveLink::Softplus => softplus_f64(u) + floor,
        PositiveLink::Exp => u.exp() + floor,
    }
}
