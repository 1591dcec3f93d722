//! Named parameter storage with gradient slots and an Adam optimizer.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{Graph, Tape, Var};

pub const PARAMS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("duplicate parameter name `{0}`")]
    Duplicate(String),
    #[error("unknown parameter `{0}`")]
    Unknown(String),
    #[error("non-finite gradient in parameter `{name}` at offset {offset}")]
    NonFiniteGradient { name: String, offset: usize },
    #[error("unsupported parameter format version {0}")]
    Version(u32),
    #[error("parameter `{name}` has inconsistent slot lengths")]
    Malformed { name: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub value: Vec<f64>,
    pub trainable: bool,
    /// Multiplies the optimizer learning rate for this entry.
    #[serde(default = "unit_scale")]
    pub lr_scale: f64,
    /// Adam first moment.
    pub m: Vec<f64>,
    /// Adam second moment.
    pub v: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
}

fn unit_scale() -> f64 {
    1.0
}

impl ParamEntry {
    fn new(name: String, value: Vec<f64>, trainable: bool) -> Self {
        let n = value.len();
        Self {
            name,
            value,
            trainable,
            lr_scale: 1.0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }
}

/// Ordered collection of parameter vectors. Entry order is insertion order
/// and is preserved through checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
    step: u64,
}

/// Serialized form of a [`ParamStore`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamStoreFile {
    pub format_version: u32,
    pub step: u64,
    pub entries: Vec<ParamEntry>,
}

/// Graph values bound to each store entry, indexed like the store.
pub type Bound<V> = Vec<Vec<V>>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: Vec<f64>,
        trainable: bool,
    ) -> Result<usize, ParamError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(ParamError::Duplicate(name));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry::new(name, value, trainable));
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<usize, ParamError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn entry(&self, id: usize) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: usize) -> &[f64] {
        &self.entries[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut [f64] {
        &mut self.entries[id].value
    }

    pub fn grad(&self, id: usize) -> &[f64] {
        &self.entries[id].grad
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_trainable(&mut self, id: usize, trainable: bool) {
        self.entries[id].trainable = trainable;
    }

    /// Sets the trainable flag on every entry whose name starts with `prefix`.
    pub fn set_lr_scale(&mut self, id: usize, scale: f64) {
        self.entries[id].lr_scale = scale;
    }

    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.trainable = trainable;
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_len(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Clears Adam moments and the step counter.
    pub fn reset_optimizer(&mut self) {
        self.step = 0;
        for e in &mut self.entries {
            e.m.iter_mut().for_each(|x| *x = 0.0);
            e.v.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Binds every entry on `g`, honouring the trainable flags.
    pub fn bind<G: Graph>(&self, g: &G) -> Bound<G::Value> {
        self.entries
            .iter()
            .map(|e| e.value.iter().map(|&v| g.parameter(v, e.trainable)).collect())
            .collect()
    }

    /// Binds every entry as a constant regardless of its flag.
    pub fn bind_frozen<G: Graph>(&self, g: &G) -> Bound<G::Value> {
        self.entries
            .iter()
            .map(|e| g.constants(&e.value))
            .collect()
    }

    /// Adds the tape gradients of trainable bound leaves into the gradient
    /// slots.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound<Var>) {
        for (e, vars) in self.entries.iter_mut().zip(bound) {
            if !e.trainable {
                continue;
            }
            for (g, &var) in e.grad.iter_mut().zip(vars) {
                *g += tape.grad(var);
            }
        }
    }

    /// One Adam update of every trainable entry. The step is validated before
    /// any value changes, so a non-finite gradient leaves the store intact.
    pub fn adam_step(&mut self, adam: &Adam) -> Result<(), ParamError> {
        for e in self.entries.iter().filter(|e| e.trainable) {
            if let Some(offset) = e.grad.iter().position(|g| !g.is_finite()) {
                return Err(ParamError::NonFiniteGradient {
                    name: e.name.clone(),
                    offset,
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - adam.beta1.powi(t);
        let bc2 = 1.0 - adam.beta2.powi(t);
        for e in self.entries.iter_mut().filter(|e| e.trainable) {
            let lr = adam.lr * e.lr_scale;
            for i in 0..e.value.len() {
                let g = e.grad[i];
                e.m[i] = adam.beta1 * e.m[i] + (1.0 - adam.beta1) * g;
                e.v[i] = adam.beta2 * e.v[i] + (1.0 - adam.beta2) * g * g;
                let m_hat = e.m[i] / bc1;
                let v_hat = e.v[i] / bc2;
                e.value[i] -= lr * m_hat / (v_hat.sqrt() + adam.eps);
            }
        }
        Ok(())
    }

    /// SHA-256 over the names and value bytes of entries selected by `keep`.
    pub fn digest(&self, keep: impl Fn(&ParamEntry) -> bool) -> String {
        let mut hasher = Sha256::new();
        for e in self.entries.iter().filter(|e| keep(e)) {
            hasher.update((e.name.len() as u64).to_le_bytes());
            hasher.update(e.name.as_bytes());
            hasher.update((e.value.len() as u64).to_le_bytes());
            for v in &e.value {
                hasher.update(v.to_le_bytes());
            }
        }
        hex(&hasher.finalize())
    }

    /// Copies the selected entries (values, flags, moments) into a new store.
    pub fn subset(&self, keep: impl Fn(&ParamEntry) -> bool) -> ParamStore {
        let mut out = ParamStore::new();
        out.step = self.step;
        for e in self.entries.iter().filter(|e| keep(e)) {
            out.index.insert(e.name.clone(), out.entries.len());
            out.entries.push(e.clone());
        }
        out
    }

    pub fn to_file(&self) -> ParamStoreFile {
        ParamStoreFile {
            format_version: PARAMS_FORMAT_VERSION,
            step: self.step,
            entries: self.entries.clone(),
        }
    }

    pub fn from_file(file: ParamStoreFile) -> Result<Self, ParamError> {
        if file.format_version != PARAMS_FORMAT_VERSION {
            return Err(ParamError::Version(file.format_version));
        }
        let mut store = ParamStore {
            step: file.step,
            ..Default::default()
        };
        for mut e in file.entries {
            if e.m.len() != e.value.len() || e.v.len() != e.value.len() {
                return Err(ParamError::Malformed { name: e.name });
            }
            if store.index.contains_key(&e.name) {
                return Err(ParamError::Duplicate(e.name));
            }
            e.grad = vec![0.0; e.value.len()];
            store.index.insert(e.name.clone(), store.entries.len());
            store.entries.push(e);
        }
        Ok(store)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.insert("w", vec![1.0], true).unwrap();
        store.entries[id].grad[0] = 1.0;
        store.adam_step(&Adam::default()).unwrap();
        // m_hat = 1, v_hat = 1 at t = 1.
        let expected = 1.0 - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((store.value(id)[0] - expected).abs() < 1e-15);
        assert!((store.value(id)[0] - 0.999).abs() < 1e-10);
    }

    #[test]
    fn lr_scale_shrinks_the_step() {
        let mut store = ParamStore::new();
        let id = store.insert("w", vec![1.0], true).unwrap();
        store.set_lr_scale(id, 0.1);
        store.entries[id].grad[0] = 1.0;
        store.adam_step(&Adam::default()).unwrap();
        assert!((store.value(id)[0] - 0.9999).abs() < 1e-10);
    }

    #[test]
    fn zero_gradient_leaves_values() {
        let mut store = ParamStore::new();
        let id = store.insert("w", vec![0.5, -2.0], true).unwrap();
        for _ in 0..5 {
            store.adam_step(&Adam::default()).unwrap();
        }
        assert_eq!(store.value(id), &[0.5, -2.0]);
        assert_eq!(store.step(), 5);
    }

    #[test]
    fn frozen_entries_are_untouched() {
        let mut store = ParamStore::new();
        let f = store.insert("frozen", vec![3.0], false).unwrap();
        let t = store.insert("live", vec![3.0], true).unwrap();
        for _ in 0..10 {
            store.entries[f].grad[0] = 7.0;
            store.entries[t].grad[0] = 7.0;
            store.adam_step(&Adam::default()).unwrap();
        }
        assert_eq!(store.value(f), &[3.0]);
        assert_eq!(store.entry(f).m, vec![0.0]);
        assert!(store.value(t)[0] < 3.0);
    }

    #[test]
    fn non_finite_gradient_aborts_before_update() {
        let mut store = ParamStore::new();
        let a = store.insert("a", vec![1.0], true).unwrap();
        let b = store.insert("b", vec![1.0, 2.0], true).unwrap();
        store.entries[a].grad[0] = 1.0;
        store.entries[b].grad[1] = f64::NAN;
        let err = store.adam_step(&Adam::default()).unwrap_err();
        assert_eq!(
            err,
            ParamError::NonFiniteGradient {
                name: "b".into(),
                offset: 1
            }
        );
        assert_eq!(store.value(a), &[1.0]);
        assert_eq!(store.step(), 0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", vec![1.0], true).unwrap();
        assert!(matches!(
            store.insert("w", vec![1.0], true),
            Err(ParamError::Duplicate(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut store = ParamStore::new();
        store.insert("a", vec![0.1, 1.0 / 3.0], true).unwrap();
        store.insert("b", vec![-7e-300], false).unwrap();
        store.entries[0].grad = vec![0.3, -0.2];
        store.adam_step(&Adam::default()).unwrap();
        let json = serde_json::to_string(&store.to_file()).unwrap();
        let back = ParamStore::from_file(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.entries()[0].value, store.entries()[0].value);
        assert_eq!(back.entries()[0].v, store.entries()[0].v);
        assert_eq!(back.step(), 1);
        assert_eq!(serde_json::to_string(&back.to_file()).unwrap(), json);
    }

    #[test]
    fn digest_tracks_values() {
        let mut store = ParamStore::new();
        let a = store.insert("G.w", vec![1.0], true).unwrap();
        store.insert("trend.z", vec![1.0], true).unwrap();
        let keep = |e: &ParamEntry| e.name.starts_with("G.");
        let before = store.digest(keep);
        store.value_mut(1)[0] = 2.0;
        assert_eq!(store.digest(keep), before);
        store.value_mut(a)[0] = 1.0 + f64::EPSILON;
        assert_ne!(store.digest(keep), before);
    }
}
