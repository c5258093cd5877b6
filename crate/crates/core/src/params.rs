//! Named parameter tables, tape bindings and the Adam optimizer.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered map from parameter name to value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Entries whose names start with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> Self {
        let params = self
            .params
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect();
        Self { params }
    }

    /// Copy with every name prefixed.
    pub fn with_prefix(&self, prefix: &str) -> Self {
        let params = self.params.iter().map(|(k, v)| (format!("{prefix}{k}"), v.clone())).collect();
        Self { params }
    }

    pub fn extend(&mut self, other: Self) {
        self.params.extend(other.params);
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Zero tensors with the same shapes.
    pub fn zeros_like(&self) -> Self {
        let params = self.params.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.rows(), v.cols()))).collect();
        Self { params }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for &x in t.data() {
                h.update(x.to_f64_lossy().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn global_norm(&self) -> f64 {
        self.params.values().map(|t| t.sq_norm().to_f64_lossy()).sum::<f64>().sqrt()
    }

    /// Largest absolute entry over all tensors.
    pub fn max_abs(&self) -> f64 {
        self.params.values().map(|t| t.max_abs().to_f64_lossy()).fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut m = 0.0f64;
        for (k, v) in &self.params {
            let o = other.get(k).expect("parameter missing from comparison store");
            m = m.max(v.max_abs_diff(o).to_f64_lossy());
        }
        m
    }
}

/// Parameters of a [`ParamStore`] recorded as leaves on a tape.
pub struct Bound<'t, T> {
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    /// Bind every parameter; those for which `trainable` returns false become constants.
    pub fn new(tape: &'t Tape<T>, store: &ParamStore<T>, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = store
            .iter()
            .map(|(name, value)| (name.clone(), tape.leaf(value.clone(), trainable(name))))
            .collect();
        Self { vars }
    }

    pub fn trainable(tape: &'t Tape<T>, store: &ParamStore<T>) -> Self {
        Self::new(tape, store, |_| true)
    }

    pub fn frozen(tape: &'t Tape<T>, store: &ParamStore<T>) -> Self {
        Self::new(tape, store, |_| false)
    }

    /// Stop-gradient view of every parameter.
    pub fn detached(&self) -> Self {
        Self { vars: self.vars.iter().map(|(k, v)| (k.clone(), v.detach())).collect() }
    }

    pub fn get(&self, name: &str) -> Var<'t, T> {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` not bound"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'t, T>> {
        self.vars.get(name).copied()
    }

    /// Gradients of the trainable parameters.
    pub fn grads(&self, grads: &Gradients<T>) -> ParamStore<T> {
        let params = self
            .vars
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(k, v)| (k.clone(), grads.get_or_zeros(*v)))
            .collect();
        ParamStore { params }
    }

    /// Gradients for every bound parameter, zeros for frozen or unreachable ones.
    pub fn all_grads(&self, grads: &Gradients<T>) -> ParamStore<T> {
        let params = self.vars.iter().map(|(k, v)| (k.clone(), grads.get_or_zeros(*v))).collect();
        ParamStore { params }
    }
}

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clip applied before the update; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0) }
    }
}

/// Adam with bias correction. State is created lazily per parameter name.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    steps: u64,
    m: ParamStore<T>,
    v: ParamStore<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, steps: 0, m: ParamStore::new(), v: ParamStore::new() }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update to every parameter present in `grads`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>) {
        self.steps += 1;
        let c = &self.config;
        let clip = match c.clip_norm {
            Some(max) => {
                let norm = grads.global_norm();
                if norm > max && norm > 0.0 {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(c.lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(c.eps);
        let clip = T::lit(clip);
        for (name, g) in grads.iter() {
            let Some(p) = params.get_mut(name) else { continue };
            if !self.m.contains(name) {
                self.m.insert(name.clone(), Tensor::zeros(g.rows(), g.cols()));
                self.v.insert(name.clone(), Tensor::zeros(g.rows(), g.cols()));
            }
            let m = self.m.get_mut(name).expect("moment present");
            let v = self.v.get_mut(name).expect("moment present");
            for (((pi, &gi), mi), vi) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut())
            {
                let gi = gi * clip;
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *pi -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut params = ParamStore::<f64>::new();
        params.insert("x", Tensor::from_vec(1, 2, vec![3.0, -2.0]));
        let mut opt = Adam::new(AdamConfig { lr: 0.1, clip_norm: None, ..Default::default() });
        for _ in 0..500 {
            let tape = Tape::new();
            let bound = Bound::trainable(&tape, &params);
            let loss = bound.get("x").sum_sq();
            let g = tape.backward(loss);
            let grads = bound.grads(&g);
            opt.step(&mut params, &grads);
        }
        assert!(params.get("x").unwrap().max_abs() < 1e-3);
    }

    #[test]
    fn frozen_bindings_produce_no_trainable_grads() {
        let mut params = ParamStore::<f64>::new();
        params.insert("a", Tensor::scalar(1.0));
        params.insert("b", Tensor::scalar(2.0));
        let tape = Tape::new();
        let bound = Bound::new(&tape, &params, |n| n == "a");
        let loss = bound.get("a").mul(bound.get("b"));
        let g = tape.backward(loss);
        let grads = bound.grads(&g);
        assert_eq!(grads.len(), 1);
        assert_eq!(grads.get("a").unwrap().item(), 2.0);
        assert_eq!(bound.all_grads(&g).get("b").unwrap().item(), 0.0);
    }

    #[test]
    fn fingerprint_tracks_values() {
        let mut p = ParamStore::<f32>::new();
        p.insert("w", Tensor::zeros(2, 2));
        let before = p.fingerprint();
        p.get_mut("w").unwrap().set(0, 0, 1.0);
        assert_ne!(before, p.fingerprint());
    }
}
