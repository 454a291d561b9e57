use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named, shaped, row-major array of learnable values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }
}

/// Adam hyper-parameters. Defaults are the usual 1e-3 / 0.9 / 0.999 / 1e-8.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// All learnable arrays of a model plus the optimizer moments.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
    adam: AdamState,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new array. Panics on a duplicate name or a size/shape mismatch,
    /// which are programming errors in model construction.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> ParamId {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape mismatch for {name}");
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.adam.m.push(vec![0.0; data.len()]);
        self.adam.v.push(vec![0.0; data.len()]);
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, shape: shape.to_vec(), data });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].data
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn total_size(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn adam_state(&self) -> &AdamState {
        &self.adam
    }

    /// Replaces an array's values by name, checking the shape.
    pub fn load(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        let p = &mut self.params[id.0];
        if p.shape != shape || p.data.len() != data.len() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, checkpoint holds {shape:?}",
                p.shape
            )));
        }
        p.data = data;
        Ok(())
    }

    pub fn set_adam_state(&mut self, state: AdamState) -> Result<()> {
        let ok = state.m.len() == self.params.len()
            && state.v.len() == self.params.len()
            && self
                .params
                .iter()
                .zip(state.m.iter().zip(&state.v))
                .all(|(p, (m, v))| m.len() == p.data.len() && v.len() == p.data.len());
        if !ok {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        self.adam = state;
        Ok(())
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients { params: self.params.iter().map(|p| vec![0.0; p.data.len()]).collect() }
    }

    /// One bias-corrected Adam update. Any non-finite gradient aborts before
    /// anything is modified.
    pub fn adam_step(&mut self, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
        assert_eq!(grads.params.len(), self.params.len());
        for (p, g) in self.params.iter().zip(&grads.params) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NanGradient { param: p.name.clone() });
            }
        }
        self.adam.step += 1;
        let t = self.adam.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, p) in self.params.iter_mut().enumerate() {
            let (m, v) = (&mut self.adam.m[i], &mut self.adam.v[i]);
            for (k, w) in p.data.iter_mut().enumerate() {
                let g = grads.params[i][k];
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Gradient arrays matching a [`ParameterStore`] entry for entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub(crate) params: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.params.iter().map(Vec::as_slice)
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.params.iter_mut().flatten() {
            *v *= factor;
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.params.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            self.scale(max_norm / norm);
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut ps = ParameterStore::new();
        let id = ps.add("w", &[3], vec![1.0, -2.0, 0.5]);
        let g = ps.zero_gradients();
        ps.adam_step(&g, &AdamConfig::default()).unwrap();
        assert_eq!(ps.data(id), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = 1, v̂ = 1 at t = 1, so the step is lr / (1 + eps).
        let mut ps = ParameterStore::new();
        let id = ps.add("w", &[1], vec![1.0]);
        let mut g = ps.zero_gradients();
        g.get_mut(id)[0] = 1.0;
        let cfg = AdamConfig::default();
        ps.adam_step(&g, &cfg).unwrap();
        let expected = 1.0 - cfg.lr / (1.0 + cfg.eps);
        assert!((ps.data(id)[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut ps = ParameterStore::new();
        let w0 = [0.6, -0.8];
        let id = ps.add("w", &[2], w0.to_vec());
        let cfg = AdamConfig { lr: 1e-2, ..AdamConfig::default() };
        for _ in 0..500 {
            let mut g = ps.zero_gradients();
            for (gi, wi) in g.get_mut(id).iter_mut().zip(ps.data(id)) {
                *gi = 2.0 * wi;
            }
            ps.adam_step(&g, &cfg).unwrap();
        }
        let norm = ps.data(id).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-2, "norm {norm}");
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut ps = ParameterStore::new();
        ps.add("ok", &[1], vec![0.0]);
        let bad = ps.add("enc.bad", &[2], vec![0.0, 0.0]);
        let mut g = ps.zero_gradients();
        g.get_mut(bad)[1] = f64::NAN;
        match ps.adam_step(&g, &AdamConfig::default()) {
            Err(Error::NanGradient { param }) => assert_eq!(param, "enc.bad"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(ps.adam_state().step, 0);
    }

    #[test]
    fn clipping() {
        let mut ps = ParameterStore::new();
        let id = ps.add("w", &[2], vec![0.0, 0.0]);
        let mut g = ps.zero_gradients();
        g.get_mut(id).copy_from_slice(&[30.0, 40.0]);
        assert_eq!(g.clip_global_norm(5.0), 50.0);
        assert!((g.global_norm() - 5.0).abs() < 1e-12);
    }
}
