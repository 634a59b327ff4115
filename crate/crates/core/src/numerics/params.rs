use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

static NEXT_SET_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a [`ParameterSet`] inside a graph. Clones receive a fresh id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SetId(u64);

impl SetId {
    fn fresh() -> Self {
        SetId(NEXT_SET_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// Index of a parameter inside its set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameters plus the Adam moments that belong to them.
///
/// Each set is owned by exactly one optimizer, which is how the three
/// hierarchical layers keep disjoint parameter partitions.
#[derive(Debug)]
pub struct ParameterSet {
    id: SetId,
    names: Vec<String>,
    lookup: HashMap<String, usize>,
    tensors: Vec<Tensor>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Clone for ParameterSet {
    fn clone(&self) -> Self {
        Self {
            id: SetId::fresh(),
            names: self.names.clone(),
            lookup: self.lookup.clone(),
            tensors: self.tensors.clone(),
            m: self.m.clone(),
            v: self.v.clone(),
            step: self.step,
        }
    }
}

impl Default for ParameterSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        Self {
            id: SetId::fresh(),
            names: Vec::new(),
            lookup: HashMap::new(),
            tensors: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn id(&self) -> SetId {
        self.id
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter `{name}`")));
        }
        let idx = self.tensors.len();
        self.m.push(vec![0.0; tensor.len()]);
        self.v.push(vec![0.0; tensor.len()]);
        self.tensors.push(tensor);
        self.lookup.insert(name.clone(), idx);
        self.names.push(name);
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.find(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub(crate) fn moments(&self, id: ParamId) -> (&[f64], &[f64]) {
        (&self.m[id.0], &self.v[id.0])
    }

    pub(crate) fn restore_state(
        &mut self,
        id: ParamId,
        data: Vec<f64>,
        m: Vec<f64>,
        v: Vec<f64>,
    ) -> Result<()> {
        let n = self.tensors[id.0].len();
        if data.len() != n || m.len() != n || v.len() != n {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` expects {n} values",
                self.names[id.0]
            )));
        }
        self.tensors[id.0].data_mut().copy_from_slice(&data);
        self.m[id.0] = m;
        self.v[id.0] = v;
        Ok(())
    }

    pub(crate) fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    /// Zeroes every parameter; used for hand-checkable configurations.
    pub fn fill(&mut self, value: f64) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|x| *x = value);
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Adds the gradients recorded for this set in `grads`.
    pub fn accumulate(&mut self, grads: &crate::numerics::Gradients) -> Result<()> {
        for (idx, g) in grads.params_of(self.id) {
            self.tensors[idx].accumulate_grad(g)?;
        }
        Ok(())
    }

    /// `true` when every gradient buffer is absent or identically zero.
    pub fn grads_are_zero(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.grad().is_none_or(|g| g.iter().all(|&x| x == 0.0)))
    }

    /// One bias-corrected Adam update over every parameter that has a
    /// gradient, then clears the gradients. Parameters without a gradient
    /// buffer are left untouched.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if !(cfg.lr > 0.0) || !cfg.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", cfg.lr)));
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for ((tensor, m), v) in self.tensors.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(grad) = tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            for (((p, g), mi), vi) in tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            tensor.clear_grad();
        }
        Ok(())
    }

    /// Bitwise comparison of parameter values.
    pub fn same_values(&self, other: &ParameterSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> (ParameterSet, ParamId) {
        let mut ps = ParameterSet::new();
        let id = ps.insert("w", Tensor::vector(vec![value])).unwrap();
        ps.get_mut(id).accumulate_grad(&[grad]).unwrap();
        (ps, id)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut ps, id) = single(0.0, 1.0);
        ps.adam_step(&AdamConfig::with_lr(0.1)).unwrap();
        let p = ps.get(id).data()[0];
        assert!((p + 0.1).abs() < 1e-6, "{p}");
        assert!(ps.get(id).grad().is_none());
    }

    #[test]
    fn zero_grad_is_identity() {
        let (mut ps, id) = single(0.37, 0.0);
        ps.adam_step(&AdamConfig::with_lr(0.1)).unwrap();
        assert_eq!(ps.get(id).data()[0].to_bits(), 0.37f64.to_bits());
    }

    #[test]
    fn rejects_non_positive_lr() {
        let (mut ps, _) = single(0.0, 1.0);
        assert!(matches!(ps.adam_step(&AdamConfig::with_lr(0.0)), Err(Error::Config(_))));
        assert!(ps.adam_step(&AdamConfig::with_lr(-1.0)).is_err());
    }

    #[test]
    fn independent_sets_use_their_own_rates() {
        let (mut a, ia) = single(0.0, 1.0);
        let (mut b, ib) = single(0.0, 1.0);
        a.adam_step(&AdamConfig::with_lr(0.1)).unwrap();
        b.adam_step(&AdamConfig::with_lr(0.01)).unwrap();
        assert!((a.get(ia).data()[0] + 0.1).abs() < 1e-6);
        assert!((b.get(ib).data()[0] + 0.01).abs() < 1e-7);
        assert_eq!(a.step_count(), 1);
        assert_eq!(b.step_count(), 1);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParameterSet::new();
        ps.insert("a", Tensor::scalar(0.0)).unwrap();
        assert!(ps.insert("a", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn clones_get_fresh_ids() {
        let ps = ParameterSet::new();
        assert_ne!(ps.id(), ps.clone().id());
    }
}
