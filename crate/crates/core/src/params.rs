use std::collections::BTreeMap;

use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Handle to a registered parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named trainable tensors.
///
/// Ids are assigned in registration order; [`ParameterStore::iter`] walks the
/// entries lexicographically by name so that serialization and optimizer
/// sweeps do not depend on construction order.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: Vec<(String, Tensor)>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under a unique name and marks it trainable.
    pub fn register(&mut self, name: impl Into<String>, mut tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "contract violation: parameter {name:?} registered twice"
        );
        tensor.set_requires_grad(true);
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push((name, tensor));
        id
    }

    /// Registers a `rows x cols` matrix with entries uniform in `[-scale, scale)`.
    pub fn uniform(&mut self, name: impl Into<String>, rows: usize, cols: usize, scale: f64, rng: &mut RngStream) -> ParamId {
        let data = (0..rows * cols).map(|_| rng.uniform(-scale, scale)).collect();
        self.register(name, Tensor::matrix(rows, cols, data))
    }

    pub fn filled(&mut self, name: impl Into<String>, rows: usize, cols: usize, value: f64) -> ParamId {
        self.register(name, Tensor::matrix(rows, cols, vec![value; rows * cols]))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    /// Entries in lexicographic name order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.by_name
            .iter()
            .map(move |(name, &id)| (id, name.as_str(), &self.entries[id.0].1))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.by_name.values().copied().collect()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Adds gradients (indexed by id) into the stored grad buffers.
    pub fn accumulate_grads(&mut self, grads: &[Option<Vec<f64>>]) {
        for (i, g) in grads.iter().enumerate() {
            let t = &mut self.entries[i].1;
            let buf = t.grad_mut();
            if let Some(g) = g {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in &mut self.entries {
            t.zero_grad();
        }
    }

    pub fn clear_grads(&mut self) {
        for (_, t) in &mut self.entries {
            t.clear_grad();
        }
    }

    /// Overwrites parameter values with those of another store holding the same names and shapes.
    pub fn copy_values_from(&mut self, other: &ParameterStore) -> Result<(), String> {
        for (name, t) in &mut self.entries {
            let src = other.by_name(name).ok_or_else(|| format!("missing parameter {name:?}"))?;
            if src.shape() != t.shape() {
                return Err(format!("parameter {name:?}: shape {:?} != {:?}", src.shape(), t.shape()));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&[f64]> {
        self.first.get(id.0).map(|v| v.as_slice())
    }

    pub fn second_moment(&self, id: ParamId) -> Option<&[f64]> {
        self.second.get(id.0).map(|v| v.as_slice())
    }

    /// Applies one update from the stored gradients and zeroes them.
    ///
    /// Panics if any parameter has no gradient buffer.
    pub fn step(&mut self, store: &mut ParameterStore) {
        if self.first.len() != store.len() {
            self.first = store.entries.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in store.ids() {
            let (name, tensor) = &mut store.entries[id.0];
            let Some(grad) = tensor.take_grad() else {
                panic!("contract violation: parameter {name:?} has no gradient for the Adam step");
            };
            let m = &mut self.first[id.0];
            let v = &mut self.second[id.0];
            for (((p, &g), m), v) in tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            let mut grad = grad;
            grad.iter_mut().for_each(|g| *g = 0.0);
            tensor.put_grad(grad);
        }
    }
}
