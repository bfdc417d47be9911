//! Named parameter storage and the Adam optimizer.
//!
//! One-shot training updates only the parameters on the sampled path,
//! so moment buffers and step counters are tracked per parameter.

use crate::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Flat store of named trainable tensors. Names are unique and stable,
/// which is what the checkpoint format keys on.
#[derive(Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .cloned()
            .zip(self.values.iter().cloned())
            .collect()
    }

    /// Overwrite values from a checkpoint; shapes must match.
    pub fn load_named(&mut self, tensors: &[(String, Tensor)]) -> Result<(), TensorError> {
        for (name, t) in tensors {
            let Some(i) = self.names.iter().position(|n| n == name) else {
                return Err(TensorError::Integrity(format!("unknown parameter {name}")));
            };
            if self.values[i].shape() != t.shape() {
                return Err(TensorError::ShapeMismatch(format!(
                    "parameter {name}: stored {:?} vs checkpoint {:?}",
                    self.values[i].shape(),
                    t.shape()
                )));
            }
            self.values[i] = t.clone();
        }
        Ok(())
    }
}

/// Binds store parameters into a graph as leaves, once each, and
/// remembers the mapping so gradients can be routed back to the store.
pub struct Binder<'s> {
    store: &'s ParamStore,
    bound: Vec<(ParamId, crate::Var)>,
    lookup: std::collections::HashMap<usize, crate::Var>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Binder {
            store,
            bound: Vec::new(),
            lookup: std::collections::HashMap::new(),
        }
    }

    pub fn var(&mut self, g: &mut crate::Graph, id: ParamId) -> crate::Var {
        if let Some(&v) = self.lookup.get(&id.0) {
            return v;
        }
        let v = g.leaf(self.store.get(id).clone());
        self.lookup.insert(id.0, v);
        self.bound.push((id, v));
        v
    }

    /// Parameters touched by this graph, in binding order.
    pub fn bound(&self) -> &[(ParamId, crate::Var)] {
        &self.bound
    }

    /// Gradients for every bound parameter (zeros when off-path).
    pub fn grads(&self, g: &crate::Graph, grads: &crate::Grads) -> Vec<(ParamId, Tensor)> {
        self.bound
            .iter()
            .map(|&(id, v)| {
                let t = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()));
                (id, t)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct MomentState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Adam with bias correction; lazily allocates per-parameter state on
/// the first update of that parameter.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    states: Vec<Option<MomentState>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            states: Vec::new(),
        }
    }

    pub fn step_count(&self, id: ParamId) -> u64 {
        self.states
            .get(id.0)
            .and_then(|s| s.as_ref())
            .map_or(0, |s| s.step)
    }

    /// Apply one Adam update to each (parameter, gradient) pair.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        for (id, grad) in grads {
            let value = params.get_mut(*id);
            assert_eq!(
                value.shape(),
                grad.shape(),
                "adam: gradient shape mismatch for {}",
                id.0
            );
            if self.states.len() <= id.0 {
                self.states.resize(id.0 + 1, None);
            }
            let state = self.states[id.0].get_or_insert_with(|| MomentState {
                m: vec![0.0; value.numel()],
                v: vec![0.0; value.numel()],
                step: 0,
            });
            state.step += 1;
            let bc1 = 1.0 - self.beta1.powi(state.step as i32);
            let bc2 = 1.0 - self.beta2.powi(state.step as i32);
            for ((p, g), (m, v)) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(state.m.iter_mut().zip(state.v.iter_mut()))
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
