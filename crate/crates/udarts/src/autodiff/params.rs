//! Named leaf tensors shared by every graph built over a model.
//!
//! A `ParamStore` owns the numeric state of a model: trainable weights,
//! architecture logits, dropout logits, and batch-norm running statistics.
//! Graphs bind parameters by id; optimizers mutate them between passes.

use crate::autodiff::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// How a parameter participates in the bi-level problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamClass {
    /// Network weights `w` (convolutions, classifier, batch-norm affine).
    Weight,
    /// Architecture logits `alpha`.
    Alpha,
    /// Concrete-dropout logits `theta`.
    DropoutLogit,
    /// Batch-norm running statistics: state, never differentiated.
    RunningStat,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub class: ParamClass,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, class: ParamClass, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, class, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        debug_assert_eq!(self.params[id.0].value.shape(), value.shape());
        self.params[id.0].value = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn class(&self, id: ParamId) -> ParamClass {
        self.params[id.0].class
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Ids in registration order; registration order is the stable
    /// serialization order used by checkpoints.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn ids_of_class(&self, class: ParamClass) -> Vec<ParamId> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.class == class)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total element count of a parameter class.
    pub fn class_len(&self, class: ParamClass) -> usize {
        self.params
            .iter()
            .filter(|p| p.class == class)
            .map(|p| p.value.len())
            .sum()
    }

    /// Flatten a parameter class into one vector (registration order).
    pub fn flatten_class(&self, class: ParamClass) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.class_len(class));
        for p in self.params.iter().filter(|p| p.class == class) {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    /// Write a flat vector back into a parameter class (registration order).
    pub fn unflatten_class(&mut self, class: ParamClass, flat: &[f64]) {
        let mut off = 0;
        for p in self.params.iter_mut().filter(|p| p.class == class) {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        debug_assert_eq!(off, flat.len());
    }
}

/// Gradients keyed by parameter id; parameters absent from the active path
/// read as zeros of the parameter's shape.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: std::collections::BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Gradients::default()
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.map.insert(id, grad);
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor) {
        match self.map.get_mut(&id) {
            Some(g) => g.add_in_place(grad),
            None => {
                self.map.insert(id, grad.clone());
            }
        }
    }

    pub fn get(&self, id: ParamId, store: &ParamStore) -> Tensor {
        self.map
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
    }

    pub fn get_ref(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.map.iter()
    }

    /// Euclidean norm over a parameter class (zeros for untouched params).
    pub fn class_norm2(&self, store: &ParamStore, class: ParamClass) -> f64 {
        let mut acc = 0.0;
        for id in store.ids_of_class(class) {
            if let Some(g) = self.map.get(&id) {
                acc += g.data().iter().map(|v| v * v).sum::<f64>();
            }
        }
        acc.sqrt()
    }

    /// Flatten gradients of a class into one vector (store registration order).
    pub fn flatten_class(&self, store: &ParamStore, class: ParamClass) -> Vec<f64> {
        let mut out = Vec::with_capacity(store.class_len(class));
        for id in store.ids_of_class(class) {
            match self.map.get(&id) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat(0.0).take(store.get(id).len())),
            }
        }
        out
    }

    pub fn scaled_sub(&self, other: &Gradients, scale: f64, store: &ParamStore) -> Gradients {
        let mut out = self.clone();
        for (id, g) in other.map.iter() {
            let mut cur = out.get(*id, store);
            cur.axpy_in_place(-scale, g);
            out.map.insert(*id, cur);
        }
        out
    }
}

/// Central-difference gradient of a deterministic scalar loss with respect to
/// the listed parameters. Test oracle: independent of the tape backward path.
pub fn finite_diff_grad<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    h: f64,
    mut loss: F,
) -> Result<Vec<Tensor>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(crate::error::Error::BadFdStep(h));
    }
    let mut grads = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = store.get(id).len();
        let mut g = Tensor::zeros(store.get(id).shape());
        for i in 0..n {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let plus = loss(store)?;
            store.get_mut(id).data_mut()[i] = orig - h;
            let minus = loss(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(crate::error::Error::NonFinite {
                    op: "finite_diff_grad",
                });
            }
            g.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_linear_is_exact() {
        // f(w) = 3w: slope 3 to ~1e-8 regardless of w.
        let mut store = ParamStore::new();
        let id = store.register("w", ParamClass::Weight, Tensor::scalar(1.7));
        let g = finite_diff_grad(&mut store, &[id], 1e-5, |s| Ok(3.0 * s.get(id).item())).unwrap();
        assert!((g[0].item() - 3.0).abs() < 1e-8);
    }

    #[test]
    fn finite_diff_cubic() {
        // f(w) = w^3 at w=2: analytic 3w^2 = 12.
        let mut store = ParamStore::new();
        let id = store.register("w", ParamClass::Weight, Tensor::scalar(2.0));
        let g = finite_diff_grad(&mut store, &[id], 1e-5, |s| Ok(s.get(id).item().powi(3))).unwrap();
        assert!((g[0].item() - 12.0).abs() < 1e-4);
    }

    #[test]
    fn finite_diff_rejects_bad_step() {
        let mut store = ParamStore::new();
        let id = store.register("w", ParamClass::Weight, Tensor::scalar(0.0));
        assert!(finite_diff_grad(&mut store, &[id], 0.0, |_| Ok(0.0)).is_err());
    }
}
