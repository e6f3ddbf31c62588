use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Rc<Tensor>,
    grad: Tensor,
    frozen_rows: Vec<usize>,
}

/// Named trainable tensors with accumulated gradients.
///
/// Values are reference counted so a graph can hold them without copying;
/// mutation through [`ParamStore::value_mut`] clones only while a graph is
/// still alive.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(AutodiffError::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::new(value.shape().to_vec(), vec![0.0; value.len()])?;
        self.params.push(Param {
            name: name.clone(),
            value: Rc::new(value),
            grad,
            frozen_rows: Vec::new(),
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub(crate) fn shared_value(&self, id: ParamId) -> Rc<Tensor> {
        Rc::clone(&self.params[id.0].value)
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Rc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.value(id).shape() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "parameter `{}` is {:?}, got {:?}",
                self.name(id),
                self.value(id).shape(),
                value.shape()
            )));
        }
        self.params[id.0].value = Rc::new(value);
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    /// Rows whose gradient is always discarded (e.g. a padding embedding).
    pub fn freeze_rows(&mut self, id: ParamId, rows: Vec<usize>) {
        self.params[id.0].frozen_rows = rows;
    }

    pub fn frozen_rows(&self, id: ParamId) -> &[usize] {
        &self.params[id.0].frozen_rows
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &[f64]) {
        let p = &mut self.params[id.0];
        for (g, d) in p.grad.data_mut().iter_mut().zip(grad) {
            *g += d;
        }
        if !p.frozen_rows.is_empty() {
            let cols = p.grad.shape().last().copied().unwrap_or(1);
            let rows = p.frozen_rows.clone();
            for r in rows {
                p.grad.data_mut()[r * cols..(r + 1) * cols].fill(0.0);
            }
        }
    }

    /// Multiply every gradient by `factor`.
    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// `(name, value)` pairs in registration order.
    pub fn named_values(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|p| (p.name.as_str(), &*p.value))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
