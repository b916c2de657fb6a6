use std::collections::HashMap;

use super::{NumericError, Tensor};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Embedding tables are only read through row gathers, so their gradients
    /// are tracked per touched row.
    pub sparse: bool,
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, sparse: bool) -> Result<ParamId, NumericError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NumericError::DuplicateParam(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, sparse });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Dense gradient accumulator aligned with a [`ParamStore`].
///
/// Nothing is zeroed implicitly; call [`Gradients::reset`] between steps.
#[derive(Clone, Debug)]
pub struct Gradients {
    bufs: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            bufs: store
                .params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.bufs[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.bufs[id.0]
    }

    pub fn add_dense(&mut self, id: ParamId, values: &[f64], scale: f64) {
        let buf = self.bufs[id.0].data_mut();
        assert_eq!(buf.len(), values.len(), "gradient length mismatch");
        for (b, v) in buf.iter_mut().zip(values) {
            *b += scale * v;
        }
    }

    pub fn add_row(&mut self, id: ParamId, row: usize, values: &[f64], scale: f64) {
        let buf = self.bufs[id.0].row_mut(row);
        for (b, v) in buf.iter_mut().zip(values) {
            *b += scale * v;
        }
    }

    pub fn reset(&mut self) {
        for buf in &mut self.bufs {
            buf.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.bufs
            .iter()
            .flat_map(|b| b.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so that their global L2 norm is at most
    /// `max_norm`. Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for buf in &mut self.bufs {
                buf.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.bufs.iter().all(Tensor::is_finite)
    }
}
