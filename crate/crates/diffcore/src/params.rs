//! Named, trainable parameter storage. Parameters live outside any graph;
//! each episode graph binds the ones it touches and hands gradients back
//! through a [`GradBuffer`] aligned with the set.

use std::collections::BTreeMap;

use crate::real::Real;
use crate::tensor::Tensor;

/// Index of a parameter within its [`ParamSet`]. Stable for the lifetime of
/// the set; registration order is the checkpoint payload order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One named tensor.
#[derive(Clone, Debug)]
pub struct Param<R: Real> {
    pub name: String,
    pub value: Tensor<R>,
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<R: Real> {
    params: Vec<Param<R>>,
    by_name: BTreeMap<String, usize>,
}

impl<R: Real> ParamSet<R> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: BTreeMap::new() }
    }

    /// Register a tensor under a unique name; panics on duplicates.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<R>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<R> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<R> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<R>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total scalar count across all parameters.
    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Per-parameter gradient accumulator aligned with a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct GradBuffer<R: Real> {
    bufs: Vec<Vec<R>>,
}

impl<R: Real> GradBuffer<R> {
    pub fn zeros_like(params: &ParamSet<R>) -> Self {
        Self { bufs: params.params.iter().map(|p| vec![R::ZERO; p.value.len()]).collect() }
    }

    pub fn zero(&mut self) {
        for b in &mut self.bufs {
            b.fill(R::ZERO);
        }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &[R]) {
        let buf = &mut self.bufs[id.0];
        assert_eq!(buf.len(), grad.len(), "gradient length mismatch for param {}", id.0);
        for (b, g) in buf.iter_mut().zip(grad) {
            *b += *g;
        }
    }

    /// Multiply every accumulated gradient by `s` (e.g. 1/batch).
    pub fn scale(&mut self, s: R) {
        for b in &mut self.bufs {
            for g in b.iter_mut() {
                *g *= s;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> &[R] {
        &self.bufs[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[R])> {
        self.bufs.iter().enumerate().map(|(i, b)| (ParamId(i), b.as_slice()))
    }
}
