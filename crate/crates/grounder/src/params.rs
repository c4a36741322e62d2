//! Named parameter registry shared by the backbone, adapters, decoder and
//! optimizer. Values live behind `Arc` so leafing them onto a tape is a
//! pointer copy; the optimizer mutates them between forward passes via
//! copy-on-write.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::rng::CounterRng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone)]
pub struct Param<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Arc<Vec<S>>,
    pub frozen: bool,
}

#[derive(Clone)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<S>) -> ParamId {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "param {name}: data length does not match shape"
        );
        assert!(
            !self.by_name.contains_key(name),
            "param {name} registered twice"
        );
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: Arc::new(data),
            frozen: false,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    /// Symmetric uniform init scaled by 1/sqrt(fan_in).
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut CounterRng) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<S> = (0..n).map(|_| S::from_f64(rng.uniform(-bound, bound))).collect();
        self.add(name, shape, data)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let n: usize = shape.iter().product();
        self.add(name, shape, vec![S::ZERO; n])
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let n: usize = shape.iter().product();
        self.add(name, shape, vec![S::ONE; n])
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut Vec<S> {
        Arc::make_mut(&mut self.params[id.0].data)
    }

    pub fn set_values(&mut self, id: ParamId, data: Vec<S>) {
        assert_eq!(data.len(), self.params[id.0].data.len());
        self.params[id.0].data = Arc::new(data);
    }

    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    pub fn any_frozen(&self, prefix: &str) -> bool {
        self.params.iter().any(|p| p.name.starts_with(prefix) && p.frozen)
    }

    /// CRC over the raw little-endian f64 widening of every value under
    /// `prefix`, in registration order. Used by freeze-invariance checks.
    pub fn checksum_prefix(&self, prefix: &str) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for p in &self.params {
            if p.name.starts_with(prefix) {
                for v in p.data.iter() {
                    h.update(&v.to_f64().to_le_bytes());
                }
            }
        }
        h.finalize()
    }

    /// Fill every parameter whose name starts with `prefix` with zeros.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for i in 0..self.params.len() {
            if self.params[i].name.starts_with(prefix) {
                let vals = Arc::make_mut(&mut self.params[i].data);
                vals.iter_mut().for_each(|v| *v = S::ZERO);
            }
        }
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// One forward pass: a tape plus the store bindings needed to route
/// gradients back to named parameters.
pub struct Graph<'a, S: Scalar> {
    pub tape: Tape<S>,
    /// Collect attention maps and other traces (costs copies; off for
    /// training steps).
    pub trace: bool,
    store: &'a ParamStore<S>,
    bound: Vec<Option<TensorId>>,
}

impl<'a, S: Scalar> Graph<'a, S> {
    pub fn new(store: &'a ParamStore<S>) -> Self {
        Graph { tape: Tape::new(), trace: false, store, bound: vec![None; store.len()] }
    }

    pub fn traced(store: &'a ParamStore<S>) -> Self {
        Graph { tape: Tape::new(), trace: true, store, bound: vec![None; store.len()] }
    }

    /// Leaf a parameter onto the tape (cached: the same ParamId always
    /// maps to one tape node, so shared parameters accumulate gradients).
    pub fn param(&mut self, id: ParamId) -> TensorId {
        if let Some(t) = self.bound[id.0] {
            return t;
        }
        let p = self.store.get(id);
        let t = self.tape.leaf_shared(p.data.clone(), &p.shape, !p.frozen);
        self.bound[id.0] = Some(t);
        t
    }

    pub fn store(&self) -> &ParamStore<S> {
        self.store
    }

    /// Pull accumulated gradients for every bound, unfrozen parameter.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<S>)> {
        let mut out = Vec::new();
        for (i, slot) in self.bound.iter().enumerate() {
            if let Some(t) = slot {
                if let Some(g) = self.tape.grad(*t) {
                    out.push((ParamId(i), g.to_vec()));
                }
            }
        }
        out
    }
}
