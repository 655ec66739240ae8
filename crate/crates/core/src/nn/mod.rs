//! Neural-network building blocks: a named parameter store, layers, an LSTM
//! cell, the Adam optimizer with step-decay scheduling, and checkpoint io.
//!
//! One [`ParamStore`] owns every tensor of one model (or one agent). A
//! forward pass builds a fresh [`Graph`](crate::graph::Graph) per step via a
//! [`Ctx`], which decides whether parameter nodes carry gradients and whether
//! batch-norm layers use (and update) batch statistics or running statistics.

pub mod checkpoint;
pub mod layers;
pub mod optim;
pub mod rnn;

use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, VarId};

/// Kind of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    /// Trainable parameter with Adam state.
    Param,
    /// Non-trainable buffer (running statistics).
    Buffer,
}

pub struct Entry {
    pub name: String,
    pub kind: TensorKind,
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
    pub m: ArrayD<f32>,
    pub v: ArrayD<f32>,
}

/// Flat, insertion-ordered collection of named tensors.
#[derive(Default)]
pub struct ParamStore {
    pub entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, kind: TensorKind, value: ArrayD<f32>) -> usize {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate tensor name {name}"
        );
        let zeros = ArrayD::zeros(value.raw_dim());
        self.entries.push(Entry {
            name: name.to_string(),
            kind,
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
        });
        self.entries.len() - 1
    }

    pub fn value(&self, slot: usize) -> &ArrayD<f32> {
        &self.entries[slot].value
    }

    pub fn set_value(&mut self, slot: usize, v: ArrayD<f32>) {
        assert_eq!(self.entries[slot].value.shape(), v.shape());
        self.entries[slot].value = v;
    }

    /// Number of trainable parameter scalars.
    pub fn num_params(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == TensorKind::Param)
            .map(|e| e.value.len())
            .sum()
    }

    /// Accumulates `backward` results into the per-entry gradient buffers.
    pub fn absorb_grads(&mut self, graph: &Graph, grads: &[Option<ArrayD<f32>>]) {
        for (slot, g) in graph.param_grads(grads) {
            self.entries[slot].grad += g;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// FNV-1a hash over the exact bit patterns of every tensor value, for
    /// cheap "parameters unchanged" assertions.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for e in &self.entries {
            eat(e.name.as_bytes());
            for &v in e.value.iter() {
                eat(&v.to_le_bytes());
            }
        }
        h
    }
}

/// Per-forward context tying a graph to a store.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub store: &'a mut ParamStore,
    /// Batch-norm mode: batch statistics (and running-stat updates) when
    /// true, frozen running statistics when false.
    pub train: bool,
    /// Whether parameter nodes should carry gradients.
    pub grad: bool,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, store: &'a mut ParamStore, train: bool, grad: bool) -> Self {
        Ctx { g, store, train, grad }
    }

    /// Materialize a stored tensor as a graph node.
    pub fn var(&mut self, slot: usize) -> VarId {
        let v = self.store.entries[slot].value.clone();
        if self.grad && self.store.entries[slot].kind == TensorKind::Param {
            self.g.param(slot, v)
        } else {
            self.g.leaf(v)
        }
    }
}

/// Uniform `U(-bound, bound)` init, the fan-in rule used by torch-style
/// linear/conv layers.
pub fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], bound: f32) -> ArrayD<f32> {
    use rand::Rng;
    ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| rng.gen_range(-bound..bound))
}

/// Standard-normal init (token embedding tables).
pub fn normal_init(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f32> {
    use rand::Rng;
    ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| {
        let u1: f32 = rng.gen_range(f32::MIN_POSITIVE..1.0);
        let u2: f32 = rng.gen::<f32>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
    })
}
