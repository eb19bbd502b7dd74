//! Named parameter storage, initializers and the SGD optimizer.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Grads, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Position in [`ParamStore::entries`].
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Buffers (running statistics) are stored alongside weights but never
    /// receive gradients.
    pub trainable: bool,
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), value, false)
    }

    fn insert(&mut self, name: String, value: Tensor<T>, trainable: bool) -> ParamId {
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count of trainable parameters.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Records a parameter as a graph leaf.
    pub fn leaf(&self, graph: &mut Graph<T>, id: ParamId) -> Var {
        graph.param(id, self.get(id).clone())
    }
}

/// Normal(0, std) truncated to `[-2·std, 2·std]` by rejection.
pub fn trunc_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("valid std");
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break T::of(v);
            }
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Kaiming-normal for a layer with `fan_in` inputs feeding a ReLU.
pub fn kaiming_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std");
    let data = (0..shape.iter().product())
        .map(|_| T::of(dist.sample(rng)))
        .collect();
    Tensor::from_vec(shape, data)
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: T, weight_decay: T) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Applies one update from the gradients recorded for `graph`'s parameter
    /// leaves. Parameters used more than once in the graph get summed gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>, graph: &Graph<T>, grads: &mut Grads<T>, lr: T) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let mut summed: Vec<Option<Tensor<T>>> = vec![None; store.len()];
        for (pid, var) in graph.param_vars() {
            if let Some(g) = grads.take(var) {
                match &mut summed[pid.0] {
                    Some(s) => s.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (i, g) in summed.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let entry = &mut store.entries[i];
            if !entry.trainable {
                continue;
            }
            let vel = self.velocity[i].get_or_insert_with(|| vec![T::zero(); g.len()]);
            for ((p, v), &gr) in entry.value.data_mut().iter_mut().zip(vel.iter_mut()).zip(g.data()) {
                let d = gr + self.weight_decay * *p;
                *v = self.momentum * *v + d;
                *p -= lr * *v;
            }
        }
    }
}
