//! Named parameter storage and its binding onto a tape.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tensor::{Gradients, Padding, Scalar, Tape, Tensor, Var};

/// Ordered name -> tensor map. Insertion order is the canonical order used by
/// the optimizer and the checkpoint format.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = value,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, value));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers every parameter as a gradient-receiving leaf.
    pub fn bind(&self, tape: &Tape<T>) -> Bound<T> {
        self.bind_with(tape, true)
    }

    /// Registers every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &Tape<T>) -> Bound<T> {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &Tape<T>, tracked: bool) -> Bound<T> {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| {
                if tracked {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }
}

/// Parameters of one forward pass, bound to a tape.
pub struct Bound<T> {
    vars: Vec<Var<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Bound<T> {
    /// Builds a binding from explicit variables.
    pub fn from_vars(vars: Vec<(String, Var<T>)>) -> Self {
        let index = vars.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        Self {
            vars: vars.into_iter().map(|(_, v)| v).collect(),
            index,
        }
    }

    pub fn get(&self, name: &str) -> Result<&Var<T>> {
        self.index
            .get(name)
            .map(|&i| &self.vars[i])
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn try_get(&self, name: &str) -> Option<&Var<T>> {
        self.index.get(name).map(|&i| &self.vars[i])
    }

    /// Applies the convolution stored under `name` (`name.weight`, optional
    /// `name.bias`).
    pub fn conv(&self, x: &Var<T>, name: &str, stride: usize, padding: Padding) -> Result<Var<T>> {
        let w = self.get(&format!("{name}.weight"))?;
        let b = self.try_get(&format!("{name}.bias"));
        x.conv2d(w, b, stride, padding)
    }

    /// Gradients in store order; parameters that did not reach the loss get zeros.
    pub fn gradients(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|v| grads.get_or_zeros(v)).collect()
    }
}

/// Seeded parameter initializer.
pub struct ParamInit<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Scalar> ParamInit<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: seeded(seed, 0x5041_5241_4d53),
        }
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
    }

    /// Convolution weight `[o, c, kh, kw]` (and bias `[o]`) with bound
    /// `1/sqrt(fan_in)`.
    pub fn conv(&mut self, name: &str, o: usize, c: usize, kh: usize, kw: usize, bias: bool) {
        let bound = 1.0 / ((c * kh * kw) as f64).sqrt();
        let w = self.uniform(&[o, c, kh, kw], bound);
        self.store.insert(format!("{name}.weight"), w);
        if bias {
            let b = self.uniform(&[o], bound);
            self.store.insert(format!("{name}.bias"), b);
        }
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.store.insert(name, Tensor::zeros(shape));
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) {
        self.store.insert(name, Tensor::ones(shape));
    }
}
