use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Named trainable tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        match self.position(name) {
            Some(i) => self.entries[i].1 = value,
            None => self.entries.push((name.to_owned(), value)),
        }
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.position(name)
            .map(|i| &self.entries[i].1)
            .ok_or_else(|| Error::Invariant(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self
            .position(name)
            .ok_or_else(|| Error::Invariant(format!("missing parameter '{name}'")))?;
        Ok(&mut self.entries[i].1)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    /// Same names, new values (in order).
    pub fn with_tensors(&self, values: &[Tensor]) -> Result<ParamStore> {
        if values.len() != self.entries.len() {
            return Err(Error::Invariant("parameter count mismatch".into()));
        }
        let mut out = self.clone();
        for ((_, t), v) in out.entries.iter_mut().zip(values) {
            if t.shape() != v.shape() {
                return Err(Error::Invariant("parameter shape mismatch".into()));
            }
            *t = v.clone();
        }
        Ok(out)
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }
}

/// Parameters bound as leaves on one tape.
pub struct Bound {
    vars: Vec<(String, Var)>,
}

impl Bound {
    pub fn new(g: &mut Graph, store: &ParamStore) -> Self {
        Bound {
            vars: store.iter().map(|(n, t)| (n.to_owned(), g.param(t.clone()))).collect(),
        }
    }

    /// Bind already-created leaves, one per store entry in order.
    pub fn from_vars(store: &ParamStore, vars: &[Var]) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::Invariant("parameter count mismatch".into()));
        }
        Ok(Bound {
            vars: store.names().map(str::to_owned).zip(vars.iter().copied()).collect(),
        })
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Invariant(format!("parameter '{name}' not bound")))
    }

    /// Gradients after `backward`, aligned with the store order; unused parameters get zeros.
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|(_, v)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(*v).shape())))
            .collect()
    }
}

/// Uniform initialization in `[-scale, scale]`.
pub fn uniform(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..=scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Glorot-style bound for a `fan_in x fan_out` matrix.
pub fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
