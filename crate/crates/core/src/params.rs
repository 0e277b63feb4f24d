//! Named trainable tensors.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{GradCheckReport, Gradients, Graph, Tensor, Var};
use crate::rng::normal_tensor;

#[derive(Serialize, Deserialize)]
struct TensorRepr {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Serialize for Tensor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TensorRepr { shape: self.shape().to_vec(), data: self.data().to_vec() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Tensor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = TensorRepr::deserialize(d)?;
        Tensor::new(r.shape, r.data).map_err(serde::de::Error::custom)
    }
}

/// Parameters keyed by dotted names (`head.fuse.0.w`, ...). Iteration order is
/// the lexical order of names, which fixes update and serialization order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self.tensors.iter().map(|(k, t)| (k.clone(), g.param(t.clone()))).collect();
        Bound { vars }
    }

    /// Registers every parameter as a constant of `g` (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        let vars = self.tensors.iter().map(|(k, t)| (k.clone(), g.constant(t.clone()))).collect();
        Bound { vars }
    }

    /// He-normal weights for a temporal convolution plus a zero bias.
    pub fn init_conv<R: Rng + ?Sized>(&mut self, rng: &mut R, name: &str, kernel: usize, c_in: usize, c_out: usize) {
        let std = (2.0 / (kernel * c_in) as f64).sqrt();
        self.insert(format!("{name}.w"), normal_tensor(rng, &[kernel, c_in, c_out], std));
        self.insert(format!("{name}.b"), Tensor::zeros(vec![c_out]));
    }

    /// Fan-in scaled weights for a linear layer plus a bias filled with `bias`.
    pub fn init_linear<R: Rng + ?Sized>(&mut self, rng: &mut R, name: &str, c_in: usize, c_out: usize, bias: f64) {
        let std = (1.0 / c_in as f64).sqrt();
        self.insert(format!("{name}.w"), normal_tensor(rng, &[c_in, c_out], std));
        self.insert(format!("{name}.b"), Tensor::filled(vec![c_out], bias));
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
    }

    /// Gradient tensors keyed by parameter name.
    pub fn collect(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(k, v)| grads.get(*v).map(|t| (k.clone(), t.clone())))
            .collect()
    }
}

/// Finite-difference check of `f` with respect to every parameter in `store`.
pub fn grad_check_params<F>(store: &ParamStore, step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let names: Vec<String> = store.tensors.keys().cloned().collect();
    let inputs: Vec<Tensor> = store.tensors.values().cloned().collect();
    crate::numcore::grad_check_report(
        |g, vars| {
            let bound = Bound { vars: names.iter().cloned().zip(vars.iter().copied()).collect() };
            f(g, &bound)
        },
        &inputs,
        step,
    )
}
