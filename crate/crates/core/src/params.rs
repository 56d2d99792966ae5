//! Named parameter storage shared by the network blocks.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::sgd_step;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Conv weight `[cout, cin/groups, k, k]` (Kaiming uniform) and zero bias.
    pub fn add_conv(
        &mut self,
        name: &str,
        rng: &mut Rng,
        cout: usize,
        cin: usize,
        kernel: usize,
        groups: usize,
    ) -> (ParamId, ParamId) {
        let cin_g = cin / groups;
        let w = rng.kaiming_uniform(&[cout, cin_g, kernel, kernel], cin_g * kernel * kernel);
        let wid = self.add(format!("{name}.weight"), w);
        let bid = self.add(format!("{name}.bias"), Tensor::zeros(vec![cout]));
        (wid, bid)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces a parameter tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(Error::Shape(format!(
                "parameter {} expects {:?}, got {:?}",
                self.names[id.0],
                self.tensors[id.0].shape(),
                value.shape()
            )));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    /// Puts every parameter on the tape as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| graph.param(t.clone())).collect())
    }

    /// Puts every parameter on the tape as a constant (inference).
    pub fn bind_frozen(&self, graph: &mut Graph<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| graph.input(t.clone())).collect())
    }

    /// SGD update from gradients collected on a tape bound with [`Self::bind`].
    pub fn apply_sgd(&mut self, bound: &Bound, grads: &crate::graph::Gradients<T>, lr: f64) -> Result<()> {
        for (i, var) in bound.0.iter().enumerate() {
            if let Some(g) = grads.get(*var) {
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of {}", self.names[i])));
                }
                sgd_step(&mut self.tensors[i], g, lr)?;
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }
}

/// Tape handles for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps tape handles already laid out in [`ParamStore`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}
