//! Binding of stored parameters into a graph, plus small layer helpers.

use std::collections::BTreeMap;

use numcore::{Graph, Scalar, Var};

use crate::error::Result;
use crate::params::ParamStore;

/// Which stored parameters enter the graph as gradient-tracked leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradPolicy {
    /// Only parameters flagged trainable.
    Trainable,
    /// Every parameter, regardless of flag.
    All,
    /// No parameter; pure inference.
    None,
}

pub struct Ctx<'a, T: Scalar> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    policy: GradPolicy,
    bound: BTreeMap<String, Var>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, policy: GradPolicy) -> Self {
        Self { g: Graph::new(), store, policy, bound: BTreeMap::new() }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    /// Graph node of a stored parameter, created on first use.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let param = self.store.get(name)?;
        let track = match self.policy {
            GradPolicy::Trainable => param.trainable,
            GradPolicy::All => true,
            GradPolicy::None => false,
        };
        let t = param.tensor.clone();
        let v = if track { self.g.param(t)? } else { self.g.constant(t)? };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    /// Gradients of every tracked parameter after `backward`, by name.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<T>> {
        self.bound
            .iter()
            .filter_map(|(n, &v)| self.g.grad(v).map(|g| (n.clone(), g.to_vec())))
            .collect()
    }

    /// `x W (+ b)` where `{name}.w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let y = self.g.matmul(x, w)?;
        let bias = format!("{name}.b");
        if self.store.contains(&bias) {
            let b = self.p(&bias)?;
            Ok(self.g.add_tiled(y, b)?)
        } else {
            Ok(y)
        }
    }

    /// `layers` linear maps with GELU between them and none after the last.
    pub fn mlp(&mut self, x: Var, name: &str, layers: usize) -> Result<Var> {
        let mut h = x;
        for i in 0..layers {
            h = self.linear(h, &format!("{name}.{i}"))?;
            if i + 1 < layers {
                h = self.g.gelu(h)?;
            }
        }
        Ok(h)
    }

    pub fn layernorm(&mut self, x: Var, name: &str, eps: f64) -> Result<Var> {
        let gain = self.p(&format!("{name}.g"))?;
        let bias = self.p(&format!("{name}.b"))?;
        Ok(self.g.layernorm(x, gain, bias, T::cast(eps))?)
    }
}
