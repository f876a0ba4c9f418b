//! Named parameter tensors with ownership and freeze flags.

use std::collections::BTreeMap;

use numcore::{Rng, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Owner {
    Shared,
    Image,
    Point,
    Heads,
    Classifier,
}

impl Owner {
    pub const ALL: [Owner; 5] = [Owner::Shared, Owner::Image, Owner::Point, Owner::Heads, Owner::Classifier];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Owner::Shared => "shared",
            Owner::Image => "image",
            Owner::Point => "point",
            Owner::Heads => "heads",
            Owner::Classifier => "classifier",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar = f32> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
    pub owner: Owner,
}

/// Parameter map iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    params: BTreeMap<String, Param<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize)]
pub struct OwnerCount {
    pub total: usize,
    pub trainable: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
    pub frozen: usize,
    pub fraction: f64,
    pub by_owner: BTreeMap<Owner, OwnerCount>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, owner: Owner, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter {name}")));
        }
        self.params.insert(name, Param { tensor, trainable, owner });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.params.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param<T>> {
        self.params.remove(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n.clone()).collect()
    }

    /// Sets each parameter's flag to `pred(owner)`.
    pub fn set_trainable_where(&mut self, pred: impl Fn(Owner) -> bool) {
        for p in self.params.values_mut() {
            p.trainable = pred(p.owner);
        }
    }

    pub fn freeze_all(&mut self) {
        self.set_trainable_where(|_| false);
    }

    /// Moves every parameter of `other` into `self`, rejecting name clashes.
    pub fn absorb(&mut self, other: ParamStore<T>) -> Result<()> {
        for (n, p) in other.params {
            self.insert(n, p.tensor, p.owner, p.trainable)?;
        }
        Ok(())
    }

    pub fn take_owner(&mut self, owner: Owner) -> ParamStore<T> {
        let names: Vec<String> = self.params.iter().filter(|(_, p)| p.owner == owner).map(|(n, _)| n.clone()).collect();
        let mut out = ParamStore::new();
        for n in names {
            let p = self.params.remove(&n).expect("listed name");
            out.params.insert(n, p);
        }
        out
    }

    /// SHA-256 over name, shape and little-endian bytes of every parameter
    /// whose owner satisfies `pred`, in name order.
    pub fn hash_where(&self, pred: impl Fn(Owner) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.params.iter().filter(|(_, p)| pred(p.owner)) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &e in p.tensor.shape() {
                h.update((e as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn frozen_tower_hash(&self) -> String {
        self.hash_where(|o| matches!(o, Owner::Shared | Owner::Image))
    }

    pub fn count(&self) -> ParamCount {
        let mut by_owner: BTreeMap<Owner, OwnerCount> = BTreeMap::new();
        let (mut total, mut trainable) = (0, 0);
        for p in self.params.values() {
            let n = p.tensor.numel();
            let e = by_owner.entry(p.owner).or_default();
            e.total += n;
            total += n;
            if p.trainable {
                e.trainable += n;
                trainable += n;
            }
        }
        let fraction = if total == 0 { 0.0 } else { trainable as f64 / total as f64 };
        ParamCount { total, trainable, frozen: total - trainable, fraction, by_owner }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(n, p)| (n.clone(), Param { tensor: p.tensor.cast(), trainable: p.trainable, owner: p.owner }))
                .collect(),
        }
    }
}

/// Deterministic parameter initializer drawing from one stream in call order.
pub struct Init<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut Rng,
    pub std: f64,
}

impl<T: Scalar> Init<'_, T> {
    pub fn normal(&mut self, name: &str, shape: &[usize], owner: Owner) -> Result<()> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::cast(self.rng.trunc_normal(self.std))).collect();
        self.store.insert(name, Tensor::new(data, shape.to_vec())?, owner, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64, owner: Owner) -> Result<()> {
        self.store.insert(name, Tensor::full(shape, T::cast(v)), owner, true)
    }

    /// Weight `[fan_in, fan_out]` plus optional zero bias.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool, owner: Owner) -> Result<()> {
        self.normal(&format!("{name}.w"), &[fan_in, fan_out], owner)?;
        if bias {
            self.constant(&format!("{name}.b"), &[fan_out], 0.0, owner)?;
        }
        Ok(())
    }

    pub fn layernorm(&mut self, name: &str, d: usize, owner: Owner) -> Result<()> {
        self.constant(&format!("{name}.g"), &[d], 1.0, owner)?;
        self.constant(&format!("{name}.b"), &[d], 0.0, owner)
    }

    /// `widths[0] -> widths[1] -> ...` stack of biased linear layers.
    pub fn mlp(&mut self, name: &str, widths: &[usize], owner: Owner) -> Result<()> {
        for (i, w) in widths.windows(2).enumerate() {
            self.linear(&format!("{name}.{i}"), w[0], w[1], true, owner)?;
        }
        Ok(())
    }

    /// Like [`Init::mlp`] but each weight has std `1/sqrt(fan_in)`.
    pub fn mlp_fan_in(&mut self, name: &str, widths: &[usize], owner: Owner) -> Result<()> {
        let std = self.std;
        for (i, w) in widths.windows(2).enumerate() {
            self.std = 1.0 / (w[0] as f64).sqrt();
            let r = self.linear(&format!("{name}.{i}"), w[0], w[1], true, owner);
            self.std = std;
            r?;
        }
        Ok(())
    }
}
