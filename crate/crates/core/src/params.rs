//! Named parameter storage and the convolution layer built on it.

use std::rc::Rc;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{self, conv2d};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of leaf tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Rc<Tensor<T>>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {}", name);
        self.names.push(name);
        self.values.push(Rc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter().map(|v| &**v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Mutable access; copies the tensor if a live tape still shares it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Rc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::shape(
                "ParamStore::set",
                format!(
                    "{}: {:?} vs {:?}",
                    self.names[id.0],
                    value.shape(),
                    self.values[id.0].shape()
                ),
            ));
        }
        self.values[id.0] = Rc::new(value);
        Ok(())
    }

    /// Fills every parameter whose name starts with `prefix`.
    pub fn fill_prefix(&mut self, prefix: &str, value: T) {
        for (n, v) in self.names.iter().zip(self.values.iter_mut()) {
            if n.starts_with(prefix) {
                Rc::make_mut(v).data_mut().fill(value);
            }
        }
    }

    /// Binds parameters to a tape (training) or as constants (inference).
    pub fn bind(&self, tape: Option<&Tape<T>>) -> Bound<T> {
        let vars = self
            .values
            .iter()
            .map(|v| match tape {
                Some(t) => t.leaf(Rc::clone(v)),
                None => Var::constant_rc(Rc::clone(v)),
            })
            .collect();
        Bound { vars }
    }

    /// SHA-256 over names, shapes and raw little-endian element bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.iter() {
            h.update(name.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        hex16(h)
    }
}

fn hex16(h: Sha256) -> String {
    h.finalize().iter().take(16).map(|b| format!("{:02x}", b)).collect()
}

/// Hash of a tensor's shape and values rounded to 1e-5, for golden values
/// that should survive kernel-level rounding differences between machines.
pub fn checksum_tensor<T: Real>(t: &Tensor<T>) -> String {
    let mut h = Sha256::new();
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for x in t.data() {
        h.update(((x.as_f64() * 1e5).round() as i64).to_le_bytes());
    }
    hex16(h)
}

/// Parameters of one forward pass, as graph values.
pub struct Bound<T> {
    vars: Vec<Var<T>>,
}

impl<T: Real> Bound<T> {
    /// Wraps vars in store order, e.g. leaves created by a gradient check.
    pub fn from_vars(vars: Vec<Var<T>>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }
}

/// He (fan-in) normal initialisation std for a conv kernel.
fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Square-kernel convolution with bias. Padding keeps stride-1 outputs at
/// the input size.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = Tensor::randn(&[cout, cin, kernel, kernel], he_std(cin * kernel * kernel), rng);
        let weight = store.add(format!("{}.weight", name), w);
        let bias = store.add(format!("{}.bias", name), Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            kernel,
            stride,
        }
    }

    pub fn forward<T: Real>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        conv2d(
            x,
            p.var(self.weight),
            p.var(self.bias),
            self.stride,
            (self.kernel - 1) / 2,
        )
    }
}

/// `Conv ∘ ELU ∘ Conv`, the recurring two-layer unit.
#[derive(Clone, Copy, Debug)]
pub struct ConvEluConv {
    pub first: Conv,
    pub second: Conv,
}

impl ConvEluConv {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: [usize; 3],
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let [a, b, c] = channels;
        Self {
            first: Conv::new(store, &format!("{}.0", name), a, b, kernel, 1, rng),
            second: Conv::new(store, &format!("{}.1", name), b, c, kernel, 1, rng),
        }
    }

    pub fn forward<T: Real>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let h = ops::elu(&self.first.forward(p, x)?)?;
        self.second.forward(p, &h)
    }
}
