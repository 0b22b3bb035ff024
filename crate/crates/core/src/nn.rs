//! Named parameters and the small layer types every module is built from.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Named parameter arrays in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for (name, t) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                t.data_mut().fill(0.0);
                n += 1;
            }
        }
        n
    }

    /// Records every parameter on `tape`; differentiable when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Checks that `other` holds the same names with the same shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (name, t) in &self.params {
            match other.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
                Some(o) if o.shape() != t.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        o.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }
}

/// Parameters bound to the tape of one forward pass.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} was never initialized"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Parameter gradients in name order; parameters unused by the forward
    /// pass get zeros.
    pub fn gradients(&self, store: &ParamStore, grads: &Gradients) -> BTreeMap<String, Tensor> {
        store
            .iter()
            .map(|(name, t)| {
                let g = grads
                    .get(self.var(name))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Fan-in scaled uniform initialization: `U(-sqrt(gain/fan_in), +sqrt(gain/fan_in))`.
pub fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor {
    let bound = (gain / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Gain for layers followed by a rectifier.
pub const RELU_GAIN: f64 = 6.0;
/// Gain for layers feeding linear or normalized paths.
pub const LINEAR_GAIN: f64 = 3.0;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub gain: f64,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            name: name.into(),
            cin,
            cout,
            kernel,
            stride,
            pad,
            gain: RELU_GAIN,
        }
    }

    /// `kernel × kernel`, stride 1, same padding.
    pub fn same(name: impl Into<String>, cin: usize, cout: usize, kernel: usize) -> Self {
        Conv2d::new(name, cin, cout, kernel, 1, kernel / 2)
    }

    pub fn with_gain(mut self, gain: f64) -> Self {
        self.gain = gain;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let fan_in = self.cin * self.kernel * self.kernel;
        store.insert(
            self.weight_name(),
            fan_in_uniform(&[self.cout, self.cin, self.kernel, self.kernel], fan_in, self.gain, rng),
        );
        store.insert(self.bias_name(), Tensor::zeros(&[self.cout]));
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let w = p.var(&self.weight_name());
        let b = p.var(&self.bias_name());
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Linear {
            name: name.into(),
            cin,
            cout,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        store.insert(
            self.weight_name(),
            fan_in_uniform(&[self.cin, self.cout], self.cin, LINEAR_GAIN, rng),
        );
        store.insert(self.bias_name(), Tensor::zeros(&[self.cout]));
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let w = p.var(&self.weight_name());
        let b = p.var(&self.bias_name());
        tape.linear(x, w, Some(b))
    }
}

/// Affine normalization parameters (`gamma`, `beta`) shared by layer and
/// batch normalization.
#[derive(Clone, Debug)]
pub struct Norm {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
}

pub const NORM_EPS: f64 = 1e-5;

impl Norm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Norm {
            name: name.into(),
            channels,
            eps: NORM_EPS,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(format!("{}.gamma", self.name), Tensor::full(&[self.channels], 1.0));
        store.insert(format!("{}.beta", self.name), Tensor::zeros(&[self.channels]));
    }

    fn vars(&self, p: &Bound) -> (Var, Var) {
        (
            p.var(&format!("{}.gamma", self.name)),
            p.var(&format!("{}.beta", self.name)),
        )
    }

    /// Layer normalization over the trailing axis.
    pub fn layer(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let (g, b) = self.vars(p);
        tape.layer_norm(x, g, b, self.eps)
    }

    /// Batch normalization over `(batch, height, width)` per channel.
    pub fn batch(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let (g, b) = self.vars(p);
        tape.batch_norm(x, g, b, self.eps)
    }
}
