//! Parameterized layers. Each layer owns its name prefix and shape; weights
//! live in a [`ParamStore`] and are looked up through [`Params`] on forward.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::Var;
use crate::conv::conv2d;
use crate::error::Result;
use crate::ops;
use crate::params::{ParamStore, Params};
use crate::tensor::Tensor;

/// Normal(0, std) truncated to two standard deviations.
pub fn trunc_normal<R: Rng + ?Sized>(shape: Vec<usize>, std: f64, rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
}

/// Uniform(-b, b) with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

fn join(prefix: &str, leaf: &str) -> String {
    format!("{}.{}", prefix, leaf)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self {
            name: name.into(),
            in_dim,
            out_dim,
            bias: true,
        }
    }

    pub fn weight_name(&self) -> String {
        join(&self.name, "weight")
    }

    pub fn bias_name(&self) -> String {
        join(&self.name, "bias")
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        store.insert(self.weight_name(), trunc_normal(vec![self.out_dim, self.in_dim], 0.02, rng))?;
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros(vec![self.out_dim]))?;
        }
        Ok(())
    }

    pub fn forward(&self, p: &Params, x: &Var) -> Result<Var> {
        let w = p.get(&self.weight_name())?;
        let b = if self.bias { Some(p.get(&self.bias_name())?) } else { None };
        ops::linear(x, &w, b.as_ref())
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Stride 1 with "same" padding.
    pub fn same(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn weight_name(&self) -> String {
        join(&self.name, "weight")
    }

    pub fn bias_name(&self) -> String {
        join(&self.name, "bias")
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_ch, self.in_ch, self.kernel, self.kernel]
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let fan_in = self.in_ch * self.kernel * self.kernel;
        store.insert(self.weight_name(), kaiming_uniform(self.weight_shape(), fan_in, rng))?;
        store.insert(self.bias_name(), Tensor::zeros(vec![self.out_ch]))
    }

    /// Zero weights and zero bias.
    pub fn init_zero(&self, store: &mut ParamStore) -> Result<()> {
        store.insert(self.weight_name(), Tensor::zeros(self.weight_shape()))?;
        store.insert(self.bias_name(), Tensor::zeros(vec![self.out_ch]))
    }

    pub fn forward(&self, p: &Params, x: &Var) -> Result<Var> {
        let w = p.get(&self.weight_name())?;
        let b = p.get(&self.bias_name())?;
        conv2d(x, &w, Some(&b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim,
            eps: 1e-5,
        }
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        store.insert(join(&self.name, "gamma"), Tensor::full(vec![self.dim], 1.0))?;
        store.insert(join(&self.name, "beta"), Tensor::zeros(vec![self.dim]))
    }

    pub fn forward(&self, p: &Params, x: &Var) -> Result<Var> {
        let g = p.get(&join(&self.name, "gamma"))?;
        let b = p.get(&join(&self.name, "beta"))?;
        ops::layer_norm(x, &g, &b, self.eps)
    }
}

/// Two linear layers with GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(join(name, "fc1"), dim, hidden),
            fc2: Linear::new(join(name, "fc2"), hidden, dim),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.fc1.init(store, rng)?;
        self.fc2.init(store, rng)
    }

    pub fn forward(&self, p: &Params, x: &Var) -> Result<Var> {
        let h = ops::gelu(&self.fc1.forward(p, x)?);
        self.fc2.forward(p, &h)
    }
}
