//! Plain convolution and PReLU layers on top of the graph.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{Bound, ParamId, ParamSet};
use crate::tensor::Tensor;

pub const PRELU_INIT: f64 = 0.25;

/// Fan-in scaled uniform init: `U(-1/√fan_in, 1/√fan_in)`.
pub fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = ps.insert(format!("{name}.w"), uniform_init(&[cout, cin, k, k], cin * k * k, rng));
        let b = ps.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b, stride, pad: k / 2 }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct PRelu {
    pub a: ParamId,
}

impl PRelu {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize) -> Self {
        Self {
            a: ps.insert(format!("{name}.a"), Tensor::full(&[channels], PRELU_INIT)),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.prelu(x, p.var(self.a))
    }
}
