use rand::Rng;

use super::params::{Bound, ParamId, ParamSet};
use super::tape::{Tape, Var};
use super::tensor::Shape;
use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero(usize),
    Reflect(usize),
}

/// Square-kernel convolution layer.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: ParamId,
    bias: Option<ParamId>,
    stride: usize,
    padding: Padding,
}

/// Weight initialization for a layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Gaussian with a fixed standard deviation.
    Normal(f64),
    /// Gaussian with std `sqrt(2 / fan_in)`.
    He,
}

impl Init {
    fn std(self, fan_in: usize) -> f64 {
        match self {
            Init::Normal(s) => s,
            Init::He => (2.0 / fan_in as f64).sqrt(),
        }
    }
}

/// Constructor arguments shared by [`Conv2d`] and [`ConvTranspose2d`].
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    pub bias: bool,
    pub init: Init,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self {
            c_in,
            c_out,
            kernel,
            stride: 1,
            padding: Padding::Zero(kernel / 2),
            bias: true,
            init: Init::Normal(0.02),
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: Padding) -> Self {
        self.padding = p;
        self
    }

    pub fn bias(mut self, b: bool) -> Self {
        self.bias = b;
        self
    }

    pub fn init(mut self, i: Init) -> Self {
        self.init = i;
        self
    }
}

impl Conv2d {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, rng: &mut impl Rng, name: &str, spec: ConvSpec) -> Self {
        let k = spec.kernel;
        let std = spec.init.std(spec.c_in * k * k);
        let weight = ps.normal(format!("{name}.weight"), Shape::new(spec.c_out, spec.c_in, k, k), std, rng);
        let bias = spec
            .bias
            .then(|| ps.zeros(format!("{name}.bias"), Shape::new(1, spec.c_out, 1, 1)));
        Self {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding,
        }
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<'_, T>, p: &Bound, x: Var) -> Result<Var> {
        let (x, pad) = match self.padding {
            Padding::Zero(p) => (x, p),
            Padding::Reflect(0) => (x, 0),
            Padding::Reflect(r) => (t.reflect_pad(x, r)?, 0),
        };
        t.conv2d(x, p.var(self.weight), self.bias.map(|b| p.var(b)), self.stride, pad)
    }
}

/// Fractionally-strided convolution that doubles (for stride 2) the spatial size.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    weight: ParamId,
    bias: Option<ParamId>,
    stride: usize,
    pad: usize,
    output_pad: usize,
}

impl ConvTranspose2d {
    /// `stride`-times upsampling with kernel `spec.kernel` and zero padding
    /// `kernel / 2`; output size is exactly `stride * input`.
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, rng: &mut impl Rng, name: &str, spec: ConvSpec) -> Self {
        let k = spec.kernel;
        let std = spec.init.std(spec.c_in * k * k);
        let weight = ps.normal(format!("{name}.weight"), Shape::new(spec.c_in, spec.c_out, k, k), std, rng);
        let bias = spec
            .bias
            .then(|| ps.zeros(format!("{name}.bias"), Shape::new(1, spec.c_out, 1, 1)));
        let pad = k / 2;
        // (h-1)*s - 2p + k + op == s*h
        let output_pad = spec.stride + 2 * pad - k;
        Self {
            weight,
            bias,
            stride: spec.stride,
            pad,
            output_pad,
        }
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<'_, T>, p: &Bound, x: Var) -> Result<Var> {
        t.conv_transpose2d(
            x,
            p.var(self.weight),
            self.bias.map(|b| p.var(b)),
            self.stride,
            self.pad,
            self.output_pad,
        )
    }
}
