//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation as a node; [`Tape::backward`] walks the
//! nodes in reverse and accumulates gradients for nodes that need them.
//! Parameters are borrowed into the tape, never copied.

use std::borrow::Cow;

use super::kernels::{self, ConvGeom};
use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::image::LUMA_WEIGHTS;
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One extracted window: `(sample, top, left)`.
pub type PatchCoord = (usize, usize, usize);

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvT2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ReflectPad {
        x: Var,
        pad: usize,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Affine(Var, T),
    Add(Var, Var),
    Sub(Var, Var),
    Concat(Vec<Var>),
    Patches {
        x: Var,
        coords: Vec<PatchCoord>,
        size: usize,
    },
    Luma(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    MeanAbsDiff(Var, Var),
    MeanSquareTo(Var, T),
    SubMean(Var, Var),
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation graph.
pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<'a, T: Scalar> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(msg()))
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs_grad)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    /// An owned leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// A borrowed leaf that receives a gradient.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn check_bias(&self, b: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = b {
            let s = self.shape(b);
            ensure(s == Shape::new(1, channels, 1, 1), || {
                format!("bias {s} does not match {channels} channels")
            })?;
        }
        Ok(())
    }

    /// Zero-padded convolution, weights `O x C x k x k`, bias `1 x O x 1 x 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        ensure(ws.c == xs.c && ws.h == ws.w, || format!("conv weight {ws} vs input {xs}"))?;
        self.check_bias(b, ws.n)?;
        let geom = ConvGeom::conv(xs.c, xs.h, xs.w, ws.h, stride, pad)
            .ok_or_else(|| Error::Geometry(format!("kernel {} too large for {xs}", ws.h)))?;
        let y = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom);
        let inputs: Vec<Var> = [x, w].into_iter().chain(b).collect();
        Ok(self.push_op(y, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Transposed convolution, weights `C_in x C_out x k x k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        ensure(ws.n == xs.c && ws.h == ws.w, || format!("conv-transpose weight {ws} vs input {xs}"))?;
        self.check_bias(b, ws.c)?;
        let geom = ConvGeom::transposed(ws.c, xs.h, xs.w, ws.h, stride, pad, output_pad)
            .ok_or_else(|| Error::Geometry(format!("invalid transposed geometry for {xs}")))?;
        let y = kernels::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom);
        let inputs: Vec<Var> = [x, w].into_iter().chain(b).collect();
        Ok(self.push_op(y, Op::ConvT2d { x, w, b, geom }, &inputs))
    }

    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Result<Var> {
        let s = self.shape(x);
        if pad >= s.h || pad >= s.w {
            return Err(Error::Geometry(format!("reflection pad {pad} too wide for {s}")));
        }
        let y = kernels::reflect_pad(self.value(x), pad);
        Ok(self.push_op(y, Op::ReflectPad { x, pad }, &[x]))
    }

    pub fn instance_norm(&mut self, x: Var) -> Var {
        let (y, inv_std) = kernels::instance_norm(self.value(x), T::lit(1e-5));
        self.push_op(y, Op::InstanceNorm { x, inv_std }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(T::zero()));
        self.push_op(y, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        let y = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        self.push_op(y, Op::LeakyRelu(x, s), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.tanh());
        self.push_op(y, Op::Tanh(x), &[x])
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (a, b) = (T::lit(scale), T::lit(shift));
        let y = self.value(x).map(|v| a * v + b);
        self.push_op(y, Op::Affine(x, a), &[x])
    }

    /// Tanh squashed into `[0, 1]`: `(tanh(x) + 1) / 2`.
    pub fn unit_tanh(&mut self, x: Var) -> Var {
        let t = self.tanh(x);
        self.affine(t, 0.5, 0.5)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        ensure(sa == sb, || format!("add {sa} + {sb}"))?;
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        Ok(self.push_op(y, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        ensure(sa == sb, || format!("sub {sa} - {sb}"))?;
        let vb = self.value(b).data();
        let data = self.value(a).data().iter().zip(vb).map(|(&x, &y)| x - y).collect();
        let y = Tensor::from_vec(sa, data)?;
        Ok(self.push_op(y, Op::Sub(a, b), &[a, b]))
    }

    /// Concatenates along channels. A var may appear more than once.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Empty("concat of nothing".into()))?);
        let mut c = 0;
        for &p in parts {
            let s = self.shape(p);
            ensure(s.n == first.n && s.h == first.h && s.w == first.w, || {
                format!("concat {first} with {s}")
            })?;
            c += s.c;
        }
        let shape = Shape::new(first.n, c, first.h, first.w);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..first.n {
            for &p in parts {
                data.extend_from_slice(self.value(p).sample(n));
            }
        }
        let y = Tensor::from_vec(shape, data)?;
        Ok(self.push_op(y, Op::Concat(parts.to_vec()), parts))
    }

    /// Gathers `size x size` windows into a new batch, one per coordinate.
    pub fn patches(&mut self, x: Var, coords: &[PatchCoord], size: usize) -> Result<Var> {
        let s = self.shape(x);
        if coords.is_empty() {
            return Err(Error::Empty("no patch coordinates".into()));
        }
        for &(n, y0, x0) in coords {
            if n >= s.n || y0 + size > s.h || x0 + size > s.w {
                return Err(Error::Geometry(format!("patch {size}@({n},{y0},{x0}) outside {s}")));
            }
        }
        let shape = Shape::new(coords.len(), s.c, size, size);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(shape.numel());
        for &(n, y0, x0) in coords {
            for c in 0..s.c {
                for y in 0..size {
                    let row = ((n * s.c + c) * s.h + y0 + y) * s.w + x0;
                    data.extend_from_slice(&src[row..row + size]);
                }
            }
        }
        let y = Tensor::from_vec(shape, data)?;
        Ok(self.push_op(
            y,
            Op::Patches {
                x,
                coords: coords.to_vec(),
                size,
            },
            &[x],
        ))
    }

    /// Rec.601 luma of a 3-channel batch (unclamped, linear).
    pub fn luma(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        ensure(s.c == 3, || format!("luma needs 3 channels, got {s}"))?;
        let w = LUMA_WEIGHTS.map(T::lit);
        let plane = s.plane();
        let v = self.value(x);
        let mut data = Vec::with_capacity(s.n * plane);
        for n in 0..s.n {
            let px = v.sample(n);
            for i in 0..plane {
                data.push(w[0] * px[i] + w[1] * px[plane + i] + w[2] * px[2 * plane + i]);
            }
        }
        let y = Tensor::from_vec(Shape::new(s.n, 1, s.h, s.w), data)?;
        Ok(self.push_op(y, Op::Luma(x), &[x]))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.h < 2 || s.w < 2 {
            return Err(Error::Geometry(format!("cannot pool {s}")));
        }
        let (y, argmax) = kernels::max_pool2(self.value(x));
        Ok(self.push_op(y, Op::MaxPool2 { x, argmax }, &[x]))
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let y = kernels::upsample2(self.value(x));
        self.push_op(y, Op::Upsample2(x), &[x])
    }

    /// Mean-reduced L1 distance, a scalar.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        ensure(sa == sb, || format!("L1 between {sa} and {sb}"))?;
        let n = T::lit(sa.numel() as f64);
        let sum: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y).abs())
            .sum();
        Ok(self.push_op(Tensor::scalar(sum / n), Op::MeanAbsDiff(a, b), &[a, b]))
    }

    /// `mean((x - target)^2)`, a scalar.
    pub fn mean_square_to(&mut self, x: Var, target: f64) -> Var {
        let t = T::lit(target);
        let v = self.value(x);
        let n = T::lit(v.numel() as f64);
        let sum: T = v.data().iter().map(|&e| (e - t) * (e - t)).sum();
        self.push_op(Tensor::scalar(sum / n), Op::MeanSquareTo(x, t), &[x])
    }

    /// `a - mean(b)`, broadcasting the mean of `b` over `a`.
    pub fn sub_mean(&mut self, a: Var, b: Var) -> Var {
        let vb = self.value(b);
        let mean = vb.data().iter().copied().sum::<T>() / T::lit(vb.numel() as f64);
        let y = self.value(a).map(|v| v - mean);
        self.push_op(y, Op::SubMean(a, b), &[a, b])
    }

    /// Weighted sum of scalars: `sum_i w_i * s_i`.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let scaled = if w == 1.0 { v } else { self.affine(v, w, 0.0) };
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled)?,
            });
        }
        acc.ok_or_else(|| Error::Empty("weighted sum of nothing".into()))
    }

    /// Gradients of the scalar `loss` w.r.t. every node that needs one.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let ls = self.shape(loss);
        assert_eq!(ls.numel(), 1, "backward needs a scalar loss, got {ls}");
        grads[loss.0] = Some(Tensor::full(ls, T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, node: &Node<'a, T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, t: Tensor<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(self.value(*x), self.value(*w), g, geom, self.wants(*x));
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if self.wants(*w) {
                    acc(*w, dw);
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let s = self.shape(b);
                    acc(b, Tensor::from_vec(s, db).unwrap());
                }
            }
            Op::ConvT2d { x, w, b, geom } => {
                let (dx, dw, db) =
                    kernels::conv_transpose2d_backward(self.value(*x), self.value(*w), g, geom, self.wants(*x));
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if self.wants(*w) {
                    acc(*w, dw);
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let s = self.shape(b);
                    acc(b, Tensor::from_vec(s, db).unwrap());
                }
            }
            Op::ReflectPad { x, pad } => {
                acc(*x, kernels::reflect_pad_backward(self.shape(*x), g, *pad));
            }
            Op::InstanceNorm { x, inv_std } => {
                acc(*x, kernels::instance_norm_backward(&node.value, inv_std, g));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = zip_map(g, xv, |gi, xi| if xi > T::zero() { gi } else { T::zero() });
                acc(*x, d);
            }
            Op::LeakyRelu(x, s) => {
                let s = *s;
                let d = zip_map(g, self.value(*x), |gi, xi| if xi > T::zero() { gi } else { gi * s });
                acc(*x, d);
            }
            Op::Tanh(x) => {
                let d = zip_map(g, &node.value, |gi, yi| gi * (T::one() - yi * yi));
                acc(*x, d);
            }
            Op::Affine(x, a) => {
                let a = *a;
                acc(*x, g.map(|v| v * a));
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.map(|v| -v));
                }
            }
            Op::Concat(parts) => {
                let s = g.shape();
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p);
                    let len = ps.sample_len();
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(ps.numel());
                        for n in 0..s.n {
                            let sample = g.sample(n);
                            d.extend_from_slice(&sample[offset..offset + len]);
                        }
                        acc(p, Tensor::from_vec(ps, d).unwrap());
                    }
                    offset += len;
                }
            }
            Op::Patches { x, coords, size } => {
                let s = self.shape(*x);
                let mut d = Tensor::zeros(s);
                let dd = d.data_mut();
                let gd = g.data();
                let mut k = 0;
                for &(n, y0, x0) in coords {
                    for c in 0..s.c {
                        for y in 0..*size {
                            let row = ((n * s.c + c) * s.h + y0 + y) * s.w + x0;
                            for j in 0..*size {
                                dd[row + j] = dd[row + j] + gd[k];
                                k += 1;
                            }
                        }
                    }
                }
                acc(*x, d);
            }
            Op::Luma(x) => {
                let s = self.shape(*x);
                let w = LUMA_WEIGHTS.map(T::lit);
                let plane = s.plane();
                let mut d = Vec::with_capacity(s.numel());
                for n in 0..s.n {
                    let gn = g.sample(n);
                    for wc in w {
                        d.extend(gn.iter().map(|&v| v * wc));
                    }
                }
                debug_assert_eq!(d.len(), s.n * 3 * plane);
                acc(*x, Tensor::from_vec(s, d).unwrap());
            }
            Op::MaxPool2 { x, argmax } => {
                let mut d = Tensor::zeros(self.shape(*x));
                let dd = d.data_mut();
                for (&i, &gi) in argmax.iter().zip(g.data()) {
                    dd[i] = dd[i] + gi;
                }
                acc(*x, d);
            }
            Op::Upsample2(x) => {
                acc(*x, kernels::upsample2_backward(self.shape(*x), g));
            }
            Op::MeanAbsDiff(a, b) => {
                let gs = g.item() / T::lit(self.shape(*a).numel() as f64);
                let d = zip_map(self.value(*a), self.value(*b), |x, y| {
                    let diff = x - y;
                    if diff > T::zero() {
                        gs
                    } else if diff < T::zero() {
                        -gs
                    } else {
                        T::zero()
                    }
                });
                if self.wants(*b) {
                    acc(*b, d.map(|v| -v));
                }
                if self.wants(*a) {
                    acc(*a, d);
                }
            }
            Op::MeanSquareTo(x, t) => {
                let xv = self.value(*x);
                let k = g.item() * T::lit(2.0) / T::lit(xv.numel() as f64);
                let t = *t;
                acc(*x, xv.map(|v| k * (v - t)));
            }
            Op::SubMean(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    let total: T = g.data().iter().copied().sum();
                    let bs = self.shape(*b);
                    let each = -total / T::lit(bs.numel() as f64);
                    acc(*b, Tensor::full(bs, each));
                }
            }
        }
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, s: Shape) -> Tensor<f64> {
        Tensor::from_vec(s, (0..s.numel()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences of `f` at every element of `x`, against the tape gradient.
    fn check_grad(x: Tensor<f64>, f: impl Fn(&mut Tape<'_, f64>, Var) -> Var) {
        let mut tape = Tape::new();
        let v = tape.variable(x.clone());
        let out = f(&mut tape, v);
        let grads = tape.backward(out);
        let analytic = grads.get(v).unwrap().clone();
        let h = 1e-6;
        for i in 0..x.numel() {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.data_mut()[i] += delta;
                let mut t = Tape::new();
                let v = t.constant(xp);
                let o = f(&mut t, v);
                t.value(o).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "element {i}: analytic {a} numeric {numeric}");
        }
    }

    fn project(t: &mut Tape<'_, f64>, y: Var, seed: u64) -> Var {
        // random linear functional, squared so the loss is smooth
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = t.shape(y);
        let target = t.constant(rand_tensor(&mut rng, s));
        let d = t.sub(y, target).unwrap();
        t.mean_square_to(d, 0.0)
    }

    #[test]
    fn grad_conv_and_norm_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w = rand_tensor(&mut rng, Shape::new(3, 2, 3, 3));
        let b = rand_tensor(&mut rng, Shape::new(1, 3, 1, 1));
        check_grad(rand_tensor(&mut rng, Shape::new(2, 2, 6, 6)), |t, x| {
            let w = t.constant(w.clone());
            let b = t.constant(b.clone());
            let p = t.reflect_pad(x, 1).unwrap();
            let y = t.conv2d(p, w, Some(b), 2, 1).unwrap();
            let y = t.instance_norm(y);
            let y = t.tanh(y);
            project(t, y, 1)
        });
    }

    #[test]
    fn grad_weights_of_transposed_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, Shape::new(2, 3, 4, 4));
        check_grad(rand_tensor(&mut rng, Shape::new(3, 2, 3, 3)), |t, w| {
            let x = t.constant(x.clone());
            let y = t.conv_transpose2d(x, w, None, 2, 1, 1).unwrap();
            assert_eq!(t.shape(y), Shape::new(2, 2, 8, 8));
            let y = t.leaky_relu(y, 0.2);
            project(t, y, 2)
        });
    }

    #[test]
    fn grad_structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        check_grad(rand_tensor(&mut rng, Shape::new(2, 3, 8, 8)), |t, x| {
            let l = t.luma(x).unwrap();
            let c = t.concat(&[x, l, l]).unwrap();
            let p = t.max_pool2(c).unwrap();
            let u = t.upsample2(p);
            let patches = t.patches(u, &[(0, 1, 2), (1, 0, 0), (0, 4, 4)], 4).unwrap();
            let r = t.relu(patches);
            let a = t.affine(r, 1.5, -0.1);
            project(t, a, 3)
        });
    }

    #[test]
    fn grad_loss_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let other = rand_tensor(&mut rng, Shape::new(1, 2, 3, 3));
        let fake = rand_tensor(&mut rng, Shape::new(1, 2, 3, 3));
        check_grad(rand_tensor(&mut rng, Shape::new(1, 2, 3, 3)), |t, x| {
            let o = t.constant(other.clone());
            let f = t.constant(fake.clone());
            let l1 = t.mean_abs_diff(x, o).unwrap();
            let rel = t.sub_mean(f, x);
            let rel2 = t.sub_mean(x, f);
            let m1 = t.mean_square_to(rel, 1.0);
            let m2 = t.mean_square_to(rel2, 0.0);
            t.weighted_sum(&[(l1, 2.0), (m1, 0.5), (m2, 0.5)]).unwrap()
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape: Tape<'_, f32> = Tape::new();
        let a = tape.constant(Tensor::scalar(2.0));
        let b = tape.variable(Tensor::scalar(3.0));
        let s = tape.add(a, b).unwrap();
        let g = tape.backward(s);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().item(), 1.0);
    }
}
