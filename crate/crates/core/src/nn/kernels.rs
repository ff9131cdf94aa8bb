//! Batched convolution and resampling kernels with their adjoints.
//!
//! Batch samples are processed in parallel; every per-sample reduction is
//! summed afterwards in sample order so results do not depend on scheduling.

use rayon::prelude::*;

use super::tensor::{Shape, Tensor};
use crate::scalar::Scalar;

/// Geometry of a strided, zero-padded square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Output extent of a convolution over an `h x w` input, `None` if empty.
    pub fn conv(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        let hp = h + 2 * pad;
        let wp = w + 2 * pad;
        if hp < k || wp < k || stride == 0 {
            return None;
        }
        Some(Self {
            c_in,
            h_in: h,
            w_in: w,
            k,
            stride,
            pad,
            h_out: (hp - k) / stride + 1,
            w_out: (wp - k) / stride + 1,
        })
    }

    /// Geometry of the convolution whose adjoint is a transposed convolution
    /// taking `h x w` to `(h-1)*stride - 2*pad + k + output_pad`.
    pub fn transposed(
        c_out: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Option<Self> {
        let ho = ((h - 1) * stride + k + output_pad).checked_sub(2 * pad)?;
        let wo = ((w - 1) * stride + k + output_pad).checked_sub(2 * pad)?;
        let g = Self::conv(c_out, ho, wo, k, stride, pad)?;
        (g.h_out == h && g.w_out == w).then_some(g)
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfolds one `C x H x W` sample into a `(C*k*k) x (Ho*Wo)` patch matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n_cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &x[c * g.h_in * g.w_in..(c + 1) * g.h_in * g.w_in];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let out = &mut cols[row * n_cols..(row + 1) * n_cols];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut out[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h_in as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w_in..(iy as usize + 1) * g.w_in];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w_in as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds a patch matrix back into a sample.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let n_cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h_in * g.w_in..(c + 1) * g.h_in * g.w_in];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let src = &cols[row * n_cols..(row + 1) * n_cols];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h_in as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w_in..(iy as usize + 1) * g.w_in];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w_in as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.w_out + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn row_major(cols: usize) -> (isize, isize) {
    (cols as isize, 1)
}

fn transposed(rows_of_stored: usize) -> (isize, isize) {
    // reading a stored `r x c` matrix as its transpose
    (1, rows_of_stored as isize)
}

fn sum_in_order<T: Scalar>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for p in parts {
        for (a, b) in acc.iter_mut().zip(p) {
            *a = *a + b;
        }
    }
    acc
}

fn add_bias<T: Scalar>(y: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in y.chunks_mut(plane).zip(bias.iter().cycle()) {
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
}

fn bias_grad<T: Scalar>(dy: &Tensor<T>) -> Vec<T> {
    let s = dy.shape();
    let mut db = vec![T::zero(); s.c];
    for n in 0..s.n {
        for (c, plane) in dy.sample(n).chunks(s.plane()).enumerate() {
            db[c] = db[c] + plane.iter().copied().sum();
        }
    }
    db
}

/// `y = w * x + b`, weights `O x C x k x k`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, g: &ConvGeom) -> Tensor<T> {
    let xs = x.shape();
    let o = w.shape().n;
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let out_shape = Shape::new(xs.n, o, g.h_out, g.w_out);
    let mut out = Tensor::zeros(out_shape);
    out.data_mut()
        .par_chunks_mut(out_shape.sample_len())
        .enumerate()
        .for_each(|(n, y)| {
            let mut cols = vec![T::zero(); rows * ncols];
            im2col(x.sample(n), g, &mut cols);
            T::gemm(o, rows, ncols, T::one(), w.data(), row_major(rows), &cols, row_major(ncols), T::zero(), y, row_major(ncols));
            if let Some(b) = b {
                add_bias(y, b.data(), ncols);
            }
        });
    out
}

/// Gradients of [`conv2d`] w.r.t. input (if requested), weights and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Vec<T>) {
    let xs = x.shape();
    let o = w.shape().n;
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let per_sample: Vec<(Vec<T>, Option<Vec<T>>)> = (0..xs.n)
        .into_par_iter()
        .map(|n| {
            let dy_n = dy.sample(n);
            let mut cols = vec![T::zero(); rows * ncols];
            im2col(x.sample(n), g, &mut cols);
            let mut dw = vec![T::zero(); o * rows];
            T::gemm(o, ncols, rows, T::one(), dy_n, row_major(ncols), &cols, transposed(ncols), T::zero(), &mut dw, row_major(rows));
            let dx = need_dx.then(|| {
                T::gemm(rows, o, ncols, T::one(), w.data(), transposed(rows), dy_n, row_major(ncols), T::zero(), &mut cols, row_major(ncols));
                let mut dx = vec![T::zero(); xs.sample_len()];
                col2im(&cols, g, &mut dx);
                dx
            });
            (dw, dx)
        })
        .collect();
    let mut dws = Vec::with_capacity(xs.n);
    let mut dx_data = need_dx.then(|| Vec::with_capacity(xs.numel()));
    for (dw, dx) in per_sample {
        dws.push(dw);
        if let (Some(acc), Some(dx)) = (dx_data.as_mut(), dx) {
            acc.extend(dx);
        }
    }
    let dw = Tensor::from_vec(w.shape(), sum_in_order(dws, o * rows)).unwrap();
    let dx = dx_data.map(|d| Tensor::from_vec(xs, d).unwrap());
    (dx, dw, bias_grad(dy))
}

/// Transposed convolution, weights `C_in x C_out x k x k`. `g` is the
/// geometry of the forward convolution it is the adjoint of.
pub fn conv_transpose2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, g: &ConvGeom) -> Tensor<T> {
    let xs = x.shape();
    let c_in = xs.c;
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let out_shape = Shape::new(xs.n, g.c_in, g.h_in, g.w_in);
    let mut out = Tensor::zeros(out_shape);
    out.data_mut()
        .par_chunks_mut(out_shape.sample_len())
        .enumerate()
        .for_each(|(n, y)| {
            let mut cols = vec![T::zero(); rows * ncols];
            T::gemm(rows, c_in, ncols, T::one(), w.data(), transposed(rows), x.sample(n), row_major(ncols), T::zero(), &mut cols, row_major(ncols));
            col2im(&cols, g, y);
            if let Some(b) = b {
                add_bias(y, b.data(), g.h_in * g.w_in);
            }
        });
    out
}

pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Vec<T>) {
    let xs = x.shape();
    let c_in = xs.c;
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let per_sample: Vec<(Vec<T>, Option<Vec<T>>)> = (0..xs.n)
        .into_par_iter()
        .map(|n| {
            let mut cols = vec![T::zero(); rows * ncols];
            im2col(dy.sample(n), g, &mut cols);
            let mut dw = vec![T::zero(); c_in * rows];
            T::gemm(c_in, ncols, rows, T::one(), x.sample(n), row_major(ncols), &cols, transposed(ncols), T::zero(), &mut dw, row_major(rows));
            let dx = need_dx.then(|| {
                let mut dx = vec![T::zero(); xs.sample_len()];
                T::gemm(c_in, rows, ncols, T::one(), w.data(), row_major(rows), &cols, row_major(ncols), T::zero(), &mut dx, row_major(ncols));
                dx
            });
            (dw, dx)
        })
        .collect();
    let mut dws = Vec::with_capacity(xs.n);
    let mut dx_data = need_dx.then(|| Vec::with_capacity(xs.numel()));
    for (dw, dx) in per_sample {
        dws.push(dw);
        if let (Some(acc), Some(dx)) = (dx_data.as_mut(), dx) {
            acc.extend(dx);
        }
    }
    let dw = Tensor::from_vec(w.shape(), sum_in_order(dws, c_in * rows)).unwrap();
    let dx = dx_data.map(|d| Tensor::from_vec(xs, d).unwrap());
    (dx, dw, bias_grad(dy))
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// Source index for every output element of a reflection pad.
fn reflect_index(s: Shape, pad: usize) -> (Shape, Vec<usize>) {
    let out = Shape::new(s.n, s.c, s.h + 2 * pad, s.w + 2 * pad);
    let mut idx = Vec::with_capacity(out.numel());
    for nc in 0..s.n * s.c {
        for y in 0..out.h {
            let sy = reflect(y as isize - pad as isize, s.h);
            for x in 0..out.w {
                let sx = reflect(x as isize - pad as isize, s.w);
                idx.push((nc * s.h + sy) * s.w + sx);
            }
        }
    }
    (out, idx)
}

pub fn reflect_pad<T: Scalar>(x: &Tensor<T>, pad: usize) -> Tensor<T> {
    let (shape, idx) = reflect_index(x.shape(), pad);
    let data = idx.iter().map(|&i| x.data()[i]).collect();
    Tensor::from_vec(shape, data).unwrap()
}

pub fn reflect_pad_backward<T: Scalar>(x_shape: Shape, dy: &Tensor<T>, pad: usize) -> Tensor<T> {
    let (_, idx) = reflect_index(x_shape, pad);
    let mut dx = Tensor::zeros(x_shape);
    let d = dx.data_mut();
    for (&i, &g) in idx.iter().zip(dy.data()) {
        d[i] = d[i] + g;
    }
    dx
}

/// Per-(sample, channel) normalization. Returns the output and `1/std` per plane.
pub fn instance_norm<T: Scalar>(x: &Tensor<T>, eps: T) -> (Tensor<T>, Vec<T>) {
    let s = x.shape();
    let plane = s.plane();
    let m = T::lit(plane as f64);
    let mut out = Tensor::zeros(s);
    let mut inv_std = Vec::with_capacity(s.n * s.c);
    for (src, dst) in x.data().chunks(plane).zip(out.data_mut().chunks_mut(plane)) {
        let mean = src.iter().copied().sum::<T>() / m;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
        let is = T::one() / (var + eps).sqrt();
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - mean) * is;
        }
        inv_std.push(is);
    }
    (out, inv_std)
}

/// `dx = inv_std * (dy - mean(dy) - xhat * mean(dy * xhat))` per plane.
pub fn instance_norm_backward<T: Scalar>(xhat: &Tensor<T>, inv_std: &[T], dy: &Tensor<T>) -> Tensor<T> {
    let s = xhat.shape();
    let plane = s.plane();
    let m = T::lit(plane as f64);
    let mut dx = Tensor::zeros(s);
    for (((xh, g), d), &is) in xhat
        .data()
        .chunks(plane)
        .zip(dy.data().chunks(plane))
        .zip(dx.data_mut().chunks_mut(plane))
        .zip(inv_std)
    {
        let mean_g = g.iter().copied().sum::<T>() / m;
        let mean_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / m;
        for ((o, &gi), &xi) in d.iter_mut().zip(g).zip(xh) {
            *o = is * (gi - mean_g - xi * mean_gx);
        }
    }
    dx
}

/// 2x2 max pooling (floor on odd sizes). Returns output and argmax indices.
pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let s = x.shape();
    let out_s = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(out_s.numel());
    let mut arg = Vec::with_capacity(out_s.numel());
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for oy in 0..out_s.h {
            for ox in 0..out_s.w {
                let mut best = base + 2 * oy * s.w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * s.w + 2 * ox + dx;
                    if x.data()[i] > x.data()[best] {
                        best = i;
                    }
                }
                out.push(x.data()[best]);
                arg.push(best);
            }
        }
    }
    (Tensor::from_vec(out_s, out).unwrap(), arg)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let out_s = Shape::new(s.n, s.c, s.h * 2, s.w * 2);
    let mut out = Vec::with_capacity(out_s.numel());
    for plane in x.data().chunks(s.plane()) {
        for y in 0..out_s.h {
            for xx in 0..out_s.w {
                out.push(plane[(y / 2) * s.w + xx / 2]);
            }
        }
    }
    Tensor::from_vec(out_s, out).unwrap()
}

pub fn upsample2_backward<T: Scalar>(x_shape: Shape, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape);
    let ow = x_shape.w * 2;
    for (src, dst) in dy
        .data()
        .chunks(x_shape.plane() * 4)
        .zip(dx.data_mut().chunks_mut(x_shape.plane()))
    {
        for (i, &g) in src.iter().enumerate() {
            let (y, x) = (i / ow, i % ow);
            let j = (y / 2) * x_shape.w + x / 2;
            dst[j] = dst[j] + g;
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, s: Shape) -> Tensor<f64> {
        Tensor::from_vec(s, (0..s.numel()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct 7-loop convolution.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let g = ConvGeom::conv(xs.c, xs.h, xs.w, ws.h, stride, pad).unwrap();
        let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, g.h_out, g.w_out));
        let os = out.shape();
        for n in 0..xs.n {
            for o in 0..ws.n {
                for oy in 0..g.h_out {
                    for ox in 0..g.w_out {
                        let mut acc = 0.0;
                        for c in 0..xs.c {
                            for ky in 0..ws.h {
                                for kx in 0..ws.w {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                                        acc += w.data()[((o * ws.c + c) * ws.h + ky) * ws.w + kx]
                                            * x.data()[((n * xs.c + c) * xs.h + iy as usize) * xs.w + ix as usize];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((n * os.c + o) * os.h + oy) * os.w + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (2, 1, 4), (1, 0, 1), (1, 3, 7)] {
            let x = rand_tensor(&mut rng, Shape::new(2, 3, 9, 8));
            let w = rand_tensor(&mut rng, Shape::new(4, 3, k, k));
            let g = ConvGeom::conv(3, 9, 8, k, stride, pad).unwrap();
            let y = conv2d(&x, &w, None, &g);
            let oracle = naive_conv(&x, &w, stride, pad);
            assert_eq!(y.shape(), oracle.shape());
            for (a, b) in y.data().iter().zip(oracle.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), dy> == <x, conv^T(dy)> and == <w, dW>
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, Shape::new(2, 3, 8, 7));
        let w = rand_tensor(&mut rng, Shape::new(5, 3, 3, 3));
        let g = ConvGeom::conv(3, 8, 7, 3, 2, 1).unwrap();
        let y = conv2d(&x, &w, None, &g);
        let dy = rand_tensor(&mut rng, y.shape());
        let (dx, dw, db) = conv2d_backward(&x, &w, &dy, &g, true);
        let lhs = dot(&y, &dy);
        assert!((lhs - dot(&x, &dx.unwrap())).abs() < 1e-10);
        assert!((lhs - dot(&w, &dw)).abs() < 1e-10);
        let total: f64 = dy.data().iter().sum();
        assert!((db.iter().sum::<f64>() - total).abs() < 1e-10);
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // ConvT 4->3 channels, 5x6 -> 10x12
        let g = ConvGeom::transposed(3, 5, 6, 3, 2, 1, 1).unwrap();
        assert_eq!((g.h_in, g.w_in), (10, 12));
        let x = rand_tensor(&mut rng, Shape::new(2, 4, 5, 6));
        let w = rand_tensor(&mut rng, Shape::new(4, 3, 3, 3));
        let y = conv_transpose2d(&x, &w, None, &g);
        assert_eq!(y.shape(), Shape::new(2, 3, 10, 12));
        // conv with the same weights (read as O=4, C=3) maps y-space to x-space
        let u = rand_tensor(&mut rng, y.shape());
        let cu = conv2d(&u, &w, None, &g);
        assert!((dot(&y, &u) - dot(&x, &cu)).abs() < 1e-10);

        let dy = rand_tensor(&mut rng, y.shape());
        let (dx, dw, _) = conv_transpose2d_backward(&x, &w, &dy, &g, true);
        let lhs = dot(&y, &dy);
        assert!((lhs - dot(&x, &dx.unwrap())).abs() < 1e-10);
        assert!((lhs - dot(&w, &dw)).abs() < 1e-10);
    }

    #[test]
    fn reflect_pad_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, Shape::new(1, 2, 4, 5));
        let y = reflect_pad(&x, 3);
        assert_eq!(y.shape(), Shape::new(1, 2, 10, 11));
        // row 0 of the padded plane mirrors input row 3
        assert_eq!(y.data()[3], x.data()[3 * 5]);
        let dy = rand_tensor(&mut rng, y.shape());
        let dx = reflect_pad_backward(x.shape(), &dy, 3);
        assert!((dot(&y, &dy) - dot(&x, &dx)).abs() < 1e-12);
    }

    #[test]
    fn pool_and_upsample() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 4), vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0]).unwrap();
        let (p, arg) = max_pool2(&x);
        assert_eq!(p.data(), &[5.0, 9.0]);
        assert_eq!(arg, vec![1, 6]);
        let u = upsample2(&p);
        assert_eq!(u.data(), &[5.0, 5.0, 9.0, 9.0, 5.0, 5.0, 9.0, 9.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dy = rand_tensor(&mut rng, u.shape());
        let dx = upsample2_backward(p.shape(), &dy);
        assert!((dot(&u, &dy) - dot(&p, &dx)).abs() < 1e-12);
    }

    #[test]
    fn instance_norm_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, Shape::new(2, 3, 5, 5));
        let (y, _) = instance_norm(&x, 1e-5);
        for plane in y.data().chunks(25) {
            let m: f64 = plane.iter().sum::<f64>() / 25.0;
            let v: f64 = plane.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 25.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }
}
