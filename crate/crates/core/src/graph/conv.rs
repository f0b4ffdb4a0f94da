//! 2-D convolution (zero padding) via im2col + GEMM.
//!
//! Work is split per batch item; per-item weight gradients are summed in
//! batch order so results do not depend on the thread count.

use rayon::prelude::*;

use super::{Graph, NodeId};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeometry, out: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut out[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_sample<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, c_out: usize, g: &ConvGeometry) -> Vec<T> {
    let (rows, p) = (g.rows(), g.cols());
    let mut out = vec![T::zero(); c_out * p];
    if let Some(b) = bias {
        for (o, chunk) in out.chunks_mut(p).enumerate() {
            chunk.iter_mut().for_each(|v| *v = b[o]);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    if g.is_pointwise() {
        T::gemm(c_out, rows, p, T::one(), w, rows as isize, 1, x, p as isize, 1, beta, &mut out, p as isize, 1);
    } else {
        let mut cols = vec![T::zero(); rows * p];
        im2col(x, g, &mut cols);
        T::gemm(c_out, rows, p, T::one(), w, rows as isize, 1, &cols, p as isize, 1, beta, &mut out, p as isize, 1);
    }
    out
}

/// Plain convolution without taping.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(ws.c, xs.c, "conv2d: weight expects {} input channels, input has {}", ws.c, xs.c);
    assert_eq!(ws.h, ws.w, "conv2d: square kernels only");
    let g = ConvGeometry { c_in: xs.c, h: xs.h, w: xs.w, k: ws.h, stride, pad };
    assert!(xs.h + 2 * pad >= g.k && xs.w + 2 * pad >= g.k, "conv2d: input {xs} smaller than kernel");
    let os = Shape::new(xs.n, ws.n, g.out_h(), g.out_w());
    let bd = bias.map(|b| b.data());
    let per: Vec<Vec<T>> =
        (0..xs.n).into_par_iter().map(|n| conv_sample(x.sample(n), w.data(), bd, ws.n, &g)).collect();
    Tensor::from_vec(os, per.concat()).unwrap()
}

impl<T: Real> Graph<'_, T> {
    /// Convolution with weight (C_out, C_in, k, k) and optional bias (1, C_out, 1, 1).
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>, stride: usize, pad: usize) -> NodeId {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if let Some(b) = bias {
            assert_eq!(self.shape(b), Shape::new(1, ws.n, 1, 1), "conv2d: bias shape");
        }
        let y = conv2d_forward(self.value(x), self.value(w), bias.map(|b| self.value(b)), stride, pad);
        let g = ConvGeometry { c_in: xs.c, h: xs.h, w: xs.w, k: ws.h, stride, pad };
        let c_out = ws.n;
        let mut parents = vec![x, w];
        parents.extend(bias);
        self.push(y, &parents, move |ctx| {
            let (xv, wv, gv) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
            let (need_x, need_w) = (ctx.needs[0], ctx.needs[1]);
            let need_b = ctx.needs.get(2).copied().unwrap_or(false);
            let (rows, p) = (g.rows(), g.cols());
            let per: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..xs.n)
                .into_par_iter()
                .map(|n| {
                    let gout = gv.sample(n);
                    let cols_owned;
                    let cols: &[T] = if g.is_pointwise() {
                        xv.sample(n)
                    } else if need_w {
                        let mut c = vec![T::zero(); rows * p];
                        im2col(xv.sample(n), &g, &mut c);
                        cols_owned = c;
                        &cols_owned
                    } else {
                        &[]
                    };
                    let dw = need_w.then(|| {
                        let mut dw = vec![T::zero(); c_out * rows];
                        // dW = gout (c_out x p) * cols^T (p x rows)
                        T::gemm(c_out, p, rows, T::one(), gout, p as isize, 1, cols, 1, p as isize, T::zero(), &mut dw, rows as isize, 1);
                        dw
                    });
                    let dx = need_x.then(|| {
                        let mut dcols = vec![T::zero(); rows * p];
                        // dcols = W^T (rows x c_out) * gout (c_out x p)
                        T::gemm(rows, c_out, p, T::one(), wv.data(), 1, rows as isize, gout, p as isize, 1, T::zero(), &mut dcols, p as isize, 1);
                        if g.is_pointwise() {
                            dcols
                        } else {
                            let mut dx = vec![T::zero(); g.c_in * g.h * g.w];
                            col2im(&dcols, &g, &mut dx);
                            dx
                        }
                    });
                    (dw, dx)
                })
                .collect();
            let mut dw_total: Option<Vec<T>> = None;
            let mut dx_all: Vec<T> = Vec::new();
            for (dw, dx) in per {
                if let Some(dw) = dw {
                    match &mut dw_total {
                        Some(acc) => acc.iter_mut().zip(&dw).for_each(|(a, b)| *a += *b),
                        None => dw_total = Some(dw),
                    }
                }
                if let Some(dx) = dx {
                    dx_all.extend(dx);
                }
            }
            let gx = need_x.then(|| Tensor::from_vec(xs, dx_all).unwrap());
            let gw = dw_total.map(|d| Tensor::from_vec(wv.shape(), d).unwrap());
            let mut out = vec![gx, gw];
            if ctx.inputs.len() == 3 {
                let gb = need_b.then(|| {
                    let mut b = vec![T::zero(); c_out];
                    for (i, chunk) in gv.data().chunks(p).enumerate() {
                        b[i % c_out] += chunk.iter().copied().sum::<T>();
                    }
                    Tensor::from_vec(Shape::new(1, c_out, 1, 1), b).unwrap()
                });
                out.push(gb);
            }
            out
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::check_op;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let oh = (xs.h + 2 * pad - ws.h) / stride + 1;
        let ow = (xs.w + 2 * pad - ws.w) / stride + 1;
        Tensor::from_fn(Shape::new(xs.n, ws.n, oh, ow), |n, o, i, j| {
            let mut acc = 0.0;
            for c in 0..xs.c {
                for a in 0..ws.h {
                    for b in 0..ws.w {
                        let y = (i * stride + a) as isize - pad as isize;
                        let z = (j * stride + b) as isize - pad as isize;
                        if y >= 0 && z >= 0 && (y as usize) < xs.h && (z as usize) < xs.w {
                            acc += x.at(n, c, y as usize, z as usize) * w.at(o, c, a, b);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(Shape::new(2, 3, 5, 6), 1.0, &mut rng);
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
            let w = Tensor::<f64>::randn(Shape::new(4, 3, k, k), 1.0, &mut rng);
            let got = conv2d_forward(&x, &w, None, stride, pad);
            assert!(got.max_abs_diff(&naive(&x, &w, stride, pad)) < 1e-12);
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn(Shape::new(2, 3, 4, 5), 1.0, &mut rng);
        let b = Tensor::<f64>::randn(Shape::new(1, 2, 1, 1), 1.0, &mut rng);
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let w = Tensor::<f64>::randn(Shape::new(2, 3, k, k), 1.0, &mut rng);
            check_op(&[x.clone(), w.clone(), b.clone()], |g, i| g.conv2d(i[0], i[1], Some(i[2]), stride, pad), 1e-6);
            check_op(&[x.clone(), w], |g, i| g.conv2d(i[0], i[1], None, stride, pad), 1e-6);
        }
    }
}
