//! Channel slicing/concatenation and the checkerboard squeeze.
//!
//! Squeeze layout: output channel `k * C + c` at `(i, j)` holds input channel
//! `c` at `(2i + k / 2, 2j + k % 2)`, i.e. offsets
//! `k = 0: (0,0)`, `k = 1: (0,1)`, `k = 2: (1,0)`, `k = 3: (1,1)`.
//! Checkpoints depend on this ordering.

use super::{Graph, NodeId};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Source `(c, h, w)` of squeezed element `(out_c, i, j)` for input channel count `c_in`.
pub fn squeeze_index(c_in: usize, out_c: usize, i: usize, j: usize) -> (usize, usize, usize) {
    let k = out_c / c_in;
    let c = out_c % c_in;
    (c, 2 * i + k / 2, 2 * j + k % 2)
}

/// (N, C, H, W) -> (N, 4C, H/2, W/2). Caller checks that H and W are even.
pub fn squeeze_tensor<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    assert!(s.h % 2 == 0 && s.w % 2 == 0, "squeeze needs even spatial dims, got {s}");
    let os = Shape::new(s.n, 4 * s.c, s.h / 2, s.w / 2);
    let src = x.data();
    let mut out = Vec::with_capacity(os.numel());
    for n in 0..os.n {
        for oc in 0..os.c {
            for i in 0..os.h {
                for j in 0..os.w {
                    let (c, h, w) = squeeze_index(s.c, oc, i, j);
                    out.push(src[s.index(n, c, h, w)]);
                }
            }
        }
    }
    Tensor::from_vec(os, out).unwrap()
}

/// Exact inverse of [`squeeze_tensor`].
pub fn unsqueeze_tensor<T: Real>(y: &Tensor<T>) -> Tensor<T> {
    let os = y.shape();
    assert!(os.c % 4 == 0, "unsqueeze needs a channel count divisible by 4, got {os}");
    let s = Shape::new(os.n, os.c / 4, os.h * 2, os.w * 2);
    let src = y.data();
    let mut out = vec![T::zero(); s.numel()];
    for n in 0..os.n {
        for oc in 0..os.c {
            for i in 0..os.h {
                for j in 0..os.w {
                    let (c, h, w) = squeeze_index(s.c, oc, i, j);
                    out[s.index(n, c, h, w)] = src[os.index(n, oc, i, j)];
                }
            }
        }
    }
    Tensor::from_vec(s, out).unwrap()
}

impl<T: Real> Graph<'_, T> {
    /// Channels `[start, start + len)`.
    pub fn narrow_channels(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let s = self.shape(x);
        assert!(len > 0 && start + len <= s.c, "narrow_channels: [{start}, {}) out of {s}", start + len);
        let plane = s.plane();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(s.n * len * plane);
        for n in 0..s.n {
            let base = (n * s.c + start) * plane;
            out.extend_from_slice(&xv[base..base + len * plane]);
        }
        let y = Tensor::from_vec(s.with_c(len), out).unwrap();
        self.push(y, &[x], move |ctx| {
            let mut g = Tensor::zeros(s);
            let gd = ctx.grad.data();
            for n in 0..s.n {
                let base = (n * s.c + start) * plane;
                g.data_mut()[base..base + len * plane].copy_from_slice(&gd[n * len * plane..(n + 1) * len * plane]);
            }
            vec![Some(g)]
        })
    }

    pub fn concat_channels(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "concat of nothing");
        let s0 = self.shape(xs[0]);
        let chans: Vec<usize> = xs.iter().map(|&x| self.shape(x).c).collect();
        for &x in xs {
            let s = self.shape(x);
            assert!(s.n == s0.n && s.h == s0.h && s.w == s0.w, "concat_channels: {s} vs {s0}");
        }
        let total: usize = chans.iter().sum();
        let os = s0.with_c(total);
        let plane = s0.plane();
        let mut out = Vec::with_capacity(os.numel());
        for n in 0..s0.n {
            for (&x, &c) in xs.iter().zip(&chans) {
                out.extend_from_slice(&self.value(x).data()[n * c * plane..(n + 1) * c * plane]);
            }
        }
        let y = Tensor::from_vec(os, out).unwrap();
        self.push(y, xs, move |ctx| {
            let gd = ctx.grad.data();
            let mut off = 0;
            let mut grads = Vec::with_capacity(chans.len());
            for (k, &c) in chans.iter().enumerate() {
                if !ctx.needs[k] {
                    grads.push(None);
                    off += c;
                    continue;
                }
                let mut g = Vec::with_capacity(s0.n * c * plane);
                for n in 0..s0.n {
                    let base = (n * total + off) * plane;
                    g.extend_from_slice(&gd[base..base + c * plane]);
                }
                grads.push(Some(Tensor::from_vec(Shape::new(s0.n, c, s0.h, s0.w), g).unwrap()));
                off += c;
            }
            grads
        })
    }

    pub fn squeeze2(&mut self, x: NodeId) -> NodeId {
        let y = squeeze_tensor(self.value(x));
        self.push(y, &[x], |ctx| vec![Some(unsqueeze_tensor(ctx.grad))])
    }

    pub fn unsqueeze2(&mut self, x: NodeId) -> NodeId {
        let y = unsqueeze_tensor(self.value(x));
        self.push(y, &[x], |ctx| vec![Some(squeeze_tensor(ctx.grad))])
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::check_op;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn squeeze_matches_index_formula_on_4x4() {
        let s = Shape::new(1, 3, 4, 4);
        let x = Tensor::<f64>::from_fn(s, |_, c, h, w| (c * 100 + h * 10 + w) as f64);
        let y = squeeze_tensor(&x);
        assert_eq!(y.shape(), Shape::new(1, 12, 2, 2));
        for k in 0..4 {
            for c in 0..3 {
                for i in 0..2 {
                    for j in 0..2 {
                        let (row, col) = (k / 2, k % 2);
                        assert_eq!(y.at(0, c + k * 3, i, j), x.at(0, c, 2 * i + row, 2 * j + col));
                    }
                }
            }
        }
        assert_eq!(unsqueeze_tensor(&y), x);
    }

    #[test]
    fn shape_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::<f64>::randn(Shape::new(2, 5, 2, 4), 1.0, &mut rng);
        let b = Tensor::<f64>::randn(Shape::new(2, 2, 2, 4), 1.0, &mut rng);
        check_op(&[a.clone()], |g, i| g.narrow_channels(i[0], 1, 3), 1e-8);
        check_op(&[a.clone(), b], |g, i| g.concat_channels(&[i[1], i[0], i[1]]), 1e-8);
        check_op(&[a.clone()], |g, i| g.squeeze2(i[0]), 1e-8);
        let q = Tensor::<f64>::randn(Shape::new(1, 8, 2, 3), 1.0, &mut rng);
        check_op(&[q], |g, i| g.unsqueeze2(i[0]), 1e-8);
    }
}
