//! Elementwise maps, channel broadcasts and reductions.

use super::{Graph, NodeId};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

fn assert_same(a: Shape, b: Shape, op: &str) {
    assert_eq!(a, b, "{op}: shape mismatch {a} vs {b}");
}

fn assert_channel_vec(v: Shape, x: Shape, op: &str) {
    assert!(v.n == 1 && v.h == 1 && v.w == 1 && v.c == x.c, "{op}: expected (1, {}, 1, 1), got {v}", x.c);
}

impl<T: Real> Graph<'_, T> {
    /// Elementwise map with derivative `d(x, y)` = dy/dx.
    fn unary(&mut self, x: NodeId, f: impl Fn(T) -> T, d: impl Fn(T, T) -> T + 'static) -> NodeId {
        let y = self.value(x).map(f);
        self.push(y, &[x], move |ctx| {
            let (xv, yv, g) = (ctx.inputs[0].data(), ctx.output.data(), ctx.grad.data());
            let data = xv.iter().zip(yv).zip(g).map(|((&a, &b), &gg)| gg * d(a, b)).collect();
            vec![Some(Tensor::from_vec(ctx.grad.shape(), data).unwrap())]
        })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_same(self.shape(a), self.shape(b), "add");
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q);
        self.push(y, &[a, b], |ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_same(self.shape(a), self.shape(b), "sub");
        let y = self.value(a).zip_map(self.value(b), |p, q| p - q);
        self.push(y, &[a, b], |ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|v| -v))])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_same(self.shape(a), self.shape(b), "mul");
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q);
        self.push(y, &[a, b], |ctx| {
            let ga = ctx.needs[0].then(|| ctx.grad.zip_map(ctx.inputs[1], |g, q| g * q));
            let gb = ctx.needs[1].then(|| ctx.grad.zip_map(ctx.inputs[0], |g, p| g * p));
            vec![ga, gb]
        })
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.scale(x, -1.0)
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let k = T::from_f64(k);
        let y = self.value(x).map(|v| v * k);
        self.push(y, &[x], move |ctx| vec![Some(ctx.grad.map(|g| g * k))])
    }

    pub fn add_scalar(&mut self, x: NodeId, k: f64) -> NodeId {
        let k = T::from_f64(k);
        let y = self.value(x).map(|v| v + k);
        self.push(y, &[x], |ctx| vec![Some(ctx.grad.clone())])
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.exp(), |_, y| y)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    /// `bound * tanh(x / bound)`: smooth clamp into `(-bound, bound)`, identity near 0.
    pub fn soft_clamp(&mut self, x: NodeId, bound: f64) -> NodeId {
        let b = T::from_f64(bound);
        self.unary(
            x,
            move |v| b * (v / b).tanh(),
            move |_, y| {
                let t = y / b;
                T::one() - t * t
            },
        )
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let s = T::from_f64(slope);
        self.unary(x, move |v| if v > T::zero() { v } else { v * s }, move |v, _| if v > T::zero() { T::one() } else { s })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.leaky_relu(x, 0.0)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.abs(), |v, _| {
            if v > T::zero() {
                T::one()
            } else if v < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v * v, |v, _| v + v)
    }

    pub fn log_abs(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.abs().ln(), |v, _| T::one() / v)
    }

    pub fn recip(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| T::one() / v, |_, y| -y * y)
    }

    /// `x + b` with `b` of shape (1, C, 1, 1).
    pub fn add_channel(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xs = self.shape(x);
        assert_channel_vec(self.shape(b), xs, "add_channel");
        let bv = self.value(b).data().to_vec();
        let mut y = self.value(x).clone();
        let plane = xs.plane();
        for (i, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
            let bc = bv[i % xs.c];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        self.push(y, &[x, b], move |ctx| {
            let gb = ctx.needs[1].then(|| channel_sums(ctx.grad, None));
            vec![Some(ctx.grad.clone()), gb]
        })
    }

    /// `x * s` with `s` of shape (1, C, 1, 1).
    pub fn mul_channel(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let xs = self.shape(x);
        assert_channel_vec(self.shape(s), xs, "mul_channel");
        let sv = self.value(s).data().to_vec();
        let mut y = self.value(x).clone();
        let plane = xs.plane();
        for (i, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
            let sc = sv[i % xs.c];
            chunk.iter_mut().for_each(|v| *v *= sc);
        }
        self.push(y, &[x, s], move |ctx| {
            let c = ctx.grad.shape().c;
            let plane = ctx.grad.shape().plane();
            let sv = ctx.inputs[1].data();
            let gx = ctx.needs[0].then(|| {
                let mut gx = ctx.grad.clone();
                for (i, chunk) in gx.data_mut().chunks_mut(plane).enumerate() {
                    let sc = sv[i % c];
                    chunk.iter_mut().for_each(|v| *v *= sc);
                }
                gx
            });
            let gs = ctx.needs[1].then(|| channel_sums(ctx.grad, Some(ctx.inputs[0])));
            vec![gx, gs]
        })
    }

    /// Sum of all elements, shape (1, 1, 1, 1).
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, &[x], |ctx| vec![Some(Tensor::full(ctx.inputs[0].shape(), ctx.grad.item()))])
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Per-sample sums, shape (N, 1, 1, 1).
    pub fn sum_per_sample(&mut self, x: NodeId) -> NodeId {
        let xs = self.shape(x);
        let xv = self.value(x);
        let sums: Vec<T> = (0..xs.n).map(|n| xv.sample(n).iter().copied().sum()).collect();
        let y = Tensor::from_vec(Shape::new(xs.n, 1, 1, 1), sums).unwrap();
        self.push(y, &[x], move |ctx| {
            let k = xs.per_sample();
            let g = ctx.grad.data();
            let data = (0..xs.numel()).map(|i| g[i / k]).collect();
            vec![Some(Tensor::from_vec(xs, data).unwrap())]
        })
    }

    /// Broadcasts a single-element node to shape (n, 1, 1, 1).
    pub fn expand_batch(&mut self, s: NodeId, n: usize) -> NodeId {
        let v = self.value(s).item();
        let y = Tensor::full(Shape::new(n, 1, 1, 1), v);
        self.push(y, &[s], |ctx| vec![Some(Tensor::scalar(ctx.grad.sum()))])
    }

    /// Per-sample zeros, for layers with a vanishing log-determinant.
    pub fn zero_logdet(&mut self, n: usize) -> NodeId {
        self.input(Tensor::zeros(Shape::new(n, 1, 1, 1)))
    }
}

/// Per-channel sums of `g` (optionally of `g * x`), shape (1, C, 1, 1).
fn channel_sums<T: Real>(g: &Tensor<T>, x: Option<&Tensor<T>>) -> Tensor<T> {
    let s = g.shape();
    let mut out = vec![T::zero(); s.c];
    let plane = s.plane();
    for (i, chunk) in g.data().chunks(plane).enumerate() {
        let acc: T = match x {
            Some(x) => chunk.iter().zip(&x.data()[i * plane..(i + 1) * plane]).map(|(&a, &b)| a * b).sum(),
            None => chunk.iter().copied().sum(),
        };
        out[i % s.c] += acc;
    }
    Tensor::from_vec(Shape::new(1, s.c, 1, 1), out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::super::testutil::check_op;
    use crate::tensor::{Shape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rnd(s: Shape, seed: u64) -> Tensor<f64> {
        Tensor::randn(s, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn unary_gradients() {
        let s = Shape::new(2, 3, 2, 2);
        let x = rnd(s, 1);
        check_op(&[x.clone()], |g, i| g.exp(i[0]), 1e-6);
        check_op(&[x.clone()], |g, i| g.tanh(i[0]), 1e-6);
        check_op(&[x.clone()], |g, i| g.soft_clamp(i[0], 0.7), 1e-6);
        check_op(&[x.clone()], |g, i| g.leaky_relu(i[0], 0.2), 1e-6);
        check_op(&[x.clone()], |g, i| g.abs(i[0]), 1e-6);
        check_op(&[x.clone()], |g, i| g.square(i[0]), 1e-6);
        check_op(&[x.clone()], |g, i| g.log_abs(i[0]), 1e-5);
        check_op(&[x.map(|v| v + 3.0)], |g, i| g.recip(i[0]), 1e-6);
        check_op(&[x], |g, i| g.scale(i[0], -2.5), 1e-6);
    }

    #[test]
    fn binary_and_broadcast_gradients() {
        let s = Shape::new(2, 3, 2, 2);
        let (a, b) = (rnd(s, 2), rnd(s, 3));
        let v = rnd(Shape::new(1, 3, 1, 1), 4);
        check_op(&[a.clone(), b.clone()], |g, i| g.mul(i[0], i[1]), 1e-6);
        check_op(&[a.clone(), b.clone()], |g, i| g.sub(i[0], i[1]), 1e-6);
        check_op(&[a.clone(), v.clone()], |g, i| g.add_channel(i[0], i[1]), 1e-6);
        check_op(&[a.clone(), v], |g, i| g.mul_channel(i[0], i[1]), 1e-6);
        check_op(&[a.clone()], |g, i| g.sum_per_sample(i[0]), 1e-6);
        check_op(&[a], |g, i| g.mean_all(i[0]), 1e-6);
        check_op(&[rnd(Shape::scalar(), 5)], |g, i| g.expand_batch(i[0], 3), 1e-6);
    }
}
