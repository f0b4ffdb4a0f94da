//! Separable linear resampling: each plane `X` maps to `R X C^T`.
//!
//! Bicubic down/upscaling and the Gaussian low-pass filter are both expressed
//! as a pair of dense 1-D operator matrices with the boundary rule folded in.

use std::sync::Arc;

use super::{Graph, NodeId};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Dense `out x inp` operator along one axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SepMatrix {
    pub out: usize,
    pub inp: usize,
    pub weights: Vec<f64>,
}

impl SepMatrix {
    pub fn new(out: usize, inp: usize, weights: Vec<f64>) -> Self {
        assert_eq!(weights.len(), out * inp);
        SepMatrix { out, inp, weights }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.inp..(i + 1) * self.inp]
    }

    fn cast<T: Real>(&self) -> Vec<T> {
        self.weights.iter().map(|&v| T::from_f64(v)).collect()
    }
}

fn apply_planes<T: Real>(x: &Tensor<T>, r: &[T], (ro, ri): (usize, usize), c: &[T], (co, ci): (usize, usize), transpose: bool) -> Tensor<T> {
    // forward: Y = R X C^T with R: ro x ri, C: co x ci, X: ri x ci
    // adjoint: X = R^T Y C with Y: ro x co
    let s = x.shape();
    let (ih, iw, oh, ow) = if transpose { (ro, co, ri, ci) } else { (ri, ci, ro, co) };
    assert!(s.h == ih && s.w == iw, "sep_linear: plane {}x{} does not match operator {}x{}", s.h, s.w, ih, iw);
    let planes = s.n * s.c;
    let mut out = vec![T::zero(); planes * oh * ow];
    let mut tmp = vec![T::zero(); oh * iw];
    for p in 0..planes {
        let xp = &x.data()[p * ih * iw..(p + 1) * ih * iw];
        let yp = &mut out[p * oh * ow..(p + 1) * oh * ow];
        if transpose {
            // tmp (ri x co) = R^T (ri x ro) * Y (ro x co)
            T::gemm(oh, ih, iw, T::one(), r, 1, ri as isize, xp, iw as isize, 1, T::zero(), &mut tmp, iw as isize, 1);
            // X (ri x ci) = tmp (ri x co) * C (co x ci)
            T::gemm(oh, iw, ow, T::one(), &tmp, iw as isize, 1, c, ci as isize, 1, T::zero(), yp, ow as isize, 1);
        } else {
            // tmp (ro x ci) = R (ro x ri) * X (ri x ci)
            T::gemm(oh, ih, iw, T::one(), r, ri as isize, 1, xp, iw as isize, 1, T::zero(), &mut tmp, iw as isize, 1);
            // Y (ro x co) = tmp (ro x ci) * C^T (ci x co)
            T::gemm(oh, iw, ow, T::one(), &tmp, iw as isize, 1, c, 1, ci as isize, T::zero(), yp, ow as isize, 1);
        }
    }
    Tensor::from_vec(Shape::new(s.n, s.c, oh, ow), out).unwrap()
}

/// Untaped application of `rows` along H and `cols` along W.
pub fn sep_apply<T: Real>(x: &Tensor<T>, rows: &SepMatrix, cols: &SepMatrix) -> Tensor<T> {
    apply_planes(x, &rows.cast::<T>(), (rows.out, rows.inp), &cols.cast::<T>(), (cols.out, cols.inp), false)
}

impl<T: Real> Graph<'_, T> {
    pub fn sep_linear(&mut self, x: NodeId, rows: &Arc<SepMatrix>, cols: &Arc<SepMatrix>) -> NodeId {
        let y = sep_apply(self.value(x), rows, cols);
        let r = rows.cast::<T>();
        let c = cols.cast::<T>();
        let (rd, cd) = ((rows.out, rows.inp), (cols.out, cols.inp));
        self.push(y, &[x], move |ctx| vec![Some(apply_planes(ctx.grad, &r, rd, &c, cd, true))])
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::check_op;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sep_linear_gradient_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r = Arc::new(SepMatrix::new(2, 4, (0..8).map(|i| (i as f64 * 0.37).sin()).collect()));
        let c = Arc::new(SepMatrix::new(3, 5, (0..15).map(|i| (i as f64 * 0.11).cos()).collect()));
        let x = Tensor::<f64>::randn(Shape::new(2, 3, 4, 5), 1.0, &mut rng);
        check_op(&[x], |g, i| g.sep_linear(i[0], &r, &c), 1e-8);
    }

    #[test]
    fn identity_operator_is_identity() {
        let eye = |n: usize| SepMatrix::new(n, n, (0..n * n).map(|i| if i % (n + 1) == 0 { 1.0 } else { 0.0 }).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::randn(Shape::new(1, 2, 3, 4), 1.0, &mut rng);
        assert_eq!(sep_apply(&x, &eye(3), &eye(4)), x);
    }
}
