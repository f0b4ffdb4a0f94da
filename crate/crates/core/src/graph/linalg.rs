//! Small-matrix ops. A matrix is a tensor of shape (rows, cols, 1, 1), which
//! is also the layout of a 1x1 convolution weight.

use super::{Graph, NodeId};
use crate::linalg;
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

fn dims(s: Shape) -> (usize, usize) {
    assert!(s.h == 1 && s.w == 1, "expected a (rows, cols, 1, 1) matrix, got {s}");
    (s.n, s.c)
}

fn mat<T: Real>(rows: usize, cols: usize, data: Vec<f64>) -> Tensor<T> {
    Tensor::from_f64(Shape::new(rows, cols, 1, 1), &data).unwrap()
}

fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut t = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = a[i * c + j];
        }
    }
    t
}

impl<T: Real> Graph<'_, T> {
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = dims(self.shape(a));
        let (k2, n) = dims(self.shape(b));
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let y = mat(m, n, linalg::matmul(&self.value(a).to_f64_vec(), &self.value(b).to_f64_vec(), m, k, n));
        self.push(y, &[a, b], move |ctx| {
            let g = ctx.grad.to_f64_vec();
            let av = ctx.inputs[0].to_f64_vec();
            let bv = ctx.inputs[1].to_f64_vec();
            let ga = ctx.needs[0].then(|| mat(m, k, linalg::matmul(&g, &transpose(&bv, k, n), m, n, k)));
            let gb = ctx.needs[1].then(|| mat(k, n, linalg::matmul(&transpose(&av, m, k), &g, k, m, n)));
            vec![ga, gb]
        })
    }

    /// Matrix inverse. Panics on a singular input; callers validate first.
    pub fn mat_inverse(&mut self, a: NodeId) -> NodeId {
        let (n, n2) = dims(self.shape(a));
        assert_eq!(n, n2, "mat_inverse: non-square");
        let inv = linalg::inverse(&self.value(a).to_f64_vec(), n).expect("mat_inverse: singular matrix");
        let y = mat(n, n, inv);
        self.push(y, &[a], move |ctx| {
            // d(A^-1) = -A^-T G A^-T
            let inv_t = transpose(&ctx.output.to_f64_vec(), n, n);
            let g = ctx.grad.to_f64_vec();
            let t = linalg::matmul(&linalg::matmul(&inv_t, &g, n, n, n), &inv_t, n, n, n);
            vec![Some(mat(n, n, t.into_iter().map(|v| -v).collect()))]
        })
    }

    /// `sum_k log |A_kk|` as a single-element node.
    pub fn sum_log_abs_diag(&mut self, a: NodeId) -> NodeId {
        let (n, n2) = dims(self.shape(a));
        assert_eq!(n, n2, "sum_log_abs_diag: non-square");
        let av = self.value(a);
        let s: f64 = (0..n).map(|k| av.data()[k * n + k].as_f64().abs().ln()).sum();
        self.push(Tensor::scalar(T::from_f64(s)), &[a], move |ctx| {
            let g = ctx.grad.item();
            let mut out = Tensor::zeros(Shape::new(n, n, 1, 1));
            for k in 0..n {
                out.data_mut()[k * n + k] = g / ctx.inputs[0].data()[k * n + k];
            }
            vec![Some(out)]
        })
    }
}
