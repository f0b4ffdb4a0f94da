//! Small dense row-major matrix routines (f64).

/// `P A = L U` with partial pivoting.
#[derive(Debug, Clone)]
pub struct Lu {
    pub n: usize,
    /// `perm[i]` is the row of `A` that ended up in row `i`.
    pub perm: Vec<usize>,
    /// Unit-lower factor, row-major.
    pub lower: Vec<f64>,
    /// Upper factor, row-major.
    pub upper: Vec<f64>,
    /// Number of row swaps performed.
    pub swaps: usize,
}

impl Lu {
    pub fn decompose(a: &[f64], n: usize) -> Lu {
        assert_eq!(a.len(), n * n);
        let mut m = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut swaps = 0;
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
                .unwrap_or(col);
            if pivot != col {
                for k in 0..n {
                    m.swap(col * n + k, pivot * n + k);
                }
                perm.swap(col, pivot);
                swaps += 1;
            }
            let d = m[col * n + col];
            if d == 0.0 {
                continue;
            }
            for r in col + 1..n {
                let f = m[r * n + col] / d;
                m[r * n + col] = f;
                for k in col + 1..n {
                    m[r * n + k] -= f * m[col * n + k];
                }
            }
        }
        let mut lower = vec![0.0; n * n];
        let mut upper = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if j < i {
                    lower[i * n + j] = m[i * n + j];
                } else {
                    upper[i * n + j] = m[i * n + j];
                }
            }
            lower[i * n + i] = 1.0;
        }
        Lu { n, perm, lower, upper, swaps }
    }

    /// `log |det A|`; `None` if some pivot magnitude is below `floor`.
    pub fn log_abs_det(&self, floor: f64) -> Option<f64> {
        let mut s = 0.0;
        for i in 0..self.n {
            let d = self.upper[i * self.n + i].abs();
            if d < floor || !d.is_finite() {
                return None;
            }
            s += d.ln();
        }
        Some(s)
    }

    /// Permutation matrix `Q` with `A = Q L U` (so `Q = P^T`).
    pub fn perm_matrix(&self) -> Vec<f64> {
        let n = self.n;
        let mut q = vec![0.0; n * n];
        for (i, &src) in self.perm.iter().enumerate() {
            q[src * n + i] = 1.0;
        }
        q
    }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                c[i * n + j] += av * b[p * n + j];
            }
        }
    }
    c
}

/// Gauss-Jordan inverse with partial pivoting; `None` if singular.
pub fn inverse(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut m = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))?;
        if m[pivot * n + col] == 0.0 {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                m.swap(col * n + k, pivot * n + k);
                inv.swap(col * n + k, pivot * n + k);
            }
        }
        let d = m[col * n + col];
        for k in 0..n {
            m[col * n + k] /= d;
            inv[col * n + k] /= d;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[r * n + col];
            if f == 0.0 {
                continue;
            }
            for k in 0..n {
                m[r * n + k] -= f * m[col * n + k];
                inv[r * n + k] -= f * inv[col * n + k];
            }
        }
    }
    Some(inv)
}

/// Random orthogonal matrix from Gram-Schmidt on Gaussian rows.
pub fn random_orthogonal(n: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut q: Vec<f64> = (0..n * n).map(|_| StandardNormal.sample(rng)).collect();
    for i in 0..n {
        for j in 0..i {
            let dot: f64 = (0..n).map(|k| q[i * n + k] * q[j * n + k]).sum();
            for k in 0..n {
                q[i * n + k] -= dot * q[j * n + k];
            }
        }
        let norm: f64 = (0..n).map(|k| q[i * n + k].powi(2)).sum::<f64>().sqrt();
        for k in 0..n {
            q[i * n + k] /= norm;
        }
    }
    q
}
