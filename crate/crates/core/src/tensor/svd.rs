//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! Computation always runs in f64 and is cast back to the caller's element type. Outputs are
//! deterministic: singular values sorted non-increasing, and each left factor column is
//! sign-fixed so that its largest-magnitude entry is non-negative.

use crate::error::{Error, Result};
use crate::scalar::Real;

use super::DenseTensor;

const MAX_SWEEPS: usize = 80;

/// `a = u * diag(s) * v^T` with `u: m x k`, `v: n x k`, `k = min(m, n)`.
#[derive(Clone, Debug)]
pub struct SvdTriple<T = f32> {
    pub u: DenseTensor<T>,
    pub s: Vec<T>,
    pub v: DenseTensor<T>,
}

impl<T: Real> SvdTriple<T> {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// Rebuilds `u[:, :r] diag(s[:r]) v[:, :r]^T`.
    pub fn reconstruct(&self, r: usize) -> DenseTensor<T> {
        let (m, k) = (self.u.shape()[0], self.u.shape()[1]);
        let n = self.v.shape()[0];
        let r = r.min(k);
        DenseTensor::from_fn(&[m, n], |ix| {
            (0..r).map(|j| self.u.get(&[ix[0], j]) * self.s[j] * self.v.get(&[ix[1], j])).fold(T::zero(), |a, b| a + b)
        })
    }
}

/// Thin SVD of a matrix (2-D tensor).
pub fn svd<T: Real>(a: &DenseTensor<T>) -> Result<SvdTriple<T>> {
    a.expect_ndim(2)?;
    if !a.is_finite() {
        return Err(Error::Input("SVD input contains non-finite values".into()));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let data: Vec<f64> = a.data().iter().map(|v| v.as_f64()).collect();
    let (u, s, v) = if m >= n {
        jacobi_tall(&data, m, n)
    } else {
        // a^T = v s u^T
        let mut t = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                t[j * m + i] = data[i * n + j];
            }
        }
        let (u_t, s, v_t) = jacobi_tall(&t, n, m);
        (v_t, s, u_t)
    };
    let k = m.min(n);
    let mut triple = Svd64 { u, s, v, m, n, k };
    triple.fix_signs();
    Ok(SvdTriple {
        u: DenseTensor::new(vec![m, k], triple.u.iter().map(|&x| T::lit(x)).collect())?,
        s: triple.s.iter().map(|&x| T::lit(x)).collect(),
        v: DenseTensor::new(vec![n, k], triple.v.iter().map(|&x| T::lit(x)).collect())?,
    })
}

/// Singular values only.
pub fn singular_values<T: Real>(a: &DenseTensor<T>) -> Result<Vec<f64>> {
    Ok(svd(a)?.s.iter().map(|v| v.as_f64()).collect())
}

struct Svd64 {
    u: Vec<f64>,
    s: Vec<f64>,
    v: Vec<f64>,
    m: usize,
    n: usize,
    k: usize,
}

impl Svd64 {
    fn fix_signs(&mut self) {
        for j in 0..self.k {
            let mut best = 0.0f64;
            let mut sign = 1.0;
            for i in 0..self.m {
                let x = self.u[i * self.k + j];
                if x.abs() > best {
                    best = x.abs();
                    sign = x.signum();
                }
            }
            if sign < 0.0 {
                for i in 0..self.m {
                    self.u[i * self.k + j] = -self.u[i * self.k + j];
                }
                for i in 0..self.n {
                    self.v[i * self.k + j] = -self.v[i * self.k + j];
                }
            }
        }
    }
}

/// Jacobi SVD for `m >= n`. Returns row-major `u (m x n)`, `s (n)`, `v (n x n)`.
fn jacobi_tall(a: &[f64], m: usize, n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    // Column-major working copy: cols[j] is column j of a.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[i * n + j]).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let tol = 1e-15;

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for i in 0..m {
                        al += cp[i] * cp[i];
                        be += cq[i] * cq[i];
                        ga += cp[i] * cq[i];
                    }
                    (al, be, ga)
                };
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap().then(a.cmp(&b)));

    let scale = norms.iter().cloned().fold(0.0, f64::max);
    let cutoff = scale * 1e-13;
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut vsorted: Vec<Vec<f64>> = Vec::with_capacity(n);
    for &j in &order {
        let sigma = norms[j];
        if sigma > cutoff && sigma > 0.0 {
            ucols.push(cols[j].iter().map(|x| x / sigma).collect());
            s.push(sigma);
        } else {
            ucols.push(Vec::new());
            s.push(0.0);
        }
        vsorted.push(vcols[j].clone());
    }
    complete_basis(&mut ucols, m);

    let mut u = vec![0.0; m * n];
    for (j, c) in ucols.iter().enumerate() {
        for i in 0..m {
            u[i * n + j] = c[i];
        }
    }
    let mut v = vec![0.0; n * n];
    for (j, c) in vsorted.iter().enumerate() {
        for i in 0..n {
            v[i * n + j] = c[i];
        }
    }
    (u, s, v)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills empty columns (zero singular values) with unit vectors orthogonal to the rest,
/// by Gram-Schmidt over the standard basis.
fn complete_basis(ucols: &mut [Vec<f64>], m: usize) {
    let mut next_basis = 0;
    for j in 0..ucols.len() {
        if !ucols[j].is_empty() {
            continue;
        }
        while next_basis < m {
            let mut cand = vec![0.0; m];
            cand[next_basis] = 1.0;
            next_basis += 1;
            for _ in 0..2 {
                for other in ucols.iter().filter(|c| !c.is_empty()) {
                    let d: f64 = other.iter().zip(&cand).map(|(a, b)| a * b).sum();
                    cand.iter_mut().zip(other).for_each(|(c, o)| *c -= d * o);
                }
            }
            let nrm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nrm > 1e-6 {
                ucols[j] = cand.into_iter().map(|x| x / nrm).collect();
                break;
            }
        }
    }
}
