use crate::error::{shape_err, Result};
use crate::scalar::{matmul, Real};

use super::DenseTensor;

/// Rolls the axes of a 4-D tensor left by one: `(O, I, K1, K2) -> (I, K1, K2, O)`.
pub fn circular_permute_last<T: Real>(w: &DenseTensor<T>) -> Result<DenseTensor<T>> {
    w.expect_ndim(4)?;
    let [a, b, c, d] = dims4(w);
    let src = w.data();
    let mut out = DenseTensor::zeros(&[b, c, d, a]);
    let dst = out.data_mut();
    for i0 in 0..a {
        for i1 in 0..b {
            for i2 in 0..c {
                for i3 in 0..d {
                    dst[((i1 * c + i2) * d + i3) * a + i0] = src[((i0 * b + i1) * c + i2) * d + i3];
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`circular_permute_last`]: `(I, K1, K2, O) -> (O, I, K1, K2)`.
pub fn circular_permute_first<T: Real>(w: &DenseTensor<T>) -> Result<DenseTensor<T>> {
    w.expect_ndim(4)?;
    let [b, c, d, a] = dims4(w);
    let src = w.data();
    let mut out = DenseTensor::zeros(&[a, b, c, d]);
    let dst = out.data_mut();
    for i1 in 0..b {
        for i2 in 0..c {
            for i3 in 0..d {
                for i0 in 0..a {
                    dst[((i0 * b + i1) * c + i2) * d + i3] = src[((i1 * c + i2) * d + i3) * a + i0];
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn dims4<T: Real>(w: &DenseTensor<T>) -> [usize; 4] {
    let s = w.shape();
    [s[0], s[1], s[2], s[3]]
}

/// Mode-1 contraction `a ×¹ b`: sums the last axis of `a` against the first axis of `b`.
pub fn contract_mode1<T: Real>(a: &DenseTensor<T>, b: &DenseTensor<T>) -> Result<DenseTensor<T>> {
    let (Some(&ka), Some(&kb)) = (a.shape().last(), b.shape().first()) else {
        return shape_err("contraction of a 0-dimensional tensor");
    };
    if ka != kb {
        return shape_err(format!("contraction mismatch: last dim of {:?} vs first dim of {:?}", a.shape(), b.shape()));
    }
    let m = a.len() / ka;
    let n = b.len() / kb;
    let mut shape: Vec<usize> = a.shape()[..a.ndim() - 1].to_vec();
    shape.extend_from_slice(&b.shape()[1..]);
    if shape.is_empty() {
        shape.push(1);
    }
    let mut out = vec![T::zero(); m * n];
    matmul(m, ka, n, a.data(), b.data(), &mut out, false);
    DenseTensor::new(shape, out)
}
