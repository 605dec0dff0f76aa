//! Four-core tensor-train factorisation of a permuted convolution kernel.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Real;

use super::ops::{circular_permute_first, contract_mode1};
use super::svd::svd;
use super::DenseTensor;

/// Cores `w1 (I, r1)`, `w2 (r1, K, r2)`, `w3 (r2, K, r3)`, `w4 (r3, O)` of one conv layer.
/// Boundary ranks `r0 = r4 = 1` are implicit.
#[derive(Clone, Debug, PartialEq)]
pub struct TTConvCores<T = f32> {
    pub w1: DenseTensor<T>,
    pub w2: DenseTensor<T>,
    pub w3: DenseTensor<T>,
    pub w4: DenseTensor<T>,
}

impl<T: Real> TTConvCores<T> {
    pub fn new(w1: DenseTensor<T>, w2: DenseTensor<T>, w3: DenseTensor<T>, w4: DenseTensor<T>) -> Result<Self> {
        w1.expect_ndim(2)?;
        w2.expect_ndim(3)?;
        w3.expect_ndim(3)?;
        w4.expect_ndim(2)?;
        let (s1, s2, s3, s4) = (w1.shape(), w2.shape(), w3.shape(), w4.shape());
        if s1[1] != s2[0] || s2[2] != s3[0] || s3[2] != s4[0] {
            return shape_err(format!("inconsistent TT ranks: {s1:?} {s2:?} {s3:?} {s4:?}"));
        }
        if s2[1] != s3[1] {
            return shape_err(format!("only square kernels are supported (K1 = {}, K2 = {})", s2[1], s3[1]));
        }
        Ok(Self { w1, w2, w3, w4 })
    }

    /// Kaiming-style random cores, used when no dense weight is decomposed.
    pub fn random<R: Rng + ?Sized>(
        i: usize,
        k: usize,
        o: usize,
        (r1, r2, r3): (usize, usize, usize),
        rng: &mut R,
    ) -> Self {
        Self {
            w1: DenseTensor::randn(&[i, r1], (1.0 / i as f64).sqrt(), rng),
            w2: DenseTensor::randn(&[r1, k, r2], (1.0 / (r1 * k) as f64).sqrt(), rng),
            w3: DenseTensor::randn(&[r2, k, r3], (1.0 / (r2 * k) as f64).sqrt(), rng),
            w4: DenseTensor::randn(&[r3, o], (2.0 / r3 as f64).sqrt(), rng),
        }
    }

    pub fn ranks(&self) -> (usize, usize, usize) {
        (self.w1.shape()[1], self.w2.shape()[2], self.w3.shape()[2])
    }

    pub fn in_channels(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.w4.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.w2.shape()[1]
    }

    pub fn is_uniform(&self) -> bool {
        let (a, b, c) = self.ranks();
        a == b && b == c
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.w2.len() + self.w3.len() + self.w4.len()
    }

    pub fn cast<U: Real>(&self) -> TTConvCores<U> {
        TTConvCores { w1: self.w1.cast(), w2: self.w2.cast(), w3: self.w3.cast(), w4: self.w4.cast() }
    }

    /// `w1` as a `(r1, I, 1, 1)` pointwise conv kernel.
    pub fn w1_kernel(&self) -> DenseTensor<T> {
        let (i, r) = (self.w1.shape()[0], self.w1.shape()[1]);
        DenseTensor::from_fn(&[r, i, 1, 1], |ix| self.w1.get(&[ix[1], ix[0]]))
    }

    /// `w2` as a `(r2, r1, K, 1)` vertical conv kernel.
    pub fn w2_kernel(&self) -> DenseTensor<T> {
        let [a, k, b] = dims3(&self.w2);
        DenseTensor::from_fn(&[b, a, k, 1], |ix| self.w2.get(&[ix[1], ix[2], ix[0]]))
    }

    /// `w3` as a `(r3, r2, 1, K)` horizontal conv kernel.
    pub fn w3_kernel(&self) -> DenseTensor<T> {
        let [b, k, c] = dims3(&self.w3);
        DenseTensor::from_fn(&[c, b, 1, k], |ix| self.w3.get(&[ix[1], ix[3], ix[0]]))
    }

    /// `w4` as an `(O, r3, 1, 1)` pointwise conv kernel.
    pub fn w4_kernel(&self) -> DenseTensor<T> {
        let (r, o) = (self.w4.shape()[0], self.w4.shape()[1]);
        DenseTensor::from_fn(&[o, r, 1, 1], |ix| self.w4.get(&[ix[1], ix[0]]))
    }
}

pub(crate) fn dims3<T: Real>(t: &DenseTensor<T>) -> [usize; 3] {
    [t.shape()[0], t.shape()[1], t.shape()[2]]
}

/// Inverse layout maps from conv-kernel gradients back to core gradients.
pub(crate) mod layout {
    use super::*;

    pub fn w1_from_kernel<T: Real>(k: &DenseTensor<T>) -> DenseTensor<T> {
        let (r, i) = (k.shape()[0], k.shape()[1]);
        DenseTensor::from_fn(&[i, r], |ix| k.get(&[ix[1], ix[0], 0, 0]))
    }

    pub fn w2_from_kernel<T: Real>(k: &DenseTensor<T>) -> DenseTensor<T> {
        let (b, a, kk) = (k.shape()[0], k.shape()[1], k.shape()[2]);
        DenseTensor::from_fn(&[a, kk, b], |ix| k.get(&[ix[2], ix[0], ix[1], 0]))
    }

    pub fn w3_from_kernel<T: Real>(k: &DenseTensor<T>) -> DenseTensor<T> {
        let (c, b, kk) = (k.shape()[0], k.shape()[1], k.shape()[3]);
        DenseTensor::from_fn(&[b, kk, c], |ix| k.get(&[ix[2], ix[0], 0, ix[1]]))
    }

    pub fn w4_from_kernel<T: Real>(k: &DenseTensor<T>) -> DenseTensor<T> {
        let (o, r) = (k.shape()[0], k.shape()[1]);
        DenseTensor::from_fn(&[r, o], |ix| k.get(&[ix[1], ix[0], 0, 0]))
    }
}

/// Result of [`tt_svd`].
#[derive(Clone, Debug)]
pub struct TtDecomposition<T = f32> {
    pub cores: TTConvCores<T>,
    /// True when a requested rank exceeded what its unfolding supports and was lowered.
    pub clamped: bool,
    pub requested: (usize, usize, usize),
    /// Sum of squared discarded singular values at each of the three cuts.
    pub discarded_sq: [f64; 3],
}

impl<T: Real> TtDecomposition<T> {
    pub fn discarded_total(&self) -> f64 {
        self.discarded_sq.iter().sum()
    }
}

/// Sequential left-to-right truncated-SVD sweep over the three cuts of an `(I, K, K, O)` tensor.
pub fn tt_svd<T: Real>(a: &DenseTensor<T>, ranks: (usize, usize, usize)) -> Result<TtDecomposition<T>> {
    a.expect_ndim(4)?;
    let (i, k1, k2, o) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
    if k1 != k2 {
        return shape_err(format!("only square kernels are supported, got {k1}x{k2}"));
    }
    if ranks.0 == 0 || ranks.1 == 0 || ranks.2 == 0 {
        return Err(Error::Input(format!("TT ranks must be >= 1, got {ranks:?}")));
    }
    let requested = [ranks.0, ranks.1, ranks.2];
    let mut clamped = false;
    let mut discarded = [0.0f64; 3];
    let mut cores: Vec<DenseTensor<T>> = Vec::with_capacity(4);

    let mut prev_rank = 1usize;
    let mut rest = a.clone().reshape(&[i, k1 * k2 * o])?;
    let mode_sizes = [i, k1, k2];
    for cut in 0..3 {
        let rows = prev_rank * mode_sizes[cut];
        let cols = rest.len() / rows;
        let mat = rest.reshape(&[rows, cols])?;
        let t = svd(&mat)?;
        let max_rank = rows.min(cols);
        let r = if requested[cut] > max_rank {
            clamped = true;
            max_rank
        } else {
            requested[cut]
        };
        discarded[cut] = t.s[r..].iter().map(|s| s.as_f64().powi(2)).sum();

        // Left factor, with columns for zero singular values zeroed out.
        let core = DenseTensor::from_fn(&[rows, r], |ix| {
            if t.s[ix[1]] == T::zero() {
                T::zero()
            } else {
                t.u.get(&[ix[0], ix[1]])
            }
        });
        let core = if cut == 0 { core } else { core.reshape(&[prev_rank, mode_sizes[cut], r])? };
        cores.push(core);
        rest = DenseTensor::from_fn(&[r, cols], |ix| t.s[ix[0]] * t.v.get(&[ix[1], ix[0]]));
        prev_rank = r;
    }
    cores.push(rest);
    let mut it = cores.into_iter();
    let (w1, w2, w3, w4) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
    if clamped {
        log::warn!("TT ranks {ranks:?} clamped to {:?}", (w1.shape()[1], w2.shape()[2], w3.shape()[2]));
    }
    Ok(TtDecomposition { cores: TTConvCores::new(w1, w2, w3, w4)?, clamped, requested: ranks, discarded_sq: discarded })
}

/// `W[i, k1, k2, o] = Σ w1[i, r1] w2[r1, k1, r2] w3[r2, k2, r3] w4[r3, o]`.
pub fn tt_reconstruct<T: Real>(cores: &TTConvCores<T>) -> Result<DenseTensor<T>> {
    let a = contract_mode1(&cores.w1, &cores.w2)?;
    let b = contract_mode1(&a, &cores.w3)?;
    contract_mode1(&b, &cores.w4)
}

/// Dense `(O, I, K, K)` kernel equivalent to the sequential chain of the four cores.
pub fn stt_dense_kernel<T: Real>(cores: &TTConvCores<T>) -> Result<DenseTensor<T>> {
    circular_permute_first(&tt_reconstruct(cores)?)
}

/// Merges PTT cores into one cross-shaped `(O, I, K, K)` kernel: the vertical branch
/// `w1 ×¹ w2 ×¹ w4` fills the middle column, the horizontal branch `w1 ×¹ w3 ×¹ w4` fills the
/// middle row, and the four corner regions stay zero.
pub fn merge_ptt<T: Real>(cores: &TTConvCores<T>) -> Result<DenseTensor<T>> {
    if !cores.is_uniform() {
        return Err(Error::Mode(format!("merge_ptt needs uniform ranks, got {:?}", cores.ranks())));
    }
    let vertical = contract_mode1(&contract_mode1(&cores.w1, &cores.w2)?, &cores.w4)?;
    let horizontal = contract_mode1(&contract_mode1(&cores.w1, &cores.w3)?, &cores.w4)?;
    let (i, k, o) = (cores.in_channels(), cores.kernel_size(), cores.out_channels());
    let mid = k / 2;
    let mut w = DenseTensor::zeros(&[o, i, k, k]);
    for oc in 0..o {
        for ic in 0..i {
            for kk in 0..k {
                let ofs_v = w.offset(&[oc, ic, kk, mid]);
                w.data_mut()[ofs_v] += vertical.get(&[ic, kk, oc]);
                let ofs_h = w.offset(&[oc, ic, mid, kk]);
                w.data_mut()[ofs_h] += horizontal.get(&[ic, kk, oc]);
            }
        }
    }
    Ok(w)
}
