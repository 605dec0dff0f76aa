use crate::error::{shape_err, Error, Result};
use crate::scalar::Real;
use crate::tensor::DenseTensor;

pub const BN_EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

/// Per-channel batch normalisation evaluated independently at each timestep.
///
/// The affine scale/shift is shared by all timesteps; running statistics are kept per
/// timestep because membrane dynamics make early and late timesteps differ in distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T = f32> {
    pub gamma: DenseTensor<T>,
    pub beta: DenseTensor<T>,
    pub running_mean: Vec<Vec<T>>,
    pub running_var: Vec<Vec<T>>,
}

/// Values needed to backpropagate through one training-mode normalisation.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    x_hat: DenseTensor<T>,
    inv_std: Vec<T>,
}

/// Batch statistics of one call, applied to the running averages afterwards.
#[derive(Clone, Debug)]
pub struct BnStats<T> {
    pub timestep: usize,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize, timesteps: usize) -> Self {
        Self {
            gamma: DenseTensor::full(&[channels], T::one()),
            beta: DenseTensor::zeros(&[channels]),
            running_mean: vec![vec![T::zero(); channels]; timesteps],
            running_var: vec![vec![T::one(); channels]; timesteps],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &DenseTensor<T>) -> Result<(usize, usize, usize)> {
        if x.ndim() != 4 || x.shape()[1] != self.channels() {
            return shape_err(format!("batchnorm over {} channels got input {:?}", self.channels(), x.shape()));
        }
        let s = x.shape();
        Ok((s[0], s[1], s[2] * s[3]))
    }

    /// Training-mode normalisation with batch statistics over `(N, H, W)`.
    pub fn forward_train(
        &self,
        x: &DenseTensor<T>,
        timestep: usize,
    ) -> Result<(DenseTensor<T>, BnCache<T>, BnStats<T>)> {
        let (n, c, hw) = self.check(x)?;
        let count = T::lit((n * hw) as f64);
        let eps = T::lit(BN_EPS);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                s += x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
            }
            mean[ch] = s / count;
            let mut v = T::zero();
            for b in 0..n {
                for &e in &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                    v += (e - mean[ch]) * (e - mean[ch]);
                }
            }
            var[ch] = v / count;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut x_hat = DenseTensor::zeros(x.shape());
        let mut y = DenseTensor::zeros(x.shape());
        for b in 0..n {
            for ch in 0..c {
                let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                let (g, be) = (self.gamma.data()[ch], self.beta.data()[ch]);
                for i in range {
                    let h = (x.data()[i] - mean[ch]) * inv_std[ch];
                    x_hat.data_mut()[i] = h;
                    y.data_mut()[i] = g * h + be;
                }
            }
        }
        Ok((y, BnCache { x_hat, inv_std }, BnStats { timestep, mean, var }))
    }

    /// Inference-mode normalisation with the running statistics of `timestep`.
    pub fn forward_eval(&self, x: &DenseTensor<T>, timestep: usize) -> Result<DenseTensor<T>> {
        let (n, c, hw) = self.check(x)?;
        let (rm, rv) = match (self.running_mean.get(timestep), self.running_var.get(timestep)) {
            (Some(m), Some(v)) => (m, v),
            _ => {
                return Err(Error::Contract(format!(
                    "no running statistics for timestep {timestep} (have {})",
                    self.running_mean.len()
                )))
            }
        };
        let eps = T::lit(BN_EPS);
        let mut y = DenseTensor::zeros(x.shape());
        for b in 0..n {
            for ch in 0..c {
                let scale = self.gamma.data()[ch] / (rv[ch] + eps).sqrt();
                let shift = self.beta.data()[ch] - rm[ch] * scale;
                for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                    y.data_mut()[i] = x.data()[i] * scale + shift;
                }
            }
        }
        Ok(y)
    }

    /// Returns `(dx, dgamma, dbeta)`.
    pub fn backward(
        &self,
        cache: &BnCache<T>,
        dy: &DenseTensor<T>,
    ) -> Result<(DenseTensor<T>, DenseTensor<T>, DenseTensor<T>)> {
        let (n, c, hw) = self.check(dy)?;
        let count = T::lit((n * hw) as f64);
        let mut dgamma = DenseTensor::zeros(&[c]);
        let mut dbeta = DenseTensor::zeros(&[c]);
        let mut dx = DenseTensor::zeros(dy.shape());
        for ch in 0..c {
            let (mut sg, mut sb) = (T::zero(), T::zero());
            for b in 0..n {
                for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                    sg += dy.data()[i] * cache.x_hat.data()[i];
                    sb += dy.data()[i];
                }
            }
            dgamma.data_mut()[ch] = sg;
            dbeta.data_mut()[ch] = sb;
            let k = self.gamma.data()[ch] * cache.inv_std[ch] / count;
            for b in 0..n {
                for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                    dx.data_mut()[i] = k * (count * dy.data()[i] - sb - cache.x_hat.data()[i] * sg);
                }
            }
        }
        Ok((dx, dgamma, dbeta))
    }

    pub fn update_running(&mut self, stats: &BnStats<T>, batch_count: usize) {
        let m = T::lit(MOMENTUM);
        let unbias = if batch_count > 1 { T::lit(batch_count as f64 / (batch_count as f64 - 1.0)) } else { T::one() };
        let Some(rm) = self.running_mean.get_mut(stats.timestep) else { return };
        for (r, &b) in rm.iter_mut().zip(&stats.mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        let rv = &mut self.running_var[stats.timestep];
        for (r, &b) in rv.iter_mut().zip(&stats.var) {
            *r = (T::one() - m) * *r + m * b * unbias;
        }
    }
}

/// Functional form: normalise `x_t` with batch statistics and the given affine parameters.
pub fn batchnorm_t<T: Real>(x_t: &DenseTensor<T>, bn: &BatchNorm<T>, timestep: usize) -> Result<DenseTensor<T>> {
    Ok(bn.forward_train(x_t, timestep)?.0)
}
