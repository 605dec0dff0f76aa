use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Real;
use crate::tensor::DenseTensor;

/// Leak factor and firing threshold of the iterative LIF neuron.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LIFParams {
    pub tau_m: f64,
    pub v_th: f64,
}

impl Default for LIFParams {
    fn default() -> Self {
        Self { tau_m: 0.25, v_th: 0.5 }
    }
}

impl LIFParams {
    pub fn new(tau_m: f64, v_th: f64) -> Result<Self> {
        let p = Self { tau_m, v_th };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_m > 0.0 && self.tau_m <= 1.0) {
            return Err(Error::Config(format!("tau_m must lie in (0, 1], got {}", self.tau_m)));
        }
        if !(self.v_th > 0.0) {
            return Err(Error::Config(format!("v_th must be positive, got {}", self.v_th)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SurrogateKind {
    #[default]
    Triangle,
}

/// Shape of the pseudo-derivative used in place of the Heaviside derivative.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub kind: SurrogateKind,
    pub alpha: f64,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        Self { kind: SurrogateKind::Triangle, alpha: 1.0 }
    }
}

/// Triangle pseudo-derivative `max(0, 1 - |u - v_th| / alpha) / alpha`.
pub fn surrogate_grad<T: Real>(u_pre: T, p: &LIFParams, s: &SurrogateSpec) -> T {
    debug_assert!(s.alpha > 0.0);
    match s.kind {
        SurrogateKind::Triangle => {
            let alpha = T::lit(s.alpha);
            let x = T::one() - (u_pre - T::lit(p.v_th)).abs() / alpha;
            if x > T::zero() {
                x / alpha
            } else {
                T::zero()
            }
        }
    }
}

/// Firing nonlinearity together with its backward rule.
///
/// `Spike` is the real model: Heaviside forward, surrogate backward. `Sigmoid` replaces the
/// Heaviside by a smooth gate in both passes so that finite differences can certify the
/// backward traversal. `Linear` removes the nonlinearity and the membrane memory entirely.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Gate {
    Spike(SurrogateSpec),
    Sigmoid { slope: f64 },
    Linear,
}

impl Default for Gate {
    fn default() -> Self {
        Gate::Spike(SurrogateSpec::default())
    }
}

impl Gate {
    /// Returns `(output, stored membrane)` for one pre-reset potential.
    #[inline]
    pub fn fire<T: Real>(&self, u_pre: T, p: &LIFParams) -> (T, T) {
        match *self {
            Gate::Spike(_) => {
                if u_pre >= T::lit(p.v_th) {
                    (T::one(), T::zero())
                } else {
                    (T::zero(), u_pre)
                }
            }
            Gate::Sigmoid { slope } => {
                let s = sigmoid(T::lit(slope) * (u_pre - T::lit(p.v_th)));
                (s, u_pre * (T::one() - s))
            }
            Gate::Linear => (u_pre, T::zero()),
        }
    }

    /// `dL/du_pre` given the gradients flowing into the output and into the stored membrane.
    #[inline]
    pub fn backward<T: Real>(&self, u_pre: T, out: T, d_out: T, d_mem: T, p: &LIFParams) -> T {
        match *self {
            Gate::Linear => d_out,
            Gate::Spike(sur) => {
                let g = surrogate_grad(u_pre, p, &sur);
                d_out * g + d_mem * (T::one() - out - u_pre * g)
            }
            Gate::Sigmoid { slope } => {
                let g = T::lit(slope) * out * (T::one() - out);
                d_out * g + d_mem * (T::one() - out - u_pre * g)
            }
        }
    }

    pub fn is_binary(&self) -> bool {
        matches!(self, Gate::Spike(_))
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Membrane potentials and spike map of one layer after a timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct LIFState<T = f32> {
    pub membrane: DenseTensor<T>,
    pub spikes: DenseTensor<T>,
}

/// One LIF update: `u_pre = tau_m * u_prev + input`; spike where `u_pre >= v_th`; hard reset.
pub fn lif_step<T: Real>(
    u_prev: &DenseTensor<T>,
    input_current: &DenseTensor<T>,
    p: &LIFParams,
) -> Result<LIFState<T>> {
    if u_prev.shape() != input_current.shape() {
        return shape_err(format!("membrane {:?} vs input {:?}", u_prev.shape(), input_current.shape()));
    }
    let tau = T::lit(p.tau_m);
    let gate = Gate::default();
    let mut membrane = DenseTensor::zeros(u_prev.shape());
    let mut spikes = DenseTensor::zeros(u_prev.shape());
    for (((m, s), &u), &i) in
        membrane.data_mut().iter_mut().zip(spikes.data_mut().iter_mut()).zip(u_prev.data()).zip(input_current.data())
    {
        let (out, mem) = gate.fire(tau * u + i, p);
        *s = out;
        *m = mem;
    }
    Ok(LIFState { membrane, spikes })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> DenseTensor<f64> {
        DenseTensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn sub_threshold_step() {
        let st = lif_step(&scalar(0.4), &scalar(0.2), &LIFParams::default()).unwrap();
        assert!((st.membrane.data()[0] - 0.3).abs() < 1e-12);
        assert_eq!(st.spikes.data()[0], 0.0);
    }

    #[test]
    fn firing_step_resets() {
        let st = lif_step(&scalar(0.8), &scalar(0.5), &LIFParams::default()).unwrap();
        assert_eq!(st.spikes.data()[0], 1.0);
        assert_eq!(st.membrane.data()[0], 0.0);
    }

    #[test]
    fn pure_leak_decay() {
        let p = LIFParams::default();
        let u0 = 0.45;
        let mut u = scalar(u0);
        for t in 1..=6 {
            let st = lif_step(&u, &scalar(0.0), &p).unwrap();
            assert_eq!(st.spikes.data()[0], 0.0);
            assert!((st.membrane.data()[0] - p.tau_m.powi(t) * u0).abs() < 1e-15);
            u = st.membrane;
        }
    }

    #[test]
    fn shape_mismatch() {
        let a = DenseTensor::<f32>::zeros(&[2]);
        let b = DenseTensor::<f32>::zeros(&[3]);
        assert!(lif_step(&a, &b, &LIFParams::default()).is_err());
    }

    #[test]
    fn params_validated() {
        assert!(LIFParams::new(0.0, 0.5).is_err());
        assert!(LIFParams::new(1.2, 0.5).is_err());
        assert!(LIFParams::new(0.5, 0.0).is_err());
        assert!(LIFParams::new(1.0, 0.1).is_ok());
    }

    #[test]
    fn triangle_peak_and_support() {
        let p = LIFParams::default();
        for alpha in [0.5, 1.0, 2.0] {
            let s = SurrogateSpec { kind: SurrogateKind::Triangle, alpha };
            assert!((surrogate_grad(0.5f64, &p, &s) - 1.0 / alpha).abs() < 1e-12);
            assert_eq!(surrogate_grad(0.5 + alpha, &p, &s), 0.0);
            assert_eq!(surrogate_grad(0.5 - alpha * 1.5, &p, &s), 0.0);
        }
    }

    #[test]
    fn triangle_integrates_to_one() {
        let p = LIFParams::default();
        let s = SurrogateSpec { kind: SurrogateKind::Triangle, alpha: 0.7 };
        let (a, b, n) = (-3.0f64, 4.0f64, 70_001);
        let h = (b - a) / (n - 1) as f64;
        let f: Vec<f64> = (0..n).map(|i| surrogate_grad(a + i as f64 * h, &p, &s)).collect();
        let integral = h * (f.iter().sum::<f64>() - 0.5 * (f[0] + f[n - 1]));
        assert!((integral - 1.0).abs() < 1e-6, "{integral}");
    }

    #[test]
    fn sigmoid_gate_backward_matches_difference_quotient() {
        let p = LIFParams::default();
        let gate = Gate::Sigmoid { slope: 4.0 };
        for &u in &[-0.3f64, 0.2, 0.5, 0.9] {
            let (d_out, d_mem) = (0.7, -1.3);
            let l = |u: f64| {
                let (s, m) = gate.fire(u, &p);
                d_out * s + d_mem * m
            };
            let h = 1e-6;
            let fd = (l(u + h) - l(u - h)) / (2.0 * h);
            let (s, _) = gate.fire(u, &p);
            let an = gate.backward(u, s, d_out, d_mem, &p);
            assert!((fd - an).abs() < 1e-8, "u={u}: {fd} vs {an}");
        }
    }
}
