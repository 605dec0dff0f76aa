use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{
    conv2d, conv2d_backward, layout, merge_ptt, stt_dense_kernel, ConvGeometry, DenseTensor, TTConvCores,
};

use super::schedule::{BranchStep, HttSchedule};

/// How the four cores are wired at inference and training time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TtMode {
    /// Sequential `1x1 -> Kx1 -> 1xK -> 1x1`.
    Stt,
    /// The two middle cores act in parallel on the output of the first core.
    Ptt,
    /// PTT with some timesteps evaluating only one of the two middle branches.
    Htt,
}

impl std::fmt::Display for TtMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TtMode::Stt => "stt",
            TtMode::Ptt => "ptt",
            TtMode::Htt => "htt",
        })
    }
}

fn geom_w1(stride: usize) -> ConvGeometry {
    ConvGeometry::new(stride, 0, 0)
}

fn geom_w2(k: usize) -> ConvGeometry {
    ConvGeometry::new(1, k / 2, 0)
}

fn geom_w3(k: usize) -> ConvGeometry {
    ConvGeometry::new(1, 0, k / 2)
}

fn geom_w4() -> ConvGeometry {
    ConvGeometry::new(1, 0, 0)
}

/// Geometry of the single dense conv equivalent to a TT layer whose stride sits in the
/// first 1x1 core: the spatial taps land `stride` pixels apart on the input grid.
pub fn merged_geometry(kernel: usize, stride: usize) -> ConvGeometry {
    let p = kernel / 2 * stride;
    ConvGeometry { stride, pad_h: p, pad_w: p, dilation: stride }
}

/// Sequential TT convolution.
pub fn stt_forward<T: Real>(x: &DenseTensor<T>, cores: &TTConvCores<T>, stride: usize) -> Result<DenseTensor<T>> {
    let k = cores.kernel_size();
    let o = conv2d(x, &cores.w1_kernel(), geom_w1(stride))?;
    let p = conv2d(&o, &cores.w2_kernel(), geom_w2(k))?;
    let q = conv2d(&p, &cores.w3_kernel(), geom_w3(k))?;
    conv2d(&q, &cores.w4_kernel(), geom_w4())
}

/// Parallel TT convolution: `(conv(o, W2) + conv(o, W3)) * W4` with `o = x * W1`.
pub fn ptt_forward<T: Real>(x: &DenseTensor<T>, cores: &TTConvCores<T>, stride: usize) -> Result<DenseTensor<T>> {
    branch_forward(x, cores, stride, BranchStep::Full)
}

/// Hybrid TT convolution at timestep `t` of `schedule`.
pub fn htt_forward<T: Real>(
    x: &DenseTensor<T>,
    cores: &TTConvCores<T>,
    stride: usize,
    schedule: &HttSchedule,
    t: usize,
) -> Result<DenseTensor<T>> {
    branch_forward(x, cores, stride, schedule.at(t)?)
}

fn require_uniform<T: Real>(cores: &TTConvCores<T>) -> Result<()> {
    if cores.is_uniform() {
        Ok(())
    } else {
        Err(Error::Mode(format!("parallel TT branches need r1 = r2 = r3, got {:?}", cores.ranks())))
    }
}

fn branch_forward<T: Real>(
    x: &DenseTensor<T>,
    cores: &TTConvCores<T>,
    stride: usize,
    step: BranchStep,
) -> Result<DenseTensor<T>> {
    require_uniform(cores)?;
    let k = cores.kernel_size();
    let o = conv2d(x, &cores.w1_kernel(), geom_w1(stride))?;
    let m = match step {
        BranchStep::Full => {
            let mut m = conv2d(&o, &cores.w2_kernel(), geom_w2(k))?;
            m.add_assign(&conv2d(&o, &cores.w3_kernel(), geom_w3(k))?)?;
            m
        }
        BranchStep::HalfVertical => conv2d(&o, &cores.w2_kernel(), geom_w2(k))?,
        BranchStep::HalfHorizontal => conv2d(&o, &cores.w3_kernel(), geom_w3(k))?,
    };
    conv2d(&m, &cores.w4_kernel(), geom_w4())
}

/// Plain dense convolution with its own geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseConvLayer<T = f32> {
    pub weight: DenseTensor<T>,
    pub geometry: ConvGeometry,
}

impl<T: Real> DenseConvLayer<T> {
    pub fn new(weight: DenseTensor<T>, geometry: ConvGeometry) -> Result<Self> {
        weight.expect_ndim(4)?;
        Ok(Self { weight, geometry })
    }

    /// He-normal initialised `(O, I, K, K)` layer with same padding.
    pub fn random<R: Rng + ?Sized>(i: usize, o: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        let std = (2.0 / (i * k * k) as f64).sqrt();
        Self { weight: DenseTensor::randn(&[o, i, k, k], std, rng), geometry: ConvGeometry::same(k, stride) }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn num_params(&self) -> usize {
        self.weight.len()
    }

    pub fn forward(&self, x: &DenseTensor<T>) -> Result<DenseTensor<T>> {
        conv2d(x, &self.weight, self.geometry)
    }

    pub fn backward(
        &self,
        x: &DenseTensor<T>,
        dy: &DenseTensor<T>,
        need_dx: bool,
    ) -> Result<(Option<DenseTensor<T>>, DenseTensor<T>)> {
        conv2d_backward(x, &self.weight, self.geometry, dy, need_dx)
    }
}

/// Intermediate activations of one TT forward pass.
#[derive(Clone, Debug)]
pub struct TtCache<T> {
    step: Option<BranchStep>,
    x: DenseTensor<T>,
    o: DenseTensor<T>,
    /// STT: output of the vertical core. Parallel: sum of the active branches.
    mid: DenseTensor<T>,
    /// STT only: output of the horizontal core.
    q: Option<DenseTensor<T>>,
}

/// A convolution stored as four TT cores.
#[derive(Clone, Debug, PartialEq)]
pub struct TTConvLayer<T = f32> {
    pub cores: TTConvCores<T>,
    pub mode: TtMode,
    pub stride: usize,
    pub schedule: Option<HttSchedule>,
}

impl<T: Real> TTConvLayer<T> {
    pub fn new(cores: TTConvCores<T>, mode: TtMode, stride: usize, schedule: Option<HttSchedule>) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        if cores.kernel_size().is_multiple_of(2) {
            return Err(Error::Config(format!("odd kernel size required, got {}", cores.kernel_size())));
        }
        match mode {
            TtMode::Stt if schedule.is_some() => {
                return Err(Error::Mode("an HTT schedule was given to an STT layer".into()))
            }
            TtMode::Ptt if schedule.is_some() => {
                return Err(Error::Mode("an HTT schedule was given to a PTT layer".into()))
            }
            TtMode::Htt if schedule.is_none() => return Err(Error::Mode("HTT layer without schedule".into())),
            TtMode::Ptt | TtMode::Htt => require_uniform(&cores)?,
            TtMode::Stt => {}
        }
        Ok(Self { cores, mode, stride, schedule })
    }

    pub fn in_channels(&self) -> usize {
        self.cores.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.cores.out_channels()
    }

    pub fn kernel_size(&self) -> usize {
        self.cores.kernel_size()
    }

    pub fn num_params(&self) -> usize {
        self.cores.num_params()
    }

    /// Branch evaluated at timestep `t`, or `None` for the sequential pipeline.
    pub fn step_at(&self, t: usize) -> Result<Option<BranchStep>> {
        match self.mode {
            TtMode::Stt => Ok(None),
            TtMode::Ptt => Ok(Some(BranchStep::Full)),
            TtMode::Htt => match &self.schedule {
                Some(s) => s.at(t).map(Some),
                None => Err(Error::Mode("HTT layer without schedule".into())),
            },
        }
    }

    pub fn forward(&self, x: &DenseTensor<T>, t: usize) -> Result<DenseTensor<T>> {
        match self.step_at(t)? {
            None => stt_forward(x, &self.cores, self.stride),
            Some(step) => branch_forward(x, &self.cores, self.stride, step),
        }
    }

    pub fn forward_cached(&self, x: &DenseTensor<T>, t: usize) -> Result<(DenseTensor<T>, TtCache<T>)> {
        let k = self.kernel_size();
        let step = self.step_at(t)?;
        let o = conv2d(x, &self.cores.w1_kernel(), geom_w1(self.stride))?;
        let (mid, q) = match step {
            None => {
                let p = conv2d(&o, &self.cores.w2_kernel(), geom_w2(k))?;
                let q = conv2d(&p, &self.cores.w3_kernel(), geom_w3(k))?;
                (p, Some(q))
            }
            Some(BranchStep::Full) => {
                let mut m = conv2d(&o, &self.cores.w2_kernel(), geom_w2(k))?;
                m.add_assign(&conv2d(&o, &self.cores.w3_kernel(), geom_w3(k))?)?;
                (m, None)
            }
            Some(BranchStep::HalfVertical) => (conv2d(&o, &self.cores.w2_kernel(), geom_w2(k))?, None),
            Some(BranchStep::HalfHorizontal) => (conv2d(&o, &self.cores.w3_kernel(), geom_w3(k))?, None),
        };
        let y = conv2d(q.as_ref().unwrap_or(&mid), &self.cores.w4_kernel(), geom_w4())?;
        Ok((y, TtCache { step, x: x.clone(), o, mid, q }))
    }

    /// Returns the input gradient (if requested) and core gradients shaped like the cores.
    /// Branches skipped at this timestep receive exactly zero gradient.
    pub fn backward(
        &self,
        cache: &TtCache<T>,
        dy: &DenseTensor<T>,
        need_dx: bool,
    ) -> Result<(Option<DenseTensor<T>>, TTConvCores<T>)> {
        let k = self.kernel_size();
        let c = &self.cores;
        let last_in = cache.q.as_ref().unwrap_or(&cache.mid);
        let (dm, dk4) = conv2d_backward(last_in, &c.w4_kernel(), geom_w4(), dy, true)?;
        let dm = dm.expect("requested");
        let mut dk2 = DenseTensor::zeros(&[c.w2.shape()[2], c.w2.shape()[0], k, 1]);
        let mut dk3 = DenseTensor::zeros(&[c.w3.shape()[2], c.w3.shape()[0], 1, k]);
        let d_o = match cache.step {
            None => {
                let (dp, g3) = conv2d_backward(&cache.mid, &c.w3_kernel(), geom_w3(k), &dm, true)?;
                dk3 = g3;
                let (d_o, g2) = conv2d_backward(&cache.o, &c.w2_kernel(), geom_w2(k), &dp.expect("requested"), true)?;
                dk2 = g2;
                d_o.expect("requested")
            }
            Some(step) => {
                let mut d_o = DenseTensor::zeros(cache.o.shape());
                if step.uses_vertical() {
                    let (d, g) = conv2d_backward(&cache.o, &c.w2_kernel(), geom_w2(k), &dm, true)?;
                    d_o.add_assign(&d.expect("requested"))?;
                    dk2 = g;
                }
                if step.uses_horizontal() {
                    let (d, g) = conv2d_backward(&cache.o, &c.w3_kernel(), geom_w3(k), &dm, true)?;
                    d_o.add_assign(&d.expect("requested"))?;
                    dk3 = g;
                }
                d_o
            }
        };
        let (dx, dk1) = conv2d_backward(&cache.x, &c.w1_kernel(), geom_w1(self.stride), &d_o, need_dx)?;
        let grads = TTConvCores {
            w1: layout::w1_from_kernel(&dk1),
            w2: layout::w2_from_kernel(&dk2),
            w3: layout::w3_from_kernel(&dk3),
            w4: layout::w4_from_kernel(&dk4),
        };
        Ok((dx, grads))
    }

    /// Merge the cores into one dense conv computing the same function.
    ///
    /// STT merges to the full separable `K x K` kernel; PTT and HTT merge to the cross-shaped
    /// kernel of the full (both-branch) path. With stride `s > 1` the merged layer uses dilation
    /// `s`, because the spatial cores run on the already subsampled map.
    pub fn to_dense_layer(&self) -> Result<DenseConvLayer<T>> {
        let weight = match self.mode {
            TtMode::Stt => stt_dense_kernel(&self.cores)?,
            TtMode::Ptt | TtMode::Htt => merge_ptt(&self.cores)?,
        };
        DenseConvLayer::new(weight, merged_geometry(self.kernel_size(), self.stride))
    }
}
