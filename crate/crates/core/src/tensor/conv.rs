//! 2-D cross-correlation over NCHW batches, lowered to GEMM through im2col.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::scalar::{matmul, matmul_at, matmul_bt, Real};

use super::DenseTensor;

/// Stride, zero padding and dilation of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub dilation: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self { stride: 1, pad_h: 0, pad_w: 0, dilation: 1 }
    }
}

impl ConvGeometry {
    pub fn new(stride: usize, pad_h: usize, pad_w: usize) -> Self {
        Self { stride, pad_h, pad_w, dilation: 1 }
    }

    /// Stride `s` with `K/2` padding on both axes ("same" padding for odd K).
    pub fn same(kernel: usize, stride: usize) -> Self {
        Self::new(stride, kernel / 2, kernel / 2)
    }

    pub fn output_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        if self.stride == 0 || self.dilation == 0 {
            return shape_err("stride and dilation must be positive");
        }
        let span_h = self.dilation * (kh - 1) + 1;
        let span_w = self.dilation * (kw - 1) + 1;
        let (ph, pw) = (h + 2 * self.pad_h, w + 2 * self.pad_w);
        if ph < span_h || pw < span_w {
            return shape_err(format!(
                "kernel {kh}x{kw} (dilation {}) does not fit padded input {ph}x{pw}",
                self.dilation
            ));
        }
        Ok(((ph - span_h) / self.stride + 1, (pw - span_w) / self.stride + 1))
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == 1 && self.pad_h == 0 && self.pad_w == 0
    }
}

struct Plan {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    g: ConvGeometry,
}

impl Plan {
    fn new(input: &[usize], kernel: &[usize], g: ConvGeometry) -> Result<Self> {
        let (c, h, w) = (input[1], input[2], input[3]);
        let (o, ci, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if c != ci {
            return shape_err(format!("input has {c} channels, kernel expects {ci}"));
        }
        let (ho, wo) = g.output_hw(h, w, kh, kw)?;
        Ok(Self { c, h, w, o, kh, kw, ho, wo, g })
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }

    fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }

    #[inline]
    fn src_coord(&self, out: usize, k: usize, pad: usize) -> Option<usize> {
        let pos = out * self.g.stride + k * self.g.dilation;
        pos.checked_sub(pad)
    }

    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let hw = self.hw_out();
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let iy = self.src_coord(oy, ki, self.g.pad_h).filter(|&v| v < self.h);
                        for ox in 0..self.wo {
                            let ix = self.src_coord(ox, kj, self.g.pad_w).filter(|&v| v < self.w);
                            dst[oy * self.wo + ox] = match (iy, ix) {
                                (Some(iy), Some(ix)) => x[(ci * self.h + iy) * self.w + ix],
                                _ => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], dx: &mut [T]) {
        let hw = self.hw_out();
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &col[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let Some(iy) = self.src_coord(oy, ki, self.g.pad_h).filter(|&v| v < self.h) else {
                            continue;
                        };
                        for ox in 0..self.wo {
                            if let Some(ix) = self.src_coord(ox, kj, self.g.pad_w).filter(|&v| v < self.w) {
                                dx[(ci * self.h + iy) * self.w + ix] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn as_batch<T: Real>(input: &DenseTensor<T>) -> Result<Vec<usize>> {
    match input.ndim() {
        3 => Ok([&[1usize][..], input.shape()].concat()),
        4 => Ok(input.shape().to_vec()),
        n => shape_err(format!("convolution input must be CHW or NCHW, got {n} dims")),
    }
}

/// Convolution forward pass. Accepts `(C, H, W)` or `(N, C, H, W)` input and returns the
/// output with the same rank.
pub fn conv2d<T: Real>(
    input: &DenseTensor<T>,
    kernel: &DenseTensor<T>,
    geometry: ConvGeometry,
) -> Result<DenseTensor<T>> {
    kernel.expect_ndim(4)?;
    let ishape = as_batch(input)?;
    let plan = Plan::new(&ishape, kernel.shape(), geometry)?;
    let n = ishape[0];
    let out_len = plan.o * plan.hw_out();
    let mut out = vec![T::zero(); n * out_len];
    let pointwise = geometry.is_pointwise(plan.kh, plan.kw);
    out.par_chunks_mut(out_len).zip(input.data().par_chunks(plan.in_len())).for_each_init(
        || vec![T::zero(); if pointwise { 0 } else { plan.ckk() * plan.hw_out() }],
        |col, (y, x)| {
            let cols: &[T] = if pointwise {
                x
            } else {
                plan.im2col(x, col);
                col
            };
            matmul(plan.o, plan.ckk(), plan.hw_out(), kernel.data(), cols, y, false);
        },
    );
    let shape = if input.ndim() == 3 { vec![plan.o, plan.ho, plan.wo] } else { vec![n, plan.o, plan.ho, plan.wo] };
    DenseTensor::new(shape, out)
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
///
/// Per-sample kernel gradients are reduced in sample order, so the result does not depend
/// on the thread count.
pub fn conv2d_backward<T: Real>(
    input: &DenseTensor<T>,
    kernel: &DenseTensor<T>,
    geometry: ConvGeometry,
    grad_out: &DenseTensor<T>,
    need_input_grad: bool,
) -> Result<(Option<DenseTensor<T>>, DenseTensor<T>)> {
    kernel.expect_ndim(4)?;
    let ishape = as_batch(input)?;
    let plan = Plan::new(&ishape, kernel.shape(), geometry)?;
    let n = ishape[0];
    let out_len = plan.o * plan.hw_out();
    if grad_out.len() != n * out_len {
        return shape_err(format!(
            "upstream gradient {:?} does not match conv output ({n}, {}, {}, {})",
            grad_out.shape(),
            plan.o,
            plan.ho,
            plan.wo
        ));
    }
    let pointwise = geometry.is_pointwise(plan.kh, plan.kw);
    let wlen = kernel.len();
    let in_len = plan.in_len();

    let per_sample: Vec<(Vec<T>, Vec<T>)> = input
        .data()
        .par_chunks(in_len)
        .zip(grad_out.data().par_chunks(out_len))
        .map(|(x, dy)| {
            let mut col = vec![T::zero(); if pointwise { 0 } else { plan.ckk() * plan.hw_out() }];
            let cols: &[T] = if pointwise {
                x
            } else {
                plan.im2col(x, &mut col);
                &col
            };
            let mut dw = vec![T::zero(); wlen];
            matmul_bt(plan.o, plan.hw_out(), plan.ckk(), dy, cols, &mut dw, false);
            let mut dx = Vec::new();
            if need_input_grad {
                let mut dcol = vec![T::zero(); plan.ckk() * plan.hw_out()];
                matmul_at(plan.ckk(), plan.o, plan.hw_out(), kernel.data(), dy, &mut dcol, false);
                if pointwise {
                    dx = dcol;
                } else {
                    dx = vec![T::zero(); in_len];
                    plan.col2im(&dcol, &mut dx);
                }
            }
            (dw, dx)
        })
        .collect();

    let mut dkernel = DenseTensor::zeros(kernel.shape());
    let mut dinput = need_input_grad.then(|| DenseTensor::zeros(input.shape()));
    for (s, (dw, dx)) in per_sample.into_iter().enumerate() {
        dkernel.data_mut().iter_mut().zip(&dw).for_each(|(a, &b)| *a += b);
        if let Some(di) = dinput.as_mut() {
            di.data_mut()[s * in_len..(s + 1) * in_len].copy_from_slice(&dx);
        }
    }
    Ok((dinput, dkernel))
}
