//! One-pass forward propagation of a [`DensePlan`] over a whole image.
//!
//! Every layer runs with stride 1. For a fixed kernel tap the inner loops
//! sweep an output row against a contiguous input row, so memory is read
//! sequentially. Within each output window the accumulation order is
//! channel, then kernel row, then kernel column, starting from the bias.

use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::dilate::{DensePlan, DilatedConv, DilatedPool, PlanLayer};
use crate::error::{Error, Result};
use crate::netspec::{NonlinKind, PoolKind};
use crate::tensor::{FeatureMap, Shape};
use crate::{for_each_chunk, ExecMode, Scalar};

/// Winning tap of every max-pool output entry, stored as `i * p + j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArgmaxMap {
    shape: Shape,
    kernel_size: usize,
    taps: Vec<u32>,
}

impl ArgmaxMap {
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn taps(&self) -> &[u32] {
        &self.taps
    }

    /// Original-kernel coordinates `(i, j)` of the maximum at `(c, u, v)`.
    pub fn tap(&self, c: usize, u: usize, v: usize) -> (usize, usize) {
        let t = self.taps[(c * self.shape.height + u) * self.shape.width + v] as usize;
        (t / self.kernel_size, t % self.kernel_size)
    }
}

/// Everything backward propagation needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    /// Input of every layer; `inputs[0]` is the padded image.
    pub inputs: Vec<FeatureMap<T>>,
    /// Argmax records, `Some` exactly for max-pool layers.
    pub argmax: Vec<Option<ArgmaxMap>>,
    pub output: FeatureMap<T>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Output of layer `k`, which is also the input of layer `k + 1`.
    pub fn layer_output(&self, k: usize) -> &FeatureMap<T> {
        self.inputs.get(k + 1).unwrap_or(&self.output)
    }
}

pub(crate) fn out_dims(x: &FeatureMap<impl Scalar>, extent: usize) -> Result<(usize, usize)> {
    if x.height() < extent || x.width() < extent {
        return Err(Error::InputTooSmall {
            height: x.height(),
            width: x.width(),
            extent,
        });
    }
    Ok((x.height() - extent + 1, x.width() - extent + 1))
}

pub fn dense_forward<T: Scalar>(plan: &DensePlan<T>, image: &FeatureMap<T>) -> Result<ForwardCache<T>> {
    dense_forward_with(plan, image, ExecMode::Serial)
}

/// Pads `image` and runs every plan layer with stride 1. The output has one
/// score vector per pixel of the unpadded image.
pub fn dense_forward_with<T: Scalar>(
    plan: &DensePlan<T>,
    image: &FeatureMap<T>,
    mode: ExecMode,
) -> Result<ForwardCache<T>> {
    forward_profiled(plan, image, mode, None)
}

pub(crate) fn forward_profiled<T: Scalar>(
    plan: &DensePlan<T>,
    image: &FeatureMap<T>,
    mode: ExecMode,
    mut timings: Option<&mut Vec<Duration>>,
) -> Result<ForwardCache<T>> {
    if image.channels() != plan.input_channels() {
        return Err(Error::ChannelMismatch {
            expected: plan.input_channels(),
            found: image.channels(),
        });
    }
    let (lead, trail) = plan.padding();
    let mut inputs = Vec::with_capacity(plan.layers().len());
    let mut argmax = Vec::with_capacity(plan.layers().len());
    let mut current = image.pad_asym(lead, trail, T::zero());
    for layer in plan.layers() {
        let start = Instant::now();
        let (y, arg) = forward_layer(layer, &current, mode)?;
        if let Some(t) = timings.as_deref_mut() {
            t.push(start.elapsed());
        }
        inputs.push(std::mem::replace(&mut current, y));
        argmax.push(arg);
    }
    Ok(ForwardCache {
        inputs,
        argmax,
        output: current,
    })
}

/// Applies one plan layer.
pub fn forward_layer<T: Scalar>(
    layer: &PlanLayer<T>,
    x: &FeatureMap<T>,
    mode: ExecMode,
) -> Result<(FeatureMap<T>, Option<ArgmaxMap>)> {
    Ok(match layer {
        PlanLayer::Conv(c) => (dilated_conv_forward_with(x, c, mode)?, None),
        PlanLayer::Pool(p) => match p.base.kind {
            PoolKind::Max => {
                let (y, arg) = dilated_maxpool_forward_with(x, p, mode)?;
                (y, Some(arg))
            }
            PoolKind::Average => (dilated_avgpool_forward_with(x, p, mode)?, None),
        },
        PlanLayer::Nonlin(n) => (nonlin_forward(x, n.kind), None),
    })
}

pub fn dilated_conv_forward<T: Scalar>(x: &FeatureMap<T>, layer: &DilatedConv<T>) -> Result<FeatureMap<T>> {
    dilated_conv_forward_with(x, layer, ExecMode::Serial)
}

/// Stride-1 correlation with the dilated kernel:
/// `out[o, u, v] = bias[o] + sum_{c,i,j} W[o, c, i, j] * x[c, u + i*d, v + j*d]`.
pub fn dilated_conv_forward_with<T: Scalar>(
    x: &FeatureMap<T>,
    layer: &DilatedConv<T>,
    mode: ExecMode,
) -> Result<FeatureMap<T>> {
    let base = &layer.base;
    if x.channels() != base.in_channels {
        return Err(Error::ChannelMismatch {
            expected: base.in_channels,
            found: x.channels(),
        });
    }
    let (oh, ow) = out_dims(x, layer.extent())?;
    let (width, k) = (x.width(), base.kernel_size);
    let plane = oh * ow;
    let mut out = vec![T::zero(); base.out_channels * plane];
    for_each_chunk(&mut out, plane, mode, |o, dst| {
        dst.fill(base.bias[o]);
        for c in 0..base.in_channels {
            let src = x.channel(c);
            for i in 0..k {
                for j in 0..k {
                    let w = base.weight(o, c, i, j);
                    let (dy, dx) = layer.tap_offset(i, j);
                    for u in 0..oh {
                        let s = &src[(u + dy) * width + dx..][..ow];
                        let d = &mut dst[u * ow..][..ow];
                        for (acc, &v) in d.iter_mut().zip(s) {
                            *acc += w * v;
                        }
                    }
                }
            }
        }
    });
    let shape = Shape::new(base.out_channels, oh, ow)?;
    Ok(FeatureMap::from_parts(shape, out))
}

pub fn dilated_maxpool_forward<T: Scalar>(
    x: &FeatureMap<T>,
    layer: &DilatedPool,
) -> Result<(FeatureMap<T>, ArgmaxMap)> {
    dilated_maxpool_forward_with(x, layer, ExecMode::Serial)
}

/// Max over the dilated window. Ties go to the first tap in row-major
/// `(i, j)` order.
pub fn dilated_maxpool_forward_with<T: Scalar>(
    x: &FeatureMap<T>,
    layer: &DilatedPool,
    mode: ExecMode,
) -> Result<(FeatureMap<T>, ArgmaxMap)> {
    let (oh, ow) = out_dims(x, layer.extent())?;
    let (width, p, d) = (x.width(), layer.base.kernel_size, layer.dilation);
    let plane = oh * ow;
    let shape = Shape::new(x.channels(), oh, ow)?;
    let mut out = vec![T::zero(); shape.len()];
    let mut taps = vec![0u32; shape.len()];
    let body = |c: usize, dst: &mut [T], arg: &mut [u32]| {
        let src = x.channel(c);
        for u in 0..oh {
            dst[u * ow..][..ow].copy_from_slice(&src[u * width..][..ow]);
        }
        for i in 0..p {
            for j in 0..p {
                if i == 0 && j == 0 {
                    continue;
                }
                let tap = (i * p + j) as u32;
                for u in 0..oh {
                    let s = &src[(u + i * d) * width + j * d..][..ow];
                    let best = &mut dst[u * ow..][..ow];
                    let which = &mut arg[u * ow..][..ow];
                    for ((b, a), &v) in best.iter_mut().zip(which.iter_mut()).zip(s) {
                        if v > *b {
                            *b = v;
                            *a = tap;
                        }
                    }
                }
            }
        }
    };
    match mode {
        ExecMode::Serial => out
            .chunks_mut(plane)
            .zip(taps.chunks_mut(plane))
            .enumerate()
            .for_each(|(c, (dst, arg))| body(c, dst, arg)),
        ExecMode::Parallel => out
            .par_chunks_mut(plane)
            .zip(taps.par_chunks_mut(plane))
            .enumerate()
            .for_each(|(c, (dst, arg))| body(c, dst, arg)),
    }
    Ok((
        FeatureMap::from_parts(shape, out),
        ArgmaxMap {
            shape,
            kernel_size: p,
            taps,
        },
    ))
}

pub fn dilated_avgpool_forward<T: Scalar>(x: &FeatureMap<T>, layer: &DilatedPool) -> Result<FeatureMap<T>> {
    dilated_avgpool_forward_with(x, layer, ExecMode::Serial)
}

/// Mean over the `p * p` taps of the dilated window, summed in row-major
/// tap order and then divided by `p * p`.
pub fn dilated_avgpool_forward_with<T: Scalar>(
    x: &FeatureMap<T>,
    layer: &DilatedPool,
    mode: ExecMode,
) -> Result<FeatureMap<T>> {
    let (oh, ow) = out_dims(x, layer.extent())?;
    let (width, p, d) = (x.width(), layer.base.kernel_size, layer.dilation);
    let count = T::from_usize(layer.taps());
    let shape = Shape::new(x.channels(), oh, ow)?;
    let mut out = vec![T::zero(); shape.len()];
    for_each_chunk(&mut out, oh * ow, mode, |c, dst| {
        let src = x.channel(c);
        for i in 0..p {
            for j in 0..p {
                for u in 0..oh {
                    let s = &src[(u + i * d) * width + j * d..][..ow];
                    for (acc, &v) in dst[u * ow..][..ow].iter_mut().zip(s) {
                        *acc += v;
                    }
                }
            }
        }
        dst.iter_mut().for_each(|v| *v /= count);
    });
    Ok(FeatureMap::from_parts(shape, out))
}

pub fn nonlin_forward<T: Scalar>(x: &FeatureMap<T>, kind: NonlinKind) -> FeatureMap<T> {
    match kind {
        NonlinKind::Identity => x.clone(),
        _ => x.map(|v| kind.apply(v)),
    }
}
