//! Patch-by-patch reference implementation.
//!
//! Runs the original strided network on one patch per pixel. Nothing here is
//! shared with the dense engine except the tensor type and the scalar
//! conventions (tap order, tie-breaking, `relu'(0) = 0`). Deliberately slow.

use std::time::{Duration, Instant};

use crate::bwd::GradientSet;
use crate::error::{Error, Result};
use crate::netspec::{ConvLayerSpec, LayerSpec, NetworkSpec, NonlinKind, PoolKind, PoolLayerSpec};
use crate::tensor::{FeatureMap, Shape};
use crate::Scalar;

/// The `1 x 1 x C_out` output for one patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchResult<T> {
    pub scores: Vec<T>,
}

/// Intermediate values of one patch pass, kept for backward.
struct PatchTrace<T> {
    inputs: Vec<FeatureMap<T>>,
    /// Winning `(row, col)` in the layer input, per output entry of a max pool.
    argmax: Vec<Option<Vec<(usize, usize)>>>,
    output: FeatureMap<T>,
}

pub fn patch_forward<T: Scalar>(spec: &NetworkSpec<T>, patch: &FeatureMap<T>) -> Result<PatchResult<T>> {
    patch_forward_timed(spec, patch, None)
}

/// [`patch_forward`] adding each layer's elapsed time to `timings[k]`.
pub fn patch_forward_timed<T: Scalar>(
    spec: &NetworkSpec<T>,
    patch: &FeatureMap<T>,
    timings: Option<&mut [Duration]>,
) -> Result<PatchResult<T>> {
    let trace = trace_patch(spec, patch, timings)?;
    Ok(PatchResult {
        scores: trace.output.data().to_vec(),
    })
}

fn trace_patch<T: Scalar>(
    spec: &NetworkSpec<T>,
    patch: &FeatureMap<T>,
    mut timings: Option<&mut [Duration]>,
) -> Result<PatchTrace<T>> {
    let n = spec.patch_size()?;
    if patch.channels() != spec.input_channels {
        return Err(Error::ChannelMismatch {
            expected: spec.input_channels,
            found: patch.channels(),
        });
    }
    if patch.height() != n || patch.width() != n {
        return Err(Error::PatchSizeMismatch {
            expected: n,
            found: patch.shape(),
        });
    }
    let mut inputs = Vec::with_capacity(spec.layers.len());
    let mut argmax = Vec::with_capacity(spec.layers.len());
    let mut x = patch.clone();
    for (k, layer) in spec.layers.iter().enumerate() {
        let start = Instant::now();
        let (y, arg) = match layer {
            LayerSpec::Conv(c) => (strided_conv(&x, c, k)?, None),
            LayerSpec::Pool(p) => {
                let (y, arg) = strided_pool(&x, p, k)?;
                (y, arg)
            }
            LayerSpec::Nonlin(n) => (pointwise(&x, n.kind), None),
        };
        if let Some(t) = timings.as_deref_mut() {
            t[k] += start.elapsed();
        }
        inputs.push(x);
        argmax.push(arg);
        x = y;
    }
    Ok(PatchTrace {
        inputs,
        argmax,
        output: x,
    })
}

fn strided_out(size: usize, window: usize, stride: usize, layer: usize) -> Result<usize> {
    if size < window || !(size - window).is_multiple_of(stride) {
        return Err(Error::PatchSize { layer: layer + 1 });
    }
    Ok((size - window) / stride + 1)
}

fn strided_conv<T: Scalar>(x: &FeatureMap<T>, c: &ConvLayerSpec<T>, layer: usize) -> Result<FeatureMap<T>> {
    let (k, s) = (c.kernel_size, c.stride);
    let oh = strided_out(x.height(), k, s, layer)?;
    let ow = strided_out(x.width(), k, s, layer)?;
    let mut y = FeatureMap::zeros(Shape::new(c.out_channels, oh, ow)?)?;
    for o in 0..c.out_channels {
        for u in 0..oh {
            for v in 0..ow {
                let mut acc = c.bias[o];
                for ci in 0..c.in_channels {
                    for i in 0..k {
                        for j in 0..k {
                            acc += c.weight(o, ci, i, j) * x.get(ci, u * s + i, v * s + j);
                        }
                    }
                }
                y.set(o, u, v, acc);
            }
        }
    }
    Ok(y)
}

#[allow(clippy::type_complexity)]
fn strided_pool<T: Scalar>(
    x: &FeatureMap<T>,
    p: &PoolLayerSpec,
    layer: usize,
) -> Result<(FeatureMap<T>, Option<Vec<(usize, usize)>>)> {
    let (k, s) = (p.kernel_size, p.stride);
    let oh = strided_out(x.height(), k, s, layer)?;
    let ow = strided_out(x.width(), k, s, layer)?;
    let mut y = FeatureMap::zeros(Shape::new(x.channels(), oh, ow)?)?;
    let mut winners = Vec::new();
    let count = T::from_usize(k * k);
    for c in 0..x.channels() {
        for u in 0..oh {
            for v in 0..ow {
                match p.kind {
                    PoolKind::Max => {
                        let mut best = (u * s, v * s);
                        for i in 0..k {
                            for j in 0..k {
                                let at = (u * s + i, v * s + j);
                                if x.get(c, at.0, at.1) > x.get(c, best.0, best.1) {
                                    best = at;
                                }
                            }
                        }
                        y.set(c, u, v, x.get(c, best.0, best.1));
                        winners.push(best);
                    }
                    PoolKind::Average => {
                        let mut sum = T::zero();
                        for i in 0..k {
                            for j in 0..k {
                                sum += x.get(c, u * s + i, v * s + j);
                            }
                        }
                        y.set(c, u, v, sum / count);
                    }
                }
            }
        }
    }
    let arg = (p.kind == PoolKind::Max).then_some(winners);
    Ok((y, arg))
}

fn pointwise<T: Scalar>(x: &FeatureMap<T>, kind: NonlinKind) -> FeatureMap<T> {
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = kind.apply(*v);
    }
    y
}

/// Runs [`patch_forward`] on the patch of every pixel of `image`.
pub fn scan_forward<T: Scalar>(spec: &NetworkSpec<T>, image: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    let pixels: Vec<_> = (0..image.height())
        .flat_map(|y| (0..image.width()).map(move |x| (y, x)))
        .collect();
    let results = scan_pixels(spec, image, &pixels, None)?;
    let shape = Shape::new(spec.output_channels(), image.height(), image.width())?;
    let mut out = FeatureMap::zeros(shape)?;
    for (&(y, x), r) in pixels.iter().zip(results) {
        for (c, v) in r.scores.into_iter().enumerate() {
            out.set(c, y, x, v);
        }
    }
    Ok(out)
}

/// Pads `image`, cuts out the patch centred on each listed pixel and runs
/// the original network on it. Per-layer times are added to `timings`.
pub fn scan_pixels<T: Scalar>(
    spec: &NetworkSpec<T>,
    image: &FeatureMap<T>,
    pixels: &[(usize, usize)],
    mut timings: Option<&mut [Duration]>,
) -> Result<Vec<PatchResult<T>>> {
    if image.channels() != spec.input_channels {
        return Err(Error::ChannelMismatch {
            expected: spec.input_channels,
            found: image.channels(),
        });
    }
    let n = spec.patch_size()?;
    let (lead, trail) = spec.padding()?;
    let padded = image.pad_asym(lead, trail, T::zero());
    pixels
        .iter()
        .map(|&(y, x)| {
            let patch = padded.crop_patch(y + lead, x + lead, n)?;
            patch_forward_timed(spec, &patch, timings.as_deref_mut())
        })
        .collect()
}

/// Sums the gradients of the patches at `pixels`, each backpropagated from
/// its own output error vector.
pub fn patch_backward_batch<T: Scalar>(
    spec: &NetworkSpec<T>,
    image: &FeatureMap<T>,
    pixels: &[(usize, usize)],
    deltas: &[Vec<T>],
) -> Result<GradientSet<T>> {
    if pixels.len() != deltas.len() {
        return Err(Error::Mask(format!(
            "{} pixels but {} error vectors",
            pixels.len(),
            deltas.len()
        )));
    }
    if image.channels() != spec.input_channels {
        return Err(Error::ChannelMismatch {
            expected: spec.input_channels,
            found: image.channels(),
        });
    }
    let n = spec.patch_size()?;
    let (lead, trail) = spec.padding()?;
    let padded = image.pad_asym(lead, trail, T::zero());
    let wide = spec.cast::<T::Acc>();
    let mut total = GradientSet::zeros(&wide);
    for (&(y, x), delta) in pixels.iter().zip(deltas) {
        if y >= image.height() || x >= image.width() {
            return Err(Error::Mask(format!(
                "pixel ({y}, {x}) outside the {}x{} image",
                image.height(),
                image.width()
            )));
        }
        if delta.len() != spec.output_channels() {
            return Err(Error::ChannelMismatch {
                expected: spec.output_channels(),
                found: delta.len(),
            });
        }
        let patch = padded.crop_patch(y + lead, x + lead, n)?;
        patch_backward(spec, &wide, &patch, delta, &mut total)?;
    }
    Ok(total.cast())
}

/// Textbook strided backward for one patch, adding into `grads`. The
/// forward pass runs in `T`; the backward pass in `T::Acc`, with `wide`
/// holding the network's parameters in that type.
fn patch_backward<T: Scalar>(
    spec: &NetworkSpec<T>,
    wide: &NetworkSpec<T::Acc>,
    patch: &FeatureMap<T>,
    delta: &[T],
    grads: &mut GradientSet<T::Acc>,
) -> Result<()> {
    let trace = trace_patch(spec, patch, None)?;
    let inputs: Vec<FeatureMap<T::Acc>> = trace.inputs.iter().map(|x| x.cast()).collect();
    let delta = delta.iter().map(|v| T::Acc::from_f64(v.as_f64())).collect();
    let err = FeatureMap::from_vec(trace.output.shape(), delta)?;
    backward_trace(wide, &inputs, &trace.argmax, err, grads)
}

#[allow(clippy::type_complexity)]
fn backward_trace<A: Scalar>(
    spec: &NetworkSpec<A>,
    inputs: &[FeatureMap<A>],
    argmax: &[Option<Vec<(usize, usize)>>],
    mut err: FeatureMap<A>,
    grads: &mut GradientSet<A>,
) -> Result<()> {
    for k in (0..spec.layers.len()).rev() {
        let x = &inputs[k];
        let mut back = FeatureMap::zeros(x.shape())?;
        match &spec.layers[k] {
            LayerSpec::Conv(c) => {
                let g = grads.layer_mut(k).expect("conv layer has a gradient slot");
                let (kk, s) = (c.kernel_size, c.stride);
                for o in 0..c.out_channels {
                    for u in 0..err.height() {
                        for v in 0..err.width() {
                            let e = err.get(o, u, v);
                            g.bias[o] += e;
                            for ci in 0..c.in_channels {
                                for i in 0..kk {
                                    for j in 0..kk {
                                        let (r, q) = (u * s + i, v * s + j);
                                        g.kernel[c.weight_index(o, ci, i, j)] += e * x.get(ci, r, q);
                                        let b = back.get(ci, r, q) + c.weight(o, ci, i, j) * e;
                                        back.set(ci, r, q, b);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            LayerSpec::Pool(p) => {
                let (kk, s) = (p.kernel_size, p.stride);
                let count = A::from_usize(kk * kk);
                let mut winners = argmax[k].iter().flatten();
                for c in 0..err.channels() {
                    for u in 0..err.height() {
                        for v in 0..err.width() {
                            let e = err.get(c, u, v);
                            match p.kind {
                                PoolKind::Max => {
                                    let &(r, q) = winners.next().expect("one winner per output");
                                    back.set(c, r, q, back.get(c, r, q) + e);
                                }
                                PoolKind::Average => {
                                    for i in 0..kk {
                                        for j in 0..kk {
                                            let (r, q) = (u * s + i, v * s + j);
                                            back.set(c, r, q, back.get(c, r, q) + e / count);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            LayerSpec::Nonlin(n) => {
                for (b, (&e, &xv)) in back.data_mut().iter_mut().zip(err.data().iter().zip(x.data())) {
                    *b = e * n.kind.derivative(xv);
                }
            }
        }
        err = back;
    }
    Ok(())
}
