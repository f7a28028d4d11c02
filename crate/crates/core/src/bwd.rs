//! One-pass backward propagation through a [`DensePlan`].
//!
//! The last-layer error map is masked to the pixels of interest and then
//! pushed back through every layer. The work done is the same whatever the
//! mask selects; zeroed errors flow through the same loops as live ones.
//! Kernel gradients are accumulated only for the original taps of each
//! dilated kernel, so a [`GradientSet`] has the shapes of the original
//! network's kernels. Gradients of several pixels are summed, not averaged.
//!
//! [`dense_backward`] does its arithmetic in [`Scalar::Acc`] and rounds the
//! gradients to the storage type at the end. The per-layer functions work in
//! whatever type they are given.

use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::dilate::{DensePlan, DilatedConv, DilatedPool, PlanLayer};
use crate::error::{Error, Result};
use crate::fwd::{ArgmaxMap, ForwardCache};
use crate::netspec::{NetworkSpec, NonlinKind, PoolKind};
use crate::tensor::{FeatureMap, Shape};
use crate::{for_each_chunk, ExecMode, Scalar};

/// Pixels of the output map whose errors take part in backward propagation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ErrorMask {
    height: usize,
    width: usize,
    selected: Vec<bool>,
}

impl ErrorMask {
    pub fn empty(height: usize, width: usize) -> Self {
        ErrorMask {
            height,
            width,
            selected: vec![false; height * width],
        }
    }

    pub fn all(height: usize, width: usize) -> Self {
        ErrorMask {
            height,
            width,
            selected: vec![true; height * width],
        }
    }

    pub fn from_pixels(height: usize, width: usize, pixels: &[(usize, usize)]) -> Result<Self> {
        let mut mask = Self::empty(height, width);
        for &(y, x) in pixels {
            if y >= height || x >= width {
                return Err(Error::Mask(format!(
                    "pixel ({y}, {x}) outside the {height}x{width} map"
                )));
            }
            mask.selected[y * width + x] = true;
        }
        Ok(mask)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        self.selected[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.selected.iter().any(|&s| s)
    }

    /// Selected pixels in row-major order.
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        (0..self.selected.len())
            .filter(|&i| self.selected[i])
            .map(|i| (i / self.width, i % self.width))
            .collect()
    }
}

/// Gradients of one conv layer, shaped like its original kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGradient<T> {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_size: usize,
    /// `[out][in][k][k]`, row-major.
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvGradient<T> {
    pub fn zeros(out_channels: usize, in_channels: usize, kernel_size: usize) -> Self {
        ConvGradient {
            out_channels,
            in_channels,
            kernel_size,
            kernel: vec![T::zero(); out_channels * in_channels * kernel_size * kernel_size],
            bias: vec![T::zero(); out_channels],
        }
    }

    fn values(&self) -> impl Iterator<Item = &T> {
        self.kernel.iter().chain(&self.bias)
    }
}

/// Per-layer gradients; `None` for pooling and pointwise layers.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet<T> {
    layers: Vec<Option<ConvGradient<T>>>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn zeros(spec: &NetworkSpec<T>) -> Self {
        let mut layers = vec![None; spec.layers.len()];
        for (k, c) in spec.conv_layers() {
            layers[k] = Some(ConvGradient::zeros(c.out_channels, c.in_channels, c.kernel_size));
        }
        GradientSet { layers }
    }

    pub fn layers(&self) -> &[Option<ConvGradient<T>>] {
        &self.layers
    }

    pub fn layer(&self, k: usize) -> Option<&ConvGradient<T>> {
        self.layers.get(k).and_then(Option::as_ref)
    }

    pub fn layer_mut(&mut self, k: usize) -> Option<&mut ConvGradient<T>> {
        self.layers.get_mut(k).and_then(Option::as_mut)
    }

    pub fn conv_gradients(&self) -> impl Iterator<Item = (usize, &ConvGradient<T>)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(k, g)| g.as_ref().map(|g| (k, g)))
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        let same = self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => a.kernel.len() == b.kernel.len() && a.bias.len() == b.bias.len(),
                (None, None) => true,
                _ => false,
            });
        if same {
            Ok(())
        } else {
            Err(Error::InvalidSpec("gradient sets belong to different networks".into()))
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(a), Some(b)) = (a, b) {
                a.kernel.iter_mut().zip(&b.kernel).for_each(|(x, &y)| *x += y);
                a.bias.iter_mut().zip(&b.bias).for_each(|(x, &y)| *x += y);
            }
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_compatible(other)?;
        Ok(self
            .layers
            .iter()
            .zip(&other.layers)
            .filter_map(|(a, b)| a.as_ref().zip(b.as_ref()))
            .flat_map(|(a, b)| a.values().zip(b.values()))
            .map(|(&x, &y)| (x - y).abs())
            .fold(T::zero(), T::max))
    }

    pub fn max_abs(&self) -> T {
        self.conv_gradients()
            .flat_map(|(_, g)| g.values())
            .fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.conv_gradients().all(|(_, g)| g.values().all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> GradientSet<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.as_f64())).collect();
        GradientSet {
            layers: self
                .layers
                .iter()
                .map(|g| {
                    g.as_ref().map(|g| ConvGradient {
                        out_channels: g.out_channels,
                        in_channels: g.in_channels,
                        kernel_size: g.kernel_size,
                        kernel: conv(&g.kernel),
                        bias: conv(&g.bias),
                    })
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct BackwardOptions {
    pub mode: ExecMode,
    /// Also return the error with respect to the (unpadded) input image.
    pub input_delta: bool,
}

#[derive(Clone, Debug)]
pub struct BackwardOutput<T> {
    pub gradients: GradientSet<T>,
    pub input_delta: Option<FeatureMap<T>>,
}

pub fn dense_backward<T: Scalar>(
    plan: &DensePlan<T>,
    cache: &ForwardCache<T>,
    delta_last: &FeatureMap<T>,
    mask: &ErrorMask,
) -> Result<GradientSet<T>> {
    Ok(dense_backward_with(plan, cache, delta_last, mask, BackwardOptions::default())?.gradients)
}

pub fn dense_backward_with<T: Scalar>(
    plan: &DensePlan<T>,
    cache: &ForwardCache<T>,
    delta_last: &FeatureMap<T>,
    mask: &ErrorMask,
    opts: BackwardOptions,
) -> Result<BackwardOutput<T>> {
    backward_profiled(plan, cache, delta_last, mask, opts, None)
}

/// `timings`, when given, receives one duration per layer in forward order.
pub(crate) fn backward_profiled<T: Scalar>(
    plan: &DensePlan<T>,
    cache: &ForwardCache<T>,
    delta_last: &FeatureMap<T>,
    mask: &ErrorMask,
    opts: BackwardOptions,
    mut timings: Option<&mut Vec<Duration>>,
) -> Result<BackwardOutput<T>> {
    let layers = plan.layers();
    if cache.inputs.len() != layers.len() || cache.argmax.len() != layers.len() {
        return Err(Error::InvalidSpec("forward cache does not match the plan".into()));
    }
    if delta_last.shape() != cache.output.shape() {
        return Err(Error::ShapeMismatch {
            left: cache.output.shape(),
            right: delta_last.shape(),
        });
    }
    let mut delta: FeatureMap<T::Acc> = apply_mask(&delta_last.cast(), mask)?;
    let mut gradients = GradientSet::<T::Acc>::zeros(&plan.source().cast());
    let first_conv = layers
        .iter()
        .position(|l| matches!(l, PlanLayer::Conv(_)))
        .unwrap_or(0);
    if let Some(t) = timings.as_deref_mut() {
        t.clear();
        t.resize(layers.len(), Duration::ZERO);
    }

    for k in (0..layers.len()).rev() {
        let start = Instant::now();
        let propagate = opts.input_delta || k > first_conv;
        match &layers[k] {
            PlanLayer::Conv(conv) => {
                let wide = DilatedConv::new(conv.base.cast(), conv.dilation);
                let x_in = cache.inputs[k].cast();
                *gradients.layer_mut(k).unwrap() = conv_backward_kernel_with(&x_in, &delta, &wide, opts.mode)?;
                if propagate {
                    delta = conv_backward_data_with(&delta, &wide, opts.mode)?;
                }
            }
            PlanLayer::Pool(pool) if propagate => {
                delta = match pool.base.kind {
                    PoolKind::Max => {
                        let arg = cache.argmax[k].as_ref().ok_or_else(|| {
                            Error::InvalidSpec(format!("no argmax record for layer {}", k + 1))
                        })?;
                        maxpool_backward_with(&delta, arg, pool, opts.mode)?
                    }
                    PoolKind::Average => avgpool_backward_with(&delta, pool, opts.mode)?,
                };
            }
            PlanLayer::Nonlin(n) if propagate => {
                delta = nonlin_backward(&delta, &cache.inputs[k].cast(), n.kind)?;
            }
            _ => {}
        }
        if let Some(t) = timings.as_deref_mut() {
            t[k] = start.elapsed();
        }
        if !propagate {
            break;
        }
    }

    let input_delta = if opts.input_delta {
        let (lead, _) = plan.padding();
        Some(delta.crop(lead, lead, cache.output.height(), cache.output.width())?.cast())
    } else {
        None
    };
    Ok(BackwardOutput {
        gradients: gradients.cast(),
        input_delta,
    })
}

/// Keeps the errors of selected pixels (all channels) and zeroes the rest.
pub fn apply_mask<T: Scalar>(delta: &FeatureMap<T>, mask: &ErrorMask) -> Result<FeatureMap<T>> {
    if delta.height() != mask.height || delta.width() != mask.width {
        return Err(Error::Mask(format!(
            "{}x{} mask for a {}x{} error map",
            mask.height,
            mask.width,
            delta.height(),
            delta.width()
        )));
    }
    let mut out = delta.clone();
    for c in 0..out.channels() {
        out.channel_mut(c)
            .iter_mut()
            .zip(&mask.selected)
            .filter(|(_, &keep)| !keep)
            .for_each(|(v, _)| *v = T::zero());
    }
    Ok(out)
}

/// Per-pixel squared-error gradient: `prediction - target`.
pub fn squared_error_delta<T: Scalar>(
    prediction: &FeatureMap<T>,
    target: &FeatureMap<T>,
) -> Result<FeatureMap<T>> {
    if prediction.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            left: prediction.shape(),
            right: target.shape(),
        });
    }
    let data = prediction
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| p - t)
        .collect();
    FeatureMap::from_vec(prediction.shape(), data)
}

fn input_shape_for(delta_out: &FeatureMap<impl Scalar>, channels: usize, extent: usize) -> Result<Shape> {
    Shape::new(
        channels,
        delta_out.height() + extent - 1,
        delta_out.width() + extent - 1,
    )
}

pub fn conv_backward_data<T: Scalar>(delta_out: &FeatureMap<T>, layer: &DilatedConv<T>) -> Result<FeatureMap<T>> {
    conv_backward_data_with(delta_out, layer, ExecMode::Serial)
}

/// Error with respect to the layer input. Equivalent to correlating the
/// zero-padded output error with the 180-degree rotated dilated kernel;
/// computed here by scattering each output error through the kernel taps.
pub fn conv_backward_data_with<T: Scalar>(
    delta_out: &FeatureMap<T>,
    layer: &DilatedConv<T>,
    mode: ExecMode,
) -> Result<FeatureMap<T>> {
    let base = &layer.base;
    if delta_out.channels() != base.out_channels {
        return Err(Error::ChannelMismatch {
            expected: base.out_channels,
            found: delta_out.channels(),
        });
    }
    let shape = input_shape_for(delta_out, base.in_channels, layer.extent())?;
    let (oh, ow, width, k) = (delta_out.height(), delta_out.width(), shape.width, base.kernel_size);
    let n_out = base.out_channels;
    let mut out = vec![T::zero(); shape.len()];
    for_each_chunk(&mut out, shape.plane(), mode, |c, dst| {
        for u0 in (0..oh).step_by(ROW_TILE) {
            let rows = u0..(u0 + ROW_TILE).min(oh);
            for o0 in (0..n_out).step_by(CHANNEL_BLOCK) {
                let block = CHANNEL_BLOCK.min(n_out - o0);
                for i in 0..k {
                    for j in 0..k {
                        let (dy, dx) = layer.tap_offset(i, j);
                        for u in rows.clone() {
                            let d = &mut dst[(u + dy) * width + dx..][..ow];
                            let src = |b: usize| &delta_out.channel(o0 + b)[u * ow..][..ow];
                            let w = |b: usize| base.weight(o0 + b, c, i, j);
                            if block == CHANNEL_BLOCK {
                                let (w0, w1, w2, w3) = (w(0), w(1), w(2), w(3));
                                let rows = src(0).iter().zip(src(1)).zip(src(2)).zip(src(3));
                                for (acc, (((&e0, &e1), &e2), &e3)) in d.iter_mut().zip(rows) {
                                    *acc += w0 * e0 + w1 * e1 + w2 * e2 + w3 * e3;
                                }
                            } else {
                                for b in 0..block {
                                    let wb = w(b);
                                    for (acc, &e) in d.iter_mut().zip(src(b)) {
                                        *acc += wb * e;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(FeatureMap::from_parts(shape, out))
}

pub fn conv_backward_kernel<T: Scalar>(
    x_in: &FeatureMap<T>,
    delta_out: &FeatureMap<T>,
    layer: &DilatedConv<T>,
) -> Result<ConvGradient<T>> {
    conv_backward_kernel_with(x_in, delta_out, layer, ExecMode::Serial)
}

/// `grad[o, c, i, j] = sum_{u,v} delta[o, u, v] * x[c, u + i*d, v + j*d]` and
/// `bias_grad[o] = sum_{u,v} delta[o, u, v]`.
pub fn conv_backward_kernel_with<T: Scalar>(
    x_in: &FeatureMap<T>,
    delta_out: &FeatureMap<T>,
    layer: &DilatedConv<T>,
    mode: ExecMode,
) -> Result<ConvGradient<T>> {
    let base = &layer.base;
    if x_in.channels() != base.in_channels {
        return Err(Error::ChannelMismatch {
            expected: base.in_channels,
            found: x_in.channels(),
        });
    }
    let (oh, ow) = crate::fwd::out_dims(x_in, layer.extent())?;
    let expected = Shape::new(base.out_channels, oh, ow)?;
    if delta_out.shape() != expected {
        return Err(Error::ShapeMismatch {
            left: expected,
            right: delta_out.shape(),
        });
    }
    let (width, k) = (x_in.width(), base.kernel_size);
    let mut grad = ConvGradient::zeros(base.out_channels, base.in_channels, k);
    let per_out = base.in_channels * k * k;
    for_each_chunk(&mut grad.kernel, CHANNEL_BLOCK * per_out, mode, |blk, g| {
        let o0 = blk * CHANNEL_BLOCK;
        let block = g.len() / per_out;
        let mut sums = vec![[T::zero(); CHANNEL_BLOCK]; k * k];
        for c in 0..base.in_channels {
            let src = x_in.channel(c);
            sums.iter_mut().for_each(|s| *s = [T::zero(); CHANNEL_BLOCK]);
            for u0 in (0..oh).step_by(ROW_TILE) {
                for (tap, sum) in sums.iter_mut().enumerate() {
                    let (dy, dx) = layer.tap_offset(tap / k, tap % k);
                    for u in u0..(u0 + ROW_TILE).min(oh) {
                        let xr = &src[(u + dy) * width + dx..][..ow];
                        let err = |b: usize| &delta_out.channel(o0 + b)[u * ow..][..ow];
                        if block == CHANNEL_BLOCK {
                            let d = dot4(xr, [err(0), err(1), err(2), err(3)]);
                            for b in 0..CHANNEL_BLOCK {
                                sum[b] += d[b];
                            }
                        } else {
                            for b in 0..block {
                                sum[b] += dot(err(b), xr);
                            }
                        }
                    }
                }
            }
            for (tap, sum) in sums.iter().enumerate() {
                for b in 0..block {
                    g[b * per_out + c * k * k + tap] = sum[b];
                }
            }
        }
    });
    for (o, b) in grad.bias.iter_mut().enumerate() {
        *b = lane_sum(delta_out.channel(o));
    }
    Ok(grad)
}

pub fn maxpool_backward<T: Scalar>(
    delta_out: &FeatureMap<T>,
    argmax: &ArgmaxMap,
    layer: &DilatedPool,
) -> Result<FeatureMap<T>> {
    maxpool_backward_with(delta_out, argmax, layer, ExecMode::Serial)
}

/// Adds each output error at the input position its max came from.
/// Stride-1 windows overlap, so one input may collect several errors.
pub fn maxpool_backward_with<T: Scalar>(
    delta_out: &FeatureMap<T>,
    argmax: &ArgmaxMap,
    layer: &DilatedPool,
    mode: ExecMode,
) -> Result<FeatureMap<T>> {
    if argmax.shape() != delta_out.shape() {
        return Err(Error::ShapeMismatch {
            left: argmax.shape(),
            right: delta_out.shape(),
        });
    }
    if argmax.kernel_size() != layer.base.kernel_size {
        return Err(Error::InvalidSpec("argmax record belongs to a different pooling layer".into()));
    }
    let shape = input_shape_for(delta_out, delta_out.channels(), layer.extent())?;
    let (oh, ow, width) = (delta_out.height(), delta_out.width(), shape.width);
    let (p, d) = (layer.base.kernel_size, layer.dilation);
    let plane_out = oh * ow;
    let mut out = vec![T::zero(); shape.len()];
    let body = |c: usize, dst: &mut [T]| {
        let err = delta_out.channel(c);
        let taps = &argmax.taps()[c * plane_out..][..plane_out];
        for u in 0..oh {
            for v in 0..ow {
                let t = taps[u * ow + v] as usize;
                let (i, j) = (t / p, t % p);
                dst[(u + i * d) * width + v + j * d] += err[u * ow + v];
            }
        }
    };
    match mode {
        ExecMode::Serial => out
            .chunks_mut(shape.plane())
            .enumerate()
            .for_each(|(c, dst)| body(c, dst)),
        ExecMode::Parallel => out
            .par_chunks_mut(shape.plane())
            .enumerate()
            .for_each(|(c, dst)| body(c, dst)),
    }
    Ok(FeatureMap::from_parts(shape, out))
}

pub fn avgpool_backward<T: Scalar>(delta_out: &FeatureMap<T>, layer: &DilatedPool) -> Result<FeatureMap<T>> {
    avgpool_backward_with(delta_out, layer, ExecMode::Serial)
}

/// Spreads `delta / p^2` from each output onto its `p^2` window taps.
pub fn avgpool_backward_with<T: Scalar>(
    delta_out: &FeatureMap<T>,
    layer: &DilatedPool,
    mode: ExecMode,
) -> Result<FeatureMap<T>> {
    let shape = input_shape_for(delta_out, delta_out.channels(), layer.extent())?;
    let (oh, ow, width) = (delta_out.height(), delta_out.width(), shape.width);
    let (p, d) = (layer.base.kernel_size, layer.dilation);
    let count = T::from_usize(layer.taps());
    let mut out = vec![T::zero(); shape.len()];
    for_each_chunk(&mut out, shape.plane(), mode, |c, dst| {
        let share: Vec<T> = delta_out.channel(c).iter().map(|&e| e / count).collect();
        for i in 0..p {
            for j in 0..p {
                for u in 0..oh {
                    let t = &mut dst[(u + i * d) * width + j * d..][..ow];
                    for (acc, &s) in t.iter_mut().zip(&share[u * ow..][..ow]) {
                        *acc += s;
                    }
                }
            }
        }
    });
    Ok(FeatureMap::from_parts(shape, out))
}

/// `delta_out * f'(x_in)`, entrywise.
pub fn nonlin_backward<T: Scalar>(
    delta_out: &FeatureMap<T>,
    x_in: &FeatureMap<T>,
    kind: NonlinKind,
) -> Result<FeatureMap<T>> {
    if delta_out.shape() != x_in.shape() {
        return Err(Error::ShapeMismatch {
            left: x_in.shape(),
            right: delta_out.shape(),
        });
    }
    if kind == NonlinKind::Identity {
        return Ok(delta_out.clone());
    }
    let data = delta_out
        .data()
        .iter()
        .zip(x_in.data())
        .map(|(&e, &x)| e * kind.derivative(x))
        .collect();
    FeatureMap::from_vec(x_in.shape(), data)
}

const LANES: usize = 8;
/// Output channels handled together by the conv gradient kernels.
const CHANNEL_BLOCK: usize = 4;
/// Output rows per tile, so a tile's rows stay in cache across kernel taps.
const ROW_TILE: usize = 16;
/// Lanes per accumulator in [`dot4`]; four of them must fit in registers.
const BLOCK_LANES: usize = 4;

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: T = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(&x, &y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

/// Four dot products sharing the left operand.
#[inline]
fn dot4<T: Scalar>(a: &[T], b: [&[T]; CHANNEL_BLOCK]) -> [T; CHANNEL_BLOCK] {
    let mut acc = [[T::zero(); BLOCK_LANES]; CHANNEL_BLOCK];
    let n = a.len() / BLOCK_LANES * BLOCK_LANES;
    for base in (0..n).step_by(BLOCK_LANES) {
        let x = &a[base..base + BLOCK_LANES];
        for (acc, row) in acc.iter_mut().zip(&b) {
            let y = &row[base..base + BLOCK_LANES];
            for l in 0..BLOCK_LANES {
                acc[l] += x[l] * y[l];
            }
        }
    }
    let mut out = [T::zero(); CHANNEL_BLOCK];
    for (o, (acc, row)) in out.iter_mut().zip(acc.iter().zip(&b)) {
        let tail: T = a[n..].iter().zip(&row[n..]).map(|(&x, &y)| x * y).sum();
        *o = acc.iter().fold(tail, |s, &v| s + v);
    }
    out
}

#[inline]
fn lane_sum<T: Scalar>(a: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = a.chunks_exact(LANES);
    let tail: T = chunks.remainder().iter().copied().sum();
    for x in chunks {
        for l in 0..LANES {
            acc[l] += x[l];
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dilate::materialize_dilated_kernel;
    use crate::fwd::{dilated_avgpool_forward, dilated_conv_forward, dilated_maxpool_forward};
    use crate::netspec::{ConvLayerSpec, PoolLayerSpec, WeightSource};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(shape: Shape, seed: u64) -> FeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    fn sh(c: usize, h: usize, w: usize) -> Shape {
        Shape::new(c, h, w).unwrap()
    }

    fn pool(kind: PoolKind, p: usize, d: usize) -> DilatedPool {
        DilatedPool::new(PoolLayerSpec { kind, kernel_size: p, stride: p }, d)
    }

    /// `<g, f(x)>` for a linear probe `g`, as a function of `x`.
    fn probe(y: &FeatureMap<f64>, g: &FeatureMap<f64>) -> f64 {
        y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
    }

    /// Central-difference directional check of a map's input gradient.
    fn fd_input_grad(
        x: &FeatureMap<f64>,
        g: &FeatureMap<f64>,
        f: impl Fn(&FeatureMap<f64>) -> FeatureMap<f64>,
    ) -> FeatureMap<f64> {
        let h = 1e-5;
        let mut out = x.clone();
        for idx in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            out.data_mut()[idx] = (probe(&f(&xp), g) - probe(&f(&xm), g)) / (2.0 * h);
        }
        out
    }

    #[test]
    fn mask_construction() {
        assert!(ErrorMask::from_pixels(3, 3, &[(3, 0)]).is_err());
        let m = ErrorMask::from_pixels(3, 4, &[(2, 3), (0, 1), (2, 3)]).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.pixels(), [(0, 1), (2, 3)]);
        assert!(ErrorMask::empty(2, 2).is_empty());
        assert_eq!(ErrorMask::all(2, 3).len(), 6);
    }

    #[test]
    fn apply_mask_cases() {
        let d = random_map(sh(3, 4, 5), 1);
        assert_eq!(apply_mask(&d, &ErrorMask::all(4, 5)).unwrap(), d);
        let z = apply_mask(&d, &ErrorMask::empty(4, 5)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let one = apply_mask(&d, &ErrorMask::from_pixels(4, 5, &[(0, 0)]).unwrap()).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    let expect = if (y, x) == (0, 0) { d.get(c, 0, 0) } else { 0.0 };
                    assert_eq!(one.get(c, y, x), expect);
                }
            }
        }
        assert!(apply_mask(&d, &ErrorMask::all(5, 4)).is_err());
    }

    #[test]
    fn unit_kernel_data_gradient_scales() {
        let base = ConvLayerSpec::with_weights(1, 1, 1, 1, vec![-0.75], vec![0.1], WeightSource::Seed(0)).unwrap();
        let conv = DilatedConv::new(base, 4);
        let d = random_map(sh(1, 5, 6), 2);
        let din = conv_backward_data(&d, &conv).unwrap();
        assert_eq!(din, d.map(|v| -0.75 * v));
    }

    #[test]
    fn single_error_hits_four_inputs() {
        let base = ConvLayerSpec::with_weights(
            1, 1, 2, 1, vec![1.0, 2.0, 3.0, 4.0], vec![0.0], WeightSource::Seed(0),
        )
        .unwrap();
        let conv = DilatedConv::new(base, 1);
        let mut d = FeatureMap::zeros(sh(1, 3, 3)).unwrap();
        d.set(0, 1, 1, 1.0);
        let din = conv_backward_data(&d, &conv).unwrap();
        assert_eq!(din.data().iter().filter(|&&v| v != 0.0).count(), 4);
        // output (1,1) reads inputs (1+i, 1+j) with weight W[i][j]
        assert_eq!(din.get(0, 1, 1), 1.0);
        assert_eq!(din.get(0, 1, 2), 2.0);
        assert_eq!(din.get(0, 2, 1), 3.0);
        assert_eq!(din.get(0, 2, 2), 4.0);
    }

    #[test]
    fn data_gradient_equals_rotated_kernel_correlation() {
        let conv = DilatedConv::new(ConvLayerSpec::<f64>::seeded(2, 3, 3, 1, 5).unwrap(), 2);
        let e = conv.extent();
        let d = random_map(sh(2, 4, 5), 6);
        let din = conv_backward_data(&d, &conv).unwrap();
        let dense = conv.materialized();
        let padded = d.pad(e - 1, 0.0);
        for c in 0..3 {
            for y in 0..din.height() {
                for x in 0..din.width() {
                    let mut acc = 0.0;
                    for o in 0..2 {
                        let plane = &dense[(o * 3 + c) * e * e..][..e * e];
                        for a in 0..e {
                            for b in 0..e {
                                let rot = plane[(e - 1 - a) * e + (e - 1 - b)];
                                acc += rot * padded.get(o, y + a, x + b);
                            }
                        }
                    }
                    assert!((din.get(c, y, x) - acc).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn data_gradient_matches_finite_differences() {
        let conv = DilatedConv::new(ConvLayerSpec::<f64>::seeded(2, 2, 2, 1, 9).unwrap(), 3);
        let x = random_map(sh(2, 7, 6), 10);
        let y = dilated_conv_forward(&x, &conv).unwrap();
        let g = random_map(y.shape(), 11);
        let analytic = conv_backward_data(&g, &conv).unwrap();
        let numeric = fd_input_grad(&x, &g, |x| dilated_conv_forward(x, &conv).unwrap());
        assert!(analytic.max_abs_diff(&numeric).unwrap() < 1e-8);
    }

    #[test]
    fn kernel_gradient_of_zero_error() {
        let conv = DilatedConv::new(ConvLayerSpec::<f64>::seeded(2, 2, 2, 1, 9).unwrap(), 2);
        let x = random_map(sh(2, 6, 6), 1);
        let d = FeatureMap::zeros(sh(2, 4, 4)).unwrap();
        let g = conv_backward_kernel(&x, &d, &conv).unwrap();
        assert!(g.kernel.iter().chain(&g.bias).all(|&v| v == 0.0));
    }

    #[test]
    fn kernel_gradient_counts_outputs() {
        for d in [1, 2, 3] {
            let conv = DilatedConv::new(ConvLayerSpec::<f64>::seeded(2, 3, 2, 1, 9).unwrap(), d);
            let x = FeatureMap::filled(sh(3, 9, 10), 1.0).unwrap();
            let (oh, ow) = (9 - d, 10 - d);
            let delta = FeatureMap::filled(sh(2, oh, ow), 1.0).unwrap();
            let g = conv_backward_kernel(&x, &delta, &conv).unwrap();
            let n = (oh * ow) as f64;
            assert!(g.kernel.iter().chain(&g.bias).all(|&v| v == n));
        }
    }

    #[test]
    fn kernel_gradient_matches_finite_differences() {
        let base = ConvLayerSpec::<f64>::seeded(2, 2, 3, 1, 12).unwrap();
        let conv = DilatedConv::new(base.clone(), 2);
        let x = random_map(sh(2, 8, 9), 13);
        let y = dilated_conv_forward(&x, &conv).unwrap();
        let g = random_map(y.shape(), 14);
        let analytic = conv_backward_kernel(&x, &g, &conv).unwrap();
        let h = 1e-5;
        let loss = |c: &DilatedConv<f64>| probe(&dilated_conv_forward(&x, c).unwrap(), &g);
        for idx in 0..base.weights.len() + base.bias.len() {
            let bump = |delta: f64| {
                let mut c = conv.clone();
                if idx < base.weights.len() {
                    c.base.weights[idx] += delta;
                } else {
                    c.base.bias[idx - base.weights.len()] += delta;
                }
                loss(&c)
            };
            let numeric = (bump(h) - bump(-h)) / (2.0 * h);
            let a = if idx < base.weights.len() {
                analytic.kernel[idx]
            } else {
                analytic.bias[idx - base.weights.len()]
            };
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-4, "entry {idx}: {a} vs {numeric}");
        }
    }

    #[test]
    fn kernel_gradient_equals_dilated_error_correlation() {
        // grad W = x correlated with the error map spread by d, read at the
        // original taps
        let conv = DilatedConv::new(ConvLayerSpec::<f64>::seeded(1, 1, 3, 1, 2).unwrap(), 2);
        let x = random_map(sh(1, 9, 9), 3);
        let d = random_map(sh(1, 5, 5), 4);
        let g = conv_backward_kernel(&x, &d, &conv).unwrap();
        let spread = materialize_dilated_kernel(d.data(), 5, 1);
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for u in 0..5 {
                    for v in 0..5 {
                        acc += spread[u * 5 + v] * x.get(0, u + 2 * i, v + 2 * j);
                    }
                }
                assert!((g.kernel[i * 3 + j] - acc).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn maxpool_overlap_accumulates() {
        let layer = pool(PoolKind::Max, 2, 1);
        let x = FeatureMap::filled(sh(1, 4, 4), 1.0f64).unwrap();
        let (_, arg) = dilated_maxpool_forward(&x, &layer).unwrap();
        assert!(arg.taps().iter().all(|&t| t == 0));
        let d = FeatureMap::filled(sh(1, 3, 3), 1.0).unwrap();
        let din = maxpool_backward(&d, &arg, &layer).unwrap();
        assert_eq!(din.shape(), sh(1, 4, 4));
        for y in 0..4 {
            for x in 0..4 {
                let expect = if y < 3 && x < 3 { 1.0 } else { 0.0 };
                assert_eq!(din.get(0, y, x), expect);
            }
        }
        // a single strong input collects the errors of every window holding it
        let mut x = FeatureMap::zeros(sh(1, 4, 4)).unwrap();
        x.set(0, 1, 1, 5.0);
        let (_, arg) = dilated_maxpool_forward(&x, &layer).unwrap();
        let din = maxpool_backward(&d, &arg, &layer).unwrap();
        assert_eq!(din.get(0, 1, 1), 4.0);
    }

    #[test]
    fn maxpool_zero_error() {
        let layer = pool(PoolKind::Max, 3, 2);
        let x = random_map(sh(2, 9, 9), 5);
        let (y, arg) = dilated_maxpool_forward(&x, &layer).unwrap();
        let din: FeatureMap<f64> = maxpool_backward(&FeatureMap::zeros(y.shape()).unwrap(), &arg, &layer).unwrap();
        assert!(din.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maxpool_matches_finite_differences() {
        let layer = pool(PoolKind::Max, 2, 2);
        // distinct values spaced far apart relative to the step
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut vals: Vec<f64> = (0..2 * 8 * 8).map(|i| i as f64 * 0.01).collect();
        use rand::seq::SliceRandom;
        vals.shuffle(&mut rng);
        let x = FeatureMap::from_vec(sh(2, 8, 8), vals).unwrap();
        let (y, arg) = dilated_maxpool_forward(&x, &layer).unwrap();
        let g = random_map(y.shape(), 7);
        let analytic = maxpool_backward(&g, &arg, &layer).unwrap();
        let numeric = fd_input_grad(&x, &g, |x| dilated_maxpool_forward(x, &layer).unwrap().0);
        assert!(analytic.max_abs_diff(&numeric).unwrap() < 1e-8);
    }

    #[test]
    fn avgpool_backward_cases() {
        let one = pool(PoolKind::Average, 1, 3);
        let d = random_map(sh(2, 3, 3), 1);
        assert_eq!(avgpool_backward(&d, &one).unwrap(), d);

        let two = pool(PoolKind::Average, 2, 1);
        let d = FeatureMap::filled(sh(1, 1, 1), 1.0f64).unwrap();
        assert_eq!(avgpool_backward(&d, &two).unwrap().data(), [0.25; 4]);

        let layer = pool(PoolKind::Average, 3, 2);
        let x = random_map(sh(2, 9, 8), 8);
        let y = dilated_avgpool_forward(&x, &layer).unwrap();
        let g = random_map(y.shape(), 9);
        let analytic = avgpool_backward(&g, &layer).unwrap();
        let numeric = fd_input_grad(&x, &g, |x| dilated_avgpool_forward(x, &layer).unwrap());
        assert!(analytic.max_abs_diff(&numeric).unwrap() < 1e-8);
    }

    #[test]
    fn nonlin_backward_cases() {
        let d = random_map(sh(2, 3, 3), 1);
        let x = random_map(sh(2, 3, 3), 2);
        assert_eq!(nonlin_backward(&d, &x, NonlinKind::Identity).unwrap(), d);
        let zeros = FeatureMap::zeros(d.shape()).unwrap();
        assert_eq!(nonlin_backward(&d, &zeros, NonlinKind::Tanh).unwrap(), d);
        // relu'(0) = 0
        assert_eq!(nonlin_backward(&d, &zeros, NonlinKind::Relu).unwrap(), zeros);
        for kind in [NonlinKind::Tanh, NonlinKind::Relu] {
            let g = random_map(x.shape(), 3);
            let analytic = nonlin_backward(&g, &x, kind).unwrap();
            let numeric = fd_input_grad(&x, &g, |x| crate::fwd::nonlin_forward(x, kind));
            assert!(analytic.max_abs_diff(&numeric).unwrap() < 1e-8);
        }
        assert!(nonlin_backward(&d, &random_map(sh(1, 3, 3), 0), NonlinKind::Tanh).is_err());
    }

    #[test]
    fn lane_helpers_match_naive() {
        for n in [0, 1, 7, 8, 9, 31] {
            let a: Vec<f64> = (0..n).map(|i| i as f64 * 0.5 - 3.0).collect();
            let b: Vec<f64> = (0..n).map(|i| 1.0 / (i as f64 + 1.0)).collect();
            let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            assert!((dot(&a, &b) - naive).abs() < 1e-12);
            assert!((lane_sum(&a) - a.iter().sum::<f64>()).abs() < 1e-12);
            let d = dot4(&a, [&b, &a, &b, &a]);
            assert!((d[0] - naive).abs() < 1e-12 && (d[2] - naive).abs() < 1e-12);
            assert!((d[1] - a.iter().map(|x| x * x).sum::<f64>()).abs() < 1e-12);
        }
    }
}
