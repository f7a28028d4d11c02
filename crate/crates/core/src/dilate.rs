//! Compiles a strided patchwise network into a stride-1 whole-image plan.
//!
//! Walking the layers in order with a running factor `d` (initially 1),
//! each conv or pool kernel is spread out so neighbouring taps sit `d`
//! pixels apart, its stride becomes 1, and `d` is multiplied by the layer's
//! original stride. Spread kernels are never stored with their zeros: a
//! [`DilatedConv`] keeps the original kernel and reads its input at offsets
//! `(i * d, j * d)`, so tap `(i, j)` of the dilated kernel is tap `(i, j)` of
//! the original and gradients land directly in original-kernel coordinates.

use crate::error::Result;
use crate::netspec::{ConvLayerSpec, LayerSpec, NetworkSpec, NonlinLayerSpec, PoolLayerSpec};
use crate::Scalar;

/// Span of a kernel with `kernel_size` taps spaced `dilation` apart.
pub fn effective_extent(kernel_size: usize, dilation: usize) -> usize {
    (kernel_size - 1) * dilation + 1
}

/// Writes a `k x k` kernel plane into an `extent x extent` array with the
/// original taps at `(i * d, j * d)` and zeros elsewhere.
pub fn materialize_dilated_kernel<T: Scalar>(base: &[T], kernel_size: usize, dilation: usize) -> Vec<T> {
    assert_eq!(base.len(), kernel_size * kernel_size);
    let e = effective_extent(kernel_size, dilation);
    let mut out = vec![T::zero(); e * e];
    for i in 0..kernel_size {
        for j in 0..kernel_size {
            out[i * dilation * e + j * dilation] = base[i * kernel_size + j];
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct DilatedConv<T> {
    pub base: ConvLayerSpec<T>,
    pub dilation: usize,
}

impl<T: Scalar> DilatedConv<T> {
    pub fn new(base: ConvLayerSpec<T>, dilation: usize) -> Self {
        assert!(dilation >= 1);
        DilatedConv { base, dilation }
    }

    pub fn extent(&self) -> usize {
        effective_extent(self.base.kernel_size, self.dilation)
    }

    /// Input offset read by original tap `(i, j)`.
    #[inline]
    pub fn tap_offset(&self, i: usize, j: usize) -> (usize, usize) {
        (i * self.dilation, j * self.dilation)
    }

    /// The full zero-inserted kernel, `[out][in][extent][extent]`.
    pub fn materialized(&self) -> Vec<T> {
        let k = self.base.kernel_size;
        self.base
            .weights
            .chunks(k * k)
            .flat_map(|plane| materialize_dilated_kernel(plane, k, self.dilation))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DilatedPool {
    pub base: PoolLayerSpec,
    pub dilation: usize,
}

impl DilatedPool {
    pub fn new(base: PoolLayerSpec, dilation: usize) -> Self {
        assert!(dilation >= 1);
        DilatedPool { base, dilation }
    }

    pub fn extent(&self) -> usize {
        effective_extent(self.base.kernel_size, self.dilation)
    }

    /// Window count, the divisor of average pooling.
    pub fn taps(&self) -> usize {
        self.base.kernel_size * self.base.kernel_size
    }

    /// The binary pooling mask spread to `extent x extent`.
    pub fn mask(&self) -> Vec<bool> {
        let ones = vec![1.0f64; self.taps()];
        materialize_dilated_kernel(&ones, self.base.kernel_size, self.dilation)
            .into_iter()
            .map(|v| v != 0.0)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PlanLayer<T> {
    Conv(DilatedConv<T>),
    Pool(DilatedPool),
    Nonlin(NonlinLayerSpec),
}

impl<T: Scalar> PlanLayer<T> {
    pub fn extent(&self) -> usize {
        match self {
            PlanLayer::Conv(c) => c.extent(),
            PlanLayer::Pool(p) => p.extent(),
            PlanLayer::Nonlin(_) => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensePlan<T> {
    layers: Vec<PlanLayer<T>>,
    dilations: Vec<usize>,
    patch_size: usize,
    padding: (usize, usize),
    names: Vec<String>,
    source: NetworkSpec<T>,
}

/// Builds the stride-1 plan for `spec`.
pub fn compile<T: Scalar>(spec: &NetworkSpec<T>) -> Result<DensePlan<T>> {
    spec.validate()?;
    let mut d = 1usize;
    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut dilations = Vec::with_capacity(spec.layers.len());
    for layer in &spec.layers {
        dilations.push(d);
        layers.push(match layer {
            LayerSpec::Conv(c) => PlanLayer::Conv(DilatedConv::new(c.clone(), d)),
            LayerSpec::Pool(p) => PlanLayer::Pool(DilatedPool::new(*p, d)),
            LayerSpec::Nonlin(n) => PlanLayer::Nonlin(*n),
        });
        d *= layer.stride();
    }
    Ok(DensePlan {
        layers,
        dilations,
        patch_size: spec.patch_size()?,
        padding: spec.padding()?,
        names: spec.layer_names(),
        source: spec.clone(),
    })
}

impl<T: Scalar> DensePlan<T> {
    pub fn layers(&self) -> &[PlanLayer<T>] {
        &self.layers
    }

    /// Dilation of every layer, including pointwise ones.
    pub fn dilations(&self) -> &[usize] {
        &self.dilations
    }

    /// Dilations of the conv and pool layers only.
    pub fn window_dilations(&self) -> Vec<usize> {
        self.layers
            .iter()
            .zip(&self.dilations)
            .filter(|(l, _)| !matches!(l, PlanLayer::Nonlin(_)))
            .map(|(_, &d)| d)
            .collect()
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn padding_margin(&self) -> usize {
        self.padding.0
    }

    /// Leading and trailing image padding.
    pub fn padding(&self) -> (usize, usize) {
        self.padding
    }

    pub fn layer_names(&self) -> &[String] {
        &self.names
    }

    pub fn source(&self) -> &NetworkSpec<T> {
        &self.source
    }

    pub fn input_channels(&self) -> usize {
        self.source.input_channels
    }

    pub fn output_channels(&self) -> usize {
        self.source.output_channels()
    }

    /// Spatial size of every layer input for an `h x w` image, starting with
    /// the padded image and ending with the output.
    pub fn size_chain(&self, height: usize, width: usize) -> Vec<(usize, usize)> {
        let (lead, trail) = self.padding;
        let mut size = (height + lead + trail, width + lead + trail);
        let mut chain = vec![size];
        for layer in &self.layers {
            let shrink = layer.extent() - 1;
            size = (size.0 - shrink, size.1 - shrink);
            chain.push(size);
        }
        chain
    }
}
