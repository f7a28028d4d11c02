//! Dense whole-image forward and backward propagation for CNNs trained as
//! patchwise pixel classifiers.
//!
//! A patchwise network maps an `n x n` patch to one score vector. Running it
//! on every pixel of an image repeats most of the work, because neighbouring
//! patches overlap. [`dilate::compile`] rewrites the network so that every
//! layer runs with stride 1 on the whole padded image, with kernels spread
//! out by the product of the strides that precede them. [`fwd::dense_forward`]
//! then yields the score of every pixel in one pass, and
//! [`bwd::dense_backward`] produces the summed parameter gradients of any
//! subset of pixels in one pass.
//!
//! [`oracle`] holds the straightforward patch-by-patch implementation that the
//! dense engine is checked against, and [`bench`] times both.

pub mod bench;
pub mod bwd;
pub mod dilate;
mod error;
pub mod fwd;
pub mod netspec;
pub mod oracle;
pub mod presets;
mod scalar;
pub mod tensor;

pub use bwd::{dense_backward, ErrorMask, GradientSet};
pub use dilate::{compile, DensePlan};
pub use error::{Error, Result};
pub use fwd::{dense_forward, ForwardCache};
pub use netspec::{parse_spec, NetworkSpec};
pub use scalar::Scalar;
pub use tensor::{FeatureMap, Shape};

use rayon::prelude::*;

/// How the engine distributes per-channel work.
///
/// Both modes produce bit-identical results: work is split across channels,
/// never inside a summation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ExecMode {
    #[default]
    Serial,
    /// Channels are processed on the current rayon pool.
    Parallel,
}

/// Runs `f(index, chunk)` over consecutive `chunk_len` slices of `data`.
pub(crate) fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, mode: ExecMode, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    match mode {
        ExecMode::Serial => data
            .chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c)),
        ExecMode::Parallel => data
            .par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c)),
    }
}
