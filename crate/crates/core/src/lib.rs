//! Extreme multilabel classification with one-vs-all linear classifiers
//! trained against sampled label slates.
//!
//! The training loop mixes stale hard negatives, retrieved from an
//! inner-product index built over the classifier vectors themselves, with
//! uniformly drawn random negatives that are importance-weighted so the
//! sampled BCE loss stays an unbiased estimate of the full loss.
//!
//! Module map:
//!
//! - [`dataset`]: XC-format parsing, binary cache, label subsets, synthetic data.
//! - [`encoder`]: sparse-input embedding map with exact gradients.
//! - [`classifier`]: the bank of per-label classifier vectors.
//! - [`loss`]: full BCE, the sampled estimator and its gradients.
//! - [`anns`]: exact and graph-based inner-product top-k, negative caches,
//!   staged background refresh.
//! - [`sampler`]: per-query slate assembly for every negative strategy.
//! - [`trainer`]: the epoch loop, optimizers, checkpoints and logs.
//! - [`eval`]: ranking metrics, propensities and top-k prediction.

// Numeric loops often index several parallel arrays with one counter.
#![allow(clippy::needless_range_loop)]

pub mod anns;
pub mod classifier;
pub mod dataset;
pub mod encoder;
mod error;
pub mod eval;
pub mod linalg;
pub mod loss;
pub mod rng;
pub mod sampler;
pub mod trainer;

pub use anns::{AnnsIndex, IndexKind, IndexParams, NegativeCache, RefreshSchedule, Stage};
pub use classifier::{ClassifierBank, ScoredLabels};
pub use dataset::{DatasetStats, SparseDataset, SparseVector};
pub use encoder::{EncoderParams, EncoderShape, InitScheme};
pub use error::{Error, Result};
pub use eval::{MetricsReport, PropensityModel};
pub use loss::{LossBreakdown, SlateGradients};
pub use sampler::{LabelSlate, SamplerStrategy, SlotKind};
pub use trainer::{TrainConfig, TrainLog, TrainedModel};

/// Floating point type usable for parameters: `f32` in training, `f64` on
/// verification paths.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f32_exact(v: f32) -> Self;
    fn from_f64_lossy(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;

    /// `C <- alpha * A B + beta * C` on strided storage.
    ///
    /// # Safety
    /// The strides must keep every addressed element of `a` (m x k), `b`
    /// (k x n) and `c` (m x n) inside its slice.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );
}

impl Scalar for f32 {
    #[inline]
    fn from_f32_exact(v: f32) -> Self {
        v
    }
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        (rsa, csa): (isize, isize),
        b: &[Self],
        (rsb, csb): (isize, isize),
        beta: Self,
        c: &mut [Self],
        (rsc, csc): (isize, isize),
    ) {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        )
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f32_exact(v: f32) -> Self {
        v as f64
    }
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        (rsa, csa): (isize, isize),
        b: &[Self],
        (rsb, csb): (isize, isize),
        beta: Self,
        c: &mut [Self],
        (rsc, csc): (isize, isize),
    ) {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        )
    }
}
