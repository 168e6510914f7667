//! One-vs-all classifier vectors, stored one row per label.

use std::collections::BTreeMap;

use rand::Rng;

use crate::encoder::InitScheme;
use crate::linalg::{dot, matmul, DenseMatrix};
use crate::rng::{rng_for, stream};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierBank<T = f32> {
    weights: DenseMatrix<T>,
    pub l2_reg: T,
}

/// Label ids with their scores `<w_l, embedding>`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoredLabels<T = f32> {
    pub label_ids: Vec<u32>,
    pub scores: Vec<T>,
}

impl<T> ScoredLabels<T> {
    pub fn len(&self) -> usize {
        self.label_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.label_ids.is_empty()
    }
}

impl<T: Scalar> ClassifierBank<T> {
    pub fn new(weights: DenseMatrix<T>, l2_reg: T) -> Result<Self> {
        if !weights.is_finite() {
            return Err(Error::NonFinite("classifier weights".into()));
        }
        Ok(Self { weights, l2_reg })
    }

    #[inline]
    pub fn n_labels(&self) -> usize {
        self.weights.rows()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    #[inline]
    pub fn row(&self, label: u32) -> &[T] {
        self.weights.row(label as usize)
    }

    pub fn weights(&self) -> &DenseMatrix<T> {
        &self.weights
    }

    pub fn cast<U: Scalar>(&self) -> ClassifierBank<U> {
        ClassifierBank {
            weights: self.weights.cast(),
            l2_reg: U::from_f64_lossy(self.l2_reg.to_f64_lossy()),
        }
    }

    fn check_embedding(&self, embedding: &[T]) -> Result<()> {
        if embedding.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "embedding of length {} for classifier dimension {}",
                embedding.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    fn check_label(&self, label: u32) -> Result<()> {
        if label as usize >= self.n_labels() {
            return Err(Error::OutOfRange {
                what: "label id",
                index: label as usize,
                bound: self.n_labels(),
            });
        }
        Ok(())
    }

    fn prefetch_row(&self, l: u32) {
        if (l as usize) < self.n_labels() {
            let row = self.row(l);
            let line = (64 / std::mem::size_of::<T>()).max(1);
            for j in (0..row.len()).step_by(line) {
                prefetch(&row[j]);
            }
        }
    }

    pub fn score_labels(&self, embedding: &[T], label_ids: &[u32]) -> Result<ScoredLabels<T>> {
        self.check_embedding(embedding)?;
        // Rows of a slate are scattered across the bank; requesting a few rows
        // ahead overlaps their memory misses with the current dot product.
        const AHEAD: usize = 8;
        for &l in label_ids.iter().take(AHEAD) {
            self.prefetch_row(l);
        }
        let mut scores = Vec::with_capacity(label_ids.len());
        for (k, &l) in label_ids.iter().enumerate() {
            if let Some(&next) = label_ids.get(k + AHEAD) {
                self.prefetch_row(next);
            }
            self.check_label(l)?;
            scores.push(dot(self.row(l), embedding));
        }
        Ok(ScoredLabels {
            label_ids: label_ids.to_vec(),
            scores,
        })
    }

    pub fn score_all(&self, embedding: &[T]) -> Result<Vec<T>> {
        self.check_embedding(embedding)?;
        Ok((0..self.n_labels())
            .map(|l| dot(self.weights.row(l), embedding))
            .collect())
    }

    /// Scores of every label for each embedding row: `E W^T`, one row per
    /// embedding. Each classifier row is read once per batch.
    pub fn score_batch(&self, embeddings: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        if embeddings.cols() != self.dim() {
            return Err(Error::Dimension(format!(
                "embeddings have {} columns, classifiers {}",
                embeddings.cols(),
                self.dim()
            )));
        }
        matmul(embeddings, false, &self.weights, true)
    }

    /// Sparse SGD step: `w_l <- w_l - lr * (g_l + weight_decay * w_l)` for
    /// each label in `grads`; every other row is left untouched.
    pub fn apply_updates(&mut self, grads: &BTreeMap<u32, Vec<T>>, lr: T, weight_decay: T) -> Result<()> {
        for (&l, g) in grads {
            self.check_label(l)?;
            if g.len() != self.dim() {
                return Err(Error::Dimension(format!("gradient row for label {l}")));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient for label {l}")));
            }
        }
        for (&l, g) in grads {
            for (w, &gi) in self.weights.row_mut(l as usize).iter_mut().zip(g) {
                *w -= lr * (gi + weight_decay * *w);
            }
        }
        Ok(())
    }

    /// Dense SGD step over every row: `W <- W - lr * (G + weight_decay * W)`.
    pub fn apply_dense_update(&mut self, grads: &DenseMatrix<T>, lr: T, weight_decay: T) -> Result<()> {
        if grads.rows() != self.n_labels() || grads.cols() != self.dim() {
            return Err(Error::Dimension("dense gradient shape differs from the bank".into()));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("dense classifier gradient".into()));
        }
        for (w, &g) in self.weights.as_mut_slice().iter_mut().zip(grads.as_slice()) {
            *w -= lr * (g + weight_decay * *w);
        }
        Ok(())
    }
}

#[inline(always)]
fn prefetch<T>(p: &T) {
    #[cfg(target_arch = "x86_64")]
    // SAFETY: a prefetch hint never faults and `p` points into a live row.
    #[allow(unused_unsafe)]
    unsafe {
        use std::arch::x86_64::{_mm_prefetch, _MM_HINT_T0};
        _mm_prefetch::<_MM_HINT_T0>((p as *const T).cast::<i8>());
    }
    #[cfg(not(target_arch = "x86_64"))]
    std::hint::black_box(p);
}

pub fn init_classifiers<T: Scalar>(
    n_labels: usize,
    dim: usize,
    scheme: InitScheme,
    seed: u64,
) -> Result<ClassifierBank<T>> {
    if n_labels == 0 || dim == 0 {
        return Err(Error::invalid("classifier bank dimensions must be positive"));
    }
    let mut weights = DenseMatrix::zeros(n_labels, dim);
    if scheme == InitScheme::UniformScaled {
        let bound = 1.0 / (dim as f64).sqrt();
        let mut rng = rng_for(seed, &[stream::INIT_CLASSIFIER]);
        for v in weights.as_mut_slice() {
            *v = T::from_f64_lossy(rng.random_range(-bound..=bound));
        }
    }
    ClassifierBank::new(weights, T::zero())
}
