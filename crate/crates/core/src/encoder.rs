//! Sparse-input encoder: a linear projection of the sparse features,
//! optionally followed by one `tanh` layer with bias.

use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{SparseDataset, SparseVector};
use crate::linalg::{axpy, dot, DenseMatrix};
use crate::rng::{rng_for, stream};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub input_dim: usize,
    pub proj_dim: usize,
    pub out_dim: usize,
    pub hidden: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// Uniform in `±1/sqrt(fan_in)`.
    UniformScaled,
    Zeros,
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform-scaled" | "uniform_scaled" => Ok(Self::UniformScaled),
            "zeros" => Ok(Self::Zeros),
            other => Err(Error::invalid(format!("unknown init scheme {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer<T> {
    /// `proj_dim x out_dim`
    pub weight: DenseMatrix<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    /// `input_dim x proj_dim`; row `j` is the image of feature `j`.
    projection: DenseMatrix<T>,
    hidden: Option<HiddenLayer<T>>,
}

/// Embeddings of a batch of dataset rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub embeddings: DenseMatrix<f32>,
    pub source_row_ids: Vec<usize>,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn new(projection: DenseMatrix<T>, hidden: Option<HiddenLayer<T>>) -> Result<Self> {
        if projection.cols() == 0 {
            return Err(Error::Dimension("encoder output dimension must be positive".into()));
        }
        if let Some(h) = &hidden {
            if h.weight.rows() != projection.cols() || h.bias.len() != h.weight.cols() {
                return Err(Error::Dimension(format!(
                    "hidden layer {}x{} (bias {}) after projection width {}",
                    h.weight.rows(),
                    h.weight.cols(),
                    h.bias.len(),
                    projection.cols()
                )));
            }
            if h.weight.cols() == 0 {
                return Err(Error::Dimension("encoder output dimension must be positive".into()));
            }
        }
        let out = Self { projection, hidden };
        if !out.is_finite() {
            return Err(Error::NonFinite("encoder parameters".into()));
        }
        Ok(out)
    }

    pub fn shape(&self) -> EncoderShape {
        EncoderShape {
            input_dim: self.input_dim(),
            proj_dim: self.projection.cols(),
            out_dim: self.out_dim(),
            hidden: self.hidden.is_some(),
        }
    }

    pub fn zeros(shape: EncoderShape) -> Self {
        Self {
            projection: DenseMatrix::zeros(shape.input_dim, shape.proj_dim),
            hidden: shape.hidden.then(|| HiddenLayer {
                weight: DenseMatrix::zeros(shape.proj_dim, shape.out_dim),
                bias: vec![T::zero(); shape.out_dim],
            }),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape())
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.projection.rows()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.hidden.as_ref().map_or(self.projection.cols(), |h| h.weight.cols())
    }

    pub fn projection(&self) -> &DenseMatrix<T> {
        &self.projection
    }

    pub fn hidden(&self) -> Option<&HiddenLayer<T>> {
        self.hidden.as_ref()
    }

    /// Flat views of every parameter tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out = vec![self.projection.as_slice()];
        if let Some(h) = &self.hidden {
            out.push(h.weight.as_slice());
            out.push(&h.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = vec![self.projection.as_mut_slice()];
        if let Some(h) = &mut self.hidden {
            out.push(h.weight.as_mut_slice());
            out.push(&mut h.bias);
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        EncoderParams {
            projection: self.projection.cast(),
            hidden: self.hidden.as_ref().map(|h| HiddenLayer {
                weight: h.weight.cast(),
                bias: h.bias.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
            }),
        }
    }

    fn check_input(&self, x: &SparseVector) -> Result<()> {
        match x.max_index() {
            Some(j) if j as usize >= self.input_dim() => Err(Error::Dimension(format!(
                "feature id {j} for encoder input dimension {}",
                self.input_dim()
            ))),
            _ => Ok(()),
        }
    }

    fn project(&self, x: &SparseVector) -> Vec<T> {
        let mut a = vec![T::zero(); self.projection.cols()];
        for (j, v) in x.iter() {
            axpy(T::from_f32_exact(v), self.projection.row(j as usize), &mut a);
        }
        a
    }

    pub fn embed(&self, x: &SparseVector) -> Result<Vec<T>> {
        self.check_input(x)?;
        let a = self.project(x);
        Ok(match &self.hidden {
            None => a,
            Some(h) => {
                let mut out = h.bias.clone();
                for (i, ai) in a.into_iter().enumerate() {
                    axpy(ai.tanh(), h.weight.row(i), &mut out);
                }
                out
            }
        })
    }

    /// Gradient of `<grad_out, embed(x)>` with respect to every parameter.
    pub fn backward(&self, x: &SparseVector, grad_out: &[T]) -> Result<Self> {
        let mut grad = self.zeros_like();
        self.accumulate_backward(x, grad_out, &mut grad)?;
        Ok(grad)
    }

    /// Adds the gradient of `<grad_out, embed(x)>` into `grad`. Only the
    /// projection rows of features present in `x` are touched.
    pub fn accumulate_backward(&self, x: &SparseVector, grad_out: &[T], grad: &mut Self) -> Result<()> {
        self.check_input(x)?;
        if grad_out.len() != self.out_dim() {
            return Err(Error::Dimension(format!(
                "upstream gradient of length {} for output dimension {}",
                grad_out.len(),
                self.out_dim()
            )));
        }
        if grad.shape() != self.shape() {
            return Err(Error::Dimension("gradient buffer shape".into()));
        }
        let grad_proj_out: Vec<T> = match (&self.hidden, &mut grad.hidden) {
            (Some(h), Some(gh)) => {
                let a = self.project(x);
                let mut ga = Vec::with_capacity(a.len());
                for (i, ai) in a.into_iter().enumerate() {
                    let z = ai.tanh();
                    axpy(z, grad_out, gh.weight.row_mut(i));
                    let gz = dot(h.weight.row(i), grad_out);
                    ga.push(gz * (T::one() - z * z));
                }
                for (b, &g) in gh.bias.iter_mut().zip(grad_out) {
                    *b += g;
                }
                ga
            }
            _ => grad_out.to_vec(),
        };
        for (j, v) in x.iter() {
            axpy(
                T::from_f32_exact(v),
                &grad_proj_out,
                grad.projection.row_mut(j as usize),
            );
        }
        Ok(())
    }
}

impl EncoderParams<f32> {
    /// Embeds the listed dataset rows in parallel.
    pub fn embed_rows(&self, ds: &SparseDataset, row_ids: &[usize]) -> Result<EmbeddingBatch> {
        let d = self.out_dim();
        let rows: Vec<Vec<f32>> = row_ids
            .par_iter()
            .map(|&i| self.embed(ds.row(i)))
            .collect::<Result<_>>()?;
        let embeddings = DenseMatrix::from_vec(row_ids.len(), d, rows.concat())?;
        if !embeddings.is_finite() {
            return Err(Error::NonFinite("embeddings".into()));
        }
        Ok(EmbeddingBatch {
            embeddings,
            source_row_ids: row_ids.to_vec(),
        })
    }

    /// Embeds arbitrary sparse rows (for instance label features) in parallel.
    pub fn embed_all(&self, rows: &[SparseVector]) -> Result<DenseMatrix<f32>> {
        let out: Vec<Vec<f32>> = rows.par_iter().map(|r| self.embed(r)).collect::<Result<_>>()?;
        DenseMatrix::from_vec(rows.len(), self.out_dim(), out.concat())
    }
}

/// Initializes an encoder. Without a hidden layer `proj_dim` must equal
/// `out_dim`.
pub fn init_encoder<T: Scalar>(shape: EncoderShape, scheme: InitScheme, seed: u64) -> Result<EncoderParams<T>> {
    if shape.input_dim == 0 || shape.proj_dim == 0 || shape.out_dim == 0 {
        return Err(Error::invalid("encoder dimensions must be positive"));
    }
    if !shape.hidden && shape.proj_dim != shape.out_dim {
        return Err(Error::invalid(format!(
            "proj_dim {} must equal out_dim {} without a hidden layer",
            shape.proj_dim, shape.out_dim
        )));
    }
    let mut params = EncoderParams::zeros(shape);
    if scheme == InitScheme::UniformScaled {
        let mut rng = rng_for(seed, &[stream::INIT_ENCODER]);
        let mut fill = |t: &mut [T], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in t.iter_mut() {
                *v = T::from_f64_lossy(rng.random_range(-bound..=bound));
            }
        };
        fill(params.projection.as_mut_slice(), shape.input_dim);
        if let Some(h) = &mut params.hidden {
            fill(h.weight.as_mut_slice(), shape.proj_dim);
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sv(pairs: &[(u32, f32)]) -> SparseVector {
        SparseVector::from_pairs(pairs.to_vec()).unwrap()
    }

    fn shape(input_dim: usize, proj_dim: usize, out_dim: usize, hidden: bool) -> EncoderShape {
        EncoderShape {
            input_dim,
            proj_dim,
            out_dim,
            hidden,
        }
    }

    fn random_params(s: EncoderShape, seed: u64) -> EncoderParams<f64> {
        let mut p: EncoderParams<f64> = init_encoder(s, InitScheme::UniformScaled, seed).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 100);
        if let Some(h) = &mut p.hidden {
            for b in &mut h.bias {
                *b = rng.random_range(-0.5..0.5);
            }
        }
        // Scale the projection up so the tanh layer leaves its linear regime.
        for v in p.projection.as_mut_slice() {
            *v *= 3.0;
        }
        p
    }

    fn random_input(d: usize, seed: u64) -> SparseVector {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut pairs: Vec<(u32, f32)> = Vec::new();
        for j in 0..d as u32 {
            if rng.random_bool(0.6) {
                pairs.push((j, rng.random_range(-1.0f32..1.0)));
            }
        }
        sv(&pairs)
    }

    #[test]
    fn identity_projection() {
        let proj = DenseMatrix::from_fn(3, 3, |r, c| if r == c { 1.0f32 } else { 0.0 });
        let p = EncoderParams::new(proj, None).unwrap();
        assert_eq!(p.embed(&sv(&[(0, 1.0)])).unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_input() {
        let p: EncoderParams<f64> = random_params(shape(5, 3, 3, false), 1);
        assert_eq!(p.embed(&SparseVector::empty()).unwrap(), vec![0.0; 3]);
        let p = random_params(shape(5, 3, 2, true), 2);
        assert_eq!(p.embed(&SparseVector::empty()).unwrap(), p.hidden().unwrap().bias);
    }

    #[test]
    fn matches_dense_recomputation() {
        for hidden in [false, true] {
            let s = shape(6, 4, if hidden { 3 } else { 4 }, hidden);
            let p = random_params(s, 9);
            let x = random_input(6, 10);
            let mut dense = [0.0f64; 6];
            for (j, v) in x.iter() {
                dense[j as usize] = v as f64;
            }
            let a: Vec<f64> = (0..4)
                .map(|c| (0..6).map(|r| dense[r] * p.projection.get(r, c)).sum())
                .collect();
            let want: Vec<f64> = match p.hidden() {
                None => a,
                Some(h) => (0..3)
                    .map(|k| h.bias[k] + (0..4).map(|i| a[i].tanh() * h.weight.get(i, k)).sum::<f64>())
                    .collect(),
            };
            let got = p.embed(&x).unwrap();
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let p: EncoderParams<f32> = init_encoder(shape(3, 2, 2, false), InitScheme::Zeros, 0).unwrap();
        assert!(p.embed(&sv(&[(3, 1.0)])).is_err());
        assert!(p.backward(&sv(&[(0, 1.0)]), &[1.0]).is_err());
    }

    #[test]
    fn linear_layer_gradient_rows() {
        let p: EncoderParams<f64> = random_params(shape(5, 3, 3, false), 4);
        let x = sv(&[(1, 2.0), (4, -0.5)]);
        let g = [0.3, -1.0, 2.0];
        let grad = p.backward(&x, &g).unwrap();
        for j in 0..5 {
            let xj = x.iter().find(|e| e.0 == j as u32).map_or(0.0, |e| e.1 as f64);
            for c in 0..3 {
                assert_eq!(grad.projection.get(j, c), xj * g[c]);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let p = random_params(shape(5, 3, 2, true), 4);
        let grad = p.backward(&random_input(5, 1), &[0.0, 0.0]).unwrap();
        assert!(grad.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    /// Central differences of `<g, embed(x)>` against the analytic gradient.
    pub(crate) fn fd_check(p: &EncoderParams<f64>, x: &SparseVector, g: &[f64]) -> f64 {
        let analytic = p.backward(x, g).unwrap();
        let objective = |q: &EncoderParams<f64>| -> f64 { q.embed(x).unwrap().iter().zip(g).map(|(a, b)| a * b).sum() };
        let h = 1e-5;
        let mut worst = 0.0f64;
        let n_tensors = p.tensors().len();
        for t in 0..n_tensors {
            for k in 0..p.tensors()[t].len() {
                let mut plus = p.clone();
                plus.tensors_mut()[t][k] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[t][k] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let an = analytic.tensors()[t][k];
                let err = (fd - an).abs();
                if err > 1e-8 {
                    worst = worst.max(err / an.abs().max(fd.abs()));
                }
            }
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for case in 0..20u64 {
            let hidden = case % 2 == 0;
            let s = if hidden {
                shape(8, 4, 3, true)
            } else {
                shape(8, 4, 4, false)
            };
            let p = random_params(s, case);
            let x = random_input(8, case + 1000);
            let g: Vec<f64> = (0..s.out_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let worst = fd_check(&p, &x, &g);
            assert!(worst < 1e-4, "case {case}: relative error {worst}");
        }
    }

    #[test]
    fn positively_homogeneous_without_hidden() {
        let p = random_params(shape(6, 3, 3, false), 12);
        let x = random_input(6, 13);
        let base = p.embed(&x).unwrap();
        let scaled = p.embed(&x.scaled(2.5)).unwrap();
        for (a, b) in base.iter().zip(&scaled) {
            assert!((2.5 * a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn init_contracts() {
        let z: EncoderParams<f32> = init_encoder(shape(10, 4, 4, false), InitScheme::Zeros, 1).unwrap();
        assert!(z.embed(&sv(&[(3, 5.0)])).unwrap().iter().all(|&v| v == 0.0));

        let u: EncoderParams<f32> = init_encoder(shape(100, 8, 8, false), InitScheme::UniformScaled, 1).unwrap();
        assert!(u.projection.as_slice().iter().all(|v| v.abs() <= 0.1));
        let u2: EncoderParams<f32> = init_encoder(shape(100, 8, 8, false), InitScheme::UniformScaled, 1).unwrap();
        assert_eq!(u, u2);

        assert!("he-normal".parse::<InitScheme>().is_err());
        assert!(init_encoder::<f32>(shape(10, 4, 3, false), InitScheme::Zeros, 1).is_err());
    }

    #[test]
    fn embedding_is_deterministic() {
        let p: EncoderParams<f32> = init_encoder(shape(50, 8, 4, true), InitScheme::UniformScaled, 3).unwrap();
        let x = random_input(50, 5);
        let a = p.embed(&x).unwrap();
        let b = p.embed(&x).unwrap();
        assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
}
