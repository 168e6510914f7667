use std::f64::consts::PI;

use crate::encoder::EncoderParams;
use crate::{Error, Result, Scalar};

/// Linear warmup to `peak_lr`, then cosine decay to zero at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, peak_lr: f64) -> f64 {
    if step < warmup_steps {
        return peak_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return peak_lr;
    }
    let progress = ((step - warmup_steps) as f64 / span as f64).min(1.0);
    peak_lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// Adam moments for the encoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: EncoderParams<T>,
    pub v: EncoderParams<T>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &EncoderParams<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected update of `params` with gradient `grads`.
    pub fn step(&mut self, params: &mut EncoderParams<T>, grads: &EncoderParams<T>, lr: f64) -> Result<()> {
        if grads.shape() != params.shape() || self.m.shape() != params.shape() {
            return Err(Error::Dimension("optimizer state and parameter shapes differ".into()));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("encoder gradients".into()));
        }
        self.t += 1;
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(self.t as i32));
        let lr = T::from_f64_lossy(lr);
        let eps = T::from_f64_lossy(self.eps);
        let one = T::one();
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        if !self.m.is_finite() || !self.v.is_finite() {
            return Err(Error::NonFinite("optimizer moments".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderShape, HiddenLayer};
    use crate::linalg::DenseMatrix;

    #[test]
    fn schedule_landmarks() {
        let (total, warm, peak) = (1000, 100, 0.3);
        assert_eq!(lr_at(0, total, warm, peak), 0.0);
        assert_eq!(lr_at(50, total, warm, peak), 0.15);
        assert_eq!(lr_at(warm, total, warm, peak), peak);
        assert!((lr_at(warm + 450, total, warm, peak) - peak / 2.0).abs() < 1e-12);
        assert!(lr_at(total, total, warm, peak).abs() < 1e-12);
    }

    fn scalar_params(v: f64) -> EncoderParams<f64> {
        EncoderParams::new(DenseMatrix::from_vec(1, 1, vec![v]).unwrap(), None::<HiddenLayer<f64>>).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr() {
        let shape = EncoderShape {
            input_dim: 3,
            proj_dim: 2,
            out_dim: 2,
            hidden: true,
        };
        let mut p = EncoderParams::<f64>::zeros(shape);
        let mut g = p.zeros_like();
        for t in g.tensors_mut() {
            for (i, x) in t.iter_mut().enumerate() {
                *x = if i % 2 == 0 { 3.0 } else { -0.02 };
            }
        }
        let mut adam = AdamState::new(&p);
        adam.step(&mut p, &g, 0.01).unwrap();
        for (pt, gt) in p.tensors().iter().zip(g.tensors()) {
            for (x, gx) in pt.iter().zip(gt) {
                assert!((x.abs() - 0.01).abs() < 1e-7);
                assert_eq!(x.signum(), -gx.signum());
            }
        }
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = scalar_params(0.7);
        let g = scalar_params(0.0);
        let mut adam = AdamState::new(&p);
        for _ in 0..10 {
            adam.step(&mut p, &g, 0.1).unwrap();
        }
        assert_eq!(p, scalar_params(0.7));
    }

    #[test]
    fn three_step_hand_recursion() {
        let grads = [0.5, -1.0, 2.0];
        let lr = 0.1;
        let mut p = scalar_params(1.0);
        let mut adam = AdamState::new(&p);
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 1.0f64);
        for (t, &g) in grads.iter().enumerate() {
            adam.step(&mut p, &scalar_params(g), lr).unwrap();
            let t = (t + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            x -= lr * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            assert!((p.projection().get(0, 0) - x).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut p = scalar_params(1.0);
        let mut adam = AdamState::new(&p);
        let mut g = p.zeros_like();
        g.tensors_mut()[0][0] = f64::NAN;
        assert!(adam.step(&mut p, &g, 0.1).is_err());
    }
}
