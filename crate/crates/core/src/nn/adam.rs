use alloc::vec::Vec;

use super::{Param, Real};

/// Adaptive-moment gradient descent with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: Vec::new() }
    }

    /// Applies one update using the accumulated gradients scaled by
    /// `grad_scale`, then clears them. Parameters must be passed in the same
    /// order on every call.
    pub fn step(&mut self, params: &mut [&mut Param<T>], grad_scale: f64) {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| (alloc::vec![T::zero(); p.len()], alloc::vec![T::zero(); p.len()]))
                .collect();
        }
        debug_assert_eq!(self.moments.len(), params.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - num_traits::Float::powi(self.beta1, t);
        let bc2 = 1.0 - num_traits::Float::powi(self.beta2, t);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let step_size = T::from_f64(self.lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(self.eps);
        let scale = T::from_f64(grad_scale);
        for (p, (m, v)) in params.iter_mut().zip(&mut self.moments) {
            for i in 0..p.value.len() {
                let g = p.grad[i] * scale;
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                p.value[i] -= step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut p = Param::<f64>::filled("x", 2, 3.0);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            for i in 0..2 {
                p.grad[i] = 2.0 * (p.value[i] - i as f64);
            }
            opt.step(&mut [&mut p], 1.0);
        }
        assert!((p.value[0]).abs() < 1e-2 && (p.value[1] - 1.0).abs() < 1e-2);
    }
}
