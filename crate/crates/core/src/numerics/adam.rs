use serde::{Deserialize, Serialize};

use super::{NumericsError, Real};

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState<F = f32> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub step: u64,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    /// L2 penalty folded into the gradient before the moment update.
    pub weight_decay: F,
}

impl<F: Real> AdamState<F> {
    pub fn new(len: usize) -> Self {
        Self::with_hyper(len, F::of(0.9), F::of(0.999), F::of(1e-8), F::zero())
    }

    pub fn with_hyper(len: usize, beta1: F, beta2: F, eps: F, weight_decay: F) -> Self {
        Self {
            m: vec![F::zero(); len],
            v: vec![F::zero(); len],
            step: 0,
            beta1,
            beta2,
            eps,
            weight_decay,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [F], grads: &[F], lr: F) -> Result<(), NumericsError> {
        if params.len() != self.m.len() {
            return Err(NumericsError::ShapeMismatch {
                expected: self.m.len(),
                got: params.len(),
            });
        }
        if grads.len() != params.len() {
            return Err(NumericsError::ShapeMismatch {
                expected: params.len(),
                got: grads.len(),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = F::one() - self.beta1.powi(t);
        let bc2 = F::one() - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for i in 0..params.len() {
            let g = grads[i] + self.weight_decay * params[i];
            self.m[i] = b1 * self.m[i] + (F::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (F::one() - b2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = AdamState::<f64>::new(3);
        let mut p = vec![1.0, -2.0, 3.0];
        s.step(&mut p, &[0.0; 3], 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut s = AdamState::<f64>::new(3);
        let mut p = vec![0.0; 3];
        s.step(&mut p, &[0.5, -3.0, 1e-3], 0.01).unwrap();
        for (x, g) in p.iter().zip([0.5f64, -3.0, 1e-3]) {
            assert_eq!(x.signum(), -g.signum());
            assert!((x.abs() - 0.01).abs() < 0.01 * 1e-4, "{x}");
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut s = AdamState::<f32>::new(2);
        let mut p = vec![0.0; 3];
        assert!(s.step(&mut p, &[0.0; 3], 0.1).is_err());
        let mut p = vec![0.0; 2];
        assert!(s.step(&mut p, &[0.0; 1], 0.1).is_err());
    }

    #[test]
    fn quadratic_descent_shrinks_after_warm_in() {
        // f(x) = x², simulated directly; |x| must fall monotonically once the
        // moments have settled, and end far below the start.
        let mut s = AdamState::<f64>::new(1);
        let mut x = vec![1.0];
        let mut trace = vec![1.0];
        for _ in 0..100 {
            let g = 2.0 * x[0];
            s.step(&mut x, &[g], 0.05).unwrap();
            trace.push(x[0].abs());
        }
        for w in trace[..15].windows(2) {
            assert!(w[1] < w[0], "{trace:?}");
        }
        assert!(trace[100] < 0.2);
    }

    #[test]
    fn step_counter_strictly_increases() {
        let mut s = AdamState::<f32>::new(1);
        let mut p = vec![1.0];
        for k in 1..=5 {
            s.step(&mut p, &[1.0], 0.1).unwrap();
            assert_eq!(s.step, k);
        }
    }
}
