//! Adaptive-moment optimizer with decoupled weight decay.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("parameter {index} has no gradient")]
    MissingGrad { index: usize },
    #[error("parameter {index}: buffer length {got} does not match moment length {want}")]
    LengthMismatch { index: usize, got: usize, want: usize },
}

/// Optimizer state: one first/second moment buffer per parameter, in the same
/// order as the parameter set it was built for.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(lr: f64, param_lens: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. Gradients are read-only; the caller resets
    /// them (or discards the tape they live on).
    pub fn apply(
        &mut self,
        params: &mut [Vec<f64>],
        grads: &[Option<&[f64]>],
    ) -> Result<(), OptimError> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, p) in params.iter_mut().enumerate() {
            let g = grads[idx].ok_or(OptimError::MissingGrad { index: idx })?;
            if g.len() != self.m[idx].len() || p.len() != self.m[idx].len() {
                return Err(OptimError::LengthMismatch {
                    index: idx,
                    got: g.len(),
                    want: self.m[idx].len(),
                });
            }
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p[j]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_scalar_hand_value() {
        // t=1, g=1: mhat=1, vhat=1, update = -lr / (1 + eps).
        let mut st = OptimState::new(0.1, &[1]);
        let mut p = vec![vec![0.5]];
        let g = vec![1.0];
        st.apply(&mut p, &[Some(&g)]).unwrap();
        let want = 0.5 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p[0][0] - want).abs() < 1e-15, "{} vs {want}", p[0][0]);
    }

    #[test]
    fn zero_grad_leaves_param_unchanged() {
        let mut st = OptimState::new(0.1, &[3]);
        let mut p = vec![vec![1.0, -2.0, 0.25]];
        let g = vec![0.0; 3];
        st.apply(&mut p, &[Some(&g)]).unwrap();
        assert_eq!(p[0], vec![1.0, -2.0, 0.25]);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut st = OptimState::new(0.05, &[2, 3]);
            let mut p = vec![vec![0.1, 0.2], vec![-0.3, 0.4, 0.5]];
            for k in 0..25 {
                let g1 = vec![0.02 * k as f64, -0.01];
                let g2 = vec![0.5, 0.1 * k as f64, -0.2];
                st.apply(&mut p, &[Some(&g1), Some(&g2)]).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn step_counter_increments() {
        let mut st = OptimState::new(0.1, &[1]);
        let mut p = vec![vec![0.0]];
        let g = vec![0.1];
        assert_eq!(st.step_count(), 0);
        st.apply(&mut p, &[Some(&g)]).unwrap();
        st.apply(&mut p, &[Some(&g)]).unwrap();
        assert_eq!(st.step_count(), 2);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut st = OptimState::new(0.1, &[1, 1]);
        let mut p = vec![vec![0.0], vec![0.0]];
        let g = vec![0.1];
        let err = st.apply(&mut p, &[Some(&g), None]).unwrap_err();
        assert!(matches!(err, OptimError::MissingGrad { index: 1 }));
    }

    #[test]
    fn decoupled_weight_decay_shrinks_without_grad_signal() {
        let mut st = OptimState::new(0.1, &[1]);
        st.weight_decay = 0.5;
        let mut p = vec![vec![1.0]];
        let g = vec![0.0];
        st.apply(&mut p, &[Some(&g)]).unwrap();
        assert!((p[0][0] - (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }
}
