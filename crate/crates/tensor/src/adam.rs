use crate::error::{Result, TensorError};
use crate::params::ParamSet;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Adam with bias-corrected moments; one moment pair per parameter slot.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros = || params.tensors().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Adam {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Gradients are validated before any parameter
    /// changes, so a rejected step leaves both parameters and state intact.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) -> Result<()> {
        params.check_layout(grads, "adam_step")?;
        params.check_layout(&self.first, "adam_step")?;
        for (name, g) in params.names().iter().zip(grads) {
            if !g.is_finite() {
                return Err(TensorError::NonFiniteGradient { name: name.clone() });
            }
        }
        self.step += 1;
        let c = &self.config;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let t = self.step as i32;
        let correct1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let correct2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let lr = T::from_f64_lossy(c.learning_rate);
        let eps = T::from_f64_lossy(c.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / correct1;
                let v_hat = *v / correct2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: &[f64]) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push("w", Tensor::from_f64([v.len()], v).unwrap());
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(&[1.0, -2.0]);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.step(&mut p, &[Tensor::zeros([2])]).unwrap();
        assert_eq!(p.get(0).data(), &[1.0, -2.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let mut p = single(&[0.0, 0.0, 0.0]);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let g = Tensor::from_f64([3], &[0.5, -3.0, 0.0]).unwrap();
        adam.step(&mut p, &[g]).unwrap();
        let d = p.get(0).data();
        assert!((d[0] + 1e-3 * 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
        assert!((d[1] - 1e-3 * 3.0 / (3.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(d[2], 0.0);
    }

    #[test]
    fn quadratic_loss_shrinks() {
        // loss = x^2 with gradient 2x
        let mut p = single(&[1.0]);
        let mut adam = Adam::new(AdamConfig::with_learning_rate(0.1), &p);
        let mut last = 1.0;
        for _ in 0..2 {
            let x = p.get(0).data()[0];
            adam.step(&mut p, &[Tensor::from_f64([1], &[2.0 * x]).unwrap()]).unwrap();
            let x = p.get(0).data()[0];
            assert!(x * x < last);
            last = x * x;
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = single(&[1.0]);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let err = adam.step(&mut p, &[Tensor::from_f64([1], &[f64::NAN]).unwrap()]).unwrap_err();
        assert_eq!(err, TensorError::NonFiniteGradient { name: "w".into() });
        assert_eq!(adam.step_count(), 0);
        assert_eq!(p.get(0).data(), &[1.0]);
    }

    #[test]
    fn mismatched_gradient_shape_rejected() {
        let mut p = single(&[1.0, 2.0]);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        assert!(adam.step(&mut p, &[Tensor::zeros([3])]).is_err());
    }
}
