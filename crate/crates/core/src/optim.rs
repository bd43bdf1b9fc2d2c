use std::collections::HashMap;

use crate::params::ModelParams;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Optimizer<T> {
    Sgd { lr: f64 },
    Adam {
        config: AdamConfig,
        step: u64,
        moments: HashMap<String, (Vec<T>, Vec<T>)>,
    },
}

impl<T: Real> Optimizer<T> {
    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd { lr }
    }

    pub fn adam(config: AdamConfig) -> Self {
        Optimizer::Adam {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Sgd { lr } => *lr,
            Optimizer::Adam { config, .. } => config.lr,
        }
    }

    /// Applies one update using the gradients stored on `model`.
    /// Parameters without a gradient are left alone.
    pub fn step(&mut self, model: &mut ModelParams<T>) {
        match self {
            Optimizer::Sgd { lr } => {
                let lr = T::lit(*lr);
                for p in model.iter_mut() {
                    let Some(g) = p.grad.as_ref() else { continue };
                    for (v, &d) in p.value.data_mut().iter_mut().zip(g.data()) {
                        *v = *v - lr * d;
                    }
                }
            }
            Optimizer::Adam { config, step, moments } => {
                *step += 1;
                let t = *step as i32;
                let (b1, b2) = (config.beta1, config.beta2);
                let bc1 = T::lit(1.0 - b1.powi(t));
                let bc2 = T::lit(1.0 - b2.powi(t));
                let (b1, b2) = (T::lit(b1), T::lit(b2));
                let (lr, eps) = (T::lit(config.lr), T::lit(config.eps));
                for p in model.iter_mut() {
                    let Some(g) = p.grad.as_ref() else { continue };
                    let n = g.numel();
                    let (m, v) = moments
                        .entry(p.name.clone())
                        .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
                    for (k, (w, &d)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[k] = b1 * m[k] + (T::one() - b1) * d;
                        v[k] = b2 * v[k] + (T::one() - b2) * d * d;
                        let mhat = m[k] / bc1;
                        let vhat = v[k] / bc2;
                        *w = *w - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use crate::tensor::Tensor;

    fn model(value: f64, grad: f64) -> ModelParams<f64> {
        let mut m = ModelParams::new();
        m.add("w", ParamKind::ConvKernel, Tensor::from_f64([1, 1, 1, 2], &[value, -value]).unwrap())
            .unwrap();
        m.get_mut("w").unwrap().grad = Some(Tensor::from_f64([1, 1, 1, 2], &[grad, grad]).unwrap());
        m
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut m = model(0.7, 0.0);
        let before = m.get("w").unwrap().value.clone();
        let mut opt = Optimizer::adam(AdamConfig::default());
        for _ in 0..3 {
            opt.step(&mut m);
        }
        assert_eq!(m.get("w").unwrap().value, before);
    }

    #[test]
    fn zero_lr_is_noop() {
        for mut opt in [
            Optimizer::sgd(0.0),
            Optimizer::adam(AdamConfig { lr: 0.0, ..Default::default() }),
        ] {
            let mut m = model(0.7, 1.5);
            let before = m.get("w").unwrap().value.clone();
            opt.step(&mut m);
            assert_eq!(m.get("w").unwrap().value, before);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut m = model(1.0, 0.3);
        let mut opt = Optimizer::adam(AdamConfig { lr: 0.01, ..Default::default() });
        opt.step(&mut m);
        // bias-corrected first step is lr·sign(g)
        let w = m.get("w").unwrap().value.data()[0];
        assert!((w - 0.99).abs() < 1e-6, "{w}");
    }

    #[test]
    fn sgd_step() {
        let mut m = model(1.0, 0.5);
        Optimizer::sgd(0.1).step(&mut m);
        assert_eq!(m.get("w").unwrap().value.data(), &[0.95, -1.05]);
    }
}
