use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore<f32>) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0f32; t.numel()]).collect::<Vec<_>>();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Apply one update. Gradients are checked for NaN/Inf before any
    /// parameter is touched.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Tensor<f32>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: params.get(id).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter '{}' at flat index {} ({})",
                    params.name(id),
                    pos,
                    g.data()[pos]
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let step_size = (c.lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = c.eps as f32;
        for (i, (id, g)) in params.ids().zip(grads).enumerate() {
            let p = params.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                p[j] -= step_size * m[j] / (v[j].sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        for (i, &v) in values.iter().enumerate() {
            s.add(format!("p{i}"), Tensor::scalar(v as f32));
        }
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = store(&[1.0, -2.0]);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let g = vec![Tensor::scalar(0.0f32); 2];
        adam.step(&mut p, &g).unwrap();
        assert_eq!(p.get(crate::autodiff::ParamId(0)).data(), &[1.0]);
        assert_eq!(p.get(crate::autodiff::ParamId(1)).data(), &[-2.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // t=1: m̂ = g, v̂ = g², update = lr·g/(|g|+eps) ≈ lr.
        let mut p = store(&[0.5]);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.step(&mut p, &[Tensor::scalar(1.0f32)]).unwrap();
        let after = p.get(crate::autodiff::ParamId(0)).data()[0] as f64;
        assert!((0.5 - after - 1e-3).abs() < 1e-7, "moved by {}", 0.5 - after);
    }

    #[test]
    fn identical_params_identical_updates() {
        let mut p = store(&[0.3, 0.3]);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        for _ in 0..5 {
            adam.step(&mut p, &[Tensor::scalar(0.7f32), Tensor::scalar(0.7f32)])
                .unwrap();
        }
        let a = p.get(crate::autodiff::ParamId(0)).data()[0];
        let b = p.get(crate::autodiff::ParamId(1)).data()[0];
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = store(&[0.0, 0.0]);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let err = adam
            .step(&mut p, &[Tensor::scalar(0.0f32), Tensor::scalar(f32::NAN)])
            .unwrap_err()
            .to_string();
        assert!(err.contains("p1"), "{err}");
        assert_eq!(adam.step_count(), 0);
    }
}
