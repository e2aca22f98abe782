use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer with a fixed learning rate. A parameter whose
/// gradient has always been zero is never moved.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, shapes: &[&[f32]]) -> Self {
        Self {
            cfg,
            step: 0,
            m: shapes.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: shapes.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f32]>, grads: &[Vec<f32>]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let update = c.learning_rate * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                p[j] -= update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut w = vec![0.3f32, -1.2];
        let mut adam = Adam::new(AdamConfig::default(), &[&w]);
        let before = w.clone();
        adam.step(vec![&mut w], &[vec![0.0, 0.0]]);
        assert_eq!(w, before);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut w = vec![5.0f32];
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: 0.1,
                ..AdamConfig::default()
            },
            &[&w],
        );
        for _ in 0..500 {
            let g = vec![2.0 * (w[0] - 1.0)];
            adam.step(vec![&mut w], &[g]);
        }
        assert!((w[0] - 1.0).abs() < 1e-2);
    }
}
