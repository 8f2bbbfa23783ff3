use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments, one moment pair per tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, lr: f64, shapes: &[usize]) -> Self {
        Self {
            cfg,
            lr,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // bias correction makes the first update lr * sign(g)
        let mut opt = Adam::new(AdamConfig::default(), 0.01, &[2]);
        let mut p = vec![1.0, 1.0];
        opt.step(vec![&mut p], vec![&[3.0, -0.5]]);
        assert!((p[0] - 0.99).abs() < 1e-8);
        assert!((p[1] - 1.01).abs() < 1e-8);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = Adam::new(AdamConfig::default(), 0.05, &[1]);
        let mut x = vec![5.0];
        for _ in 0..2000 {
            let g = [2.0 * (x[0] - 2.0)];
            opt.step(vec![&mut x], vec![&g]);
        }
        assert!((x[0] - 2.0).abs() < 1e-3);
    }
}
