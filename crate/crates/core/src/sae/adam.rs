/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    /// Advance the step counter. Call once per optimizer step, before the
    /// `update_slice` calls for that step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Update `params` (occupying `offset..offset + params.len()` of the flat
    /// state) with `grads`.
    pub fn update_slice(&mut self, offset: usize, params: &mut [f32], grads: &[f64]) {
        debug_assert!(self.t > 0, "begin_step not called");
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let m = &mut self.m[offset..offset + params.len()];
        let v = &mut self.v[offset..offset + params.len()];
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(m).zip(v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p = (*p as f64 - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first step is lr * sign(g) (up to epsilon).
        let mut adam = Adam::new(AdamConfig { learning_rate: 0.1, ..Default::default() }, 2);
        let mut p = [1.0f32, -1.0];
        adam.begin_step();
        adam.update_slice(0, &mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut adam = Adam::new(AdamConfig { learning_rate: 0.05, ..Default::default() }, 1);
        let mut p = [5.0f32];
        for _ in 0..2000 {
            let g = 2.0 * (p[0] as f64 - 2.0);
            adam.begin_step();
            adam.update_slice(0, &mut p, &[g]);
        }
        assert!((p[0] - 2.0).abs() < 1e-2);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut adam = Adam::new(AdamConfig { learning_rate: 0.0, ..Default::default() }, 1);
        let mut p = [0.123f32];
        adam.begin_step();
        adam.update_slice(0, &mut p, &[10.0]);
        assert_eq!(p[0].to_bits(), 0.123f32.to_bits());
    }
}
