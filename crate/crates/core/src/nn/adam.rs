use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

/// Moment estimates for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(n: usize, config: AdamConfig) -> Self {
        Self {
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step_count: 0,
            config,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len(), "params/grads length");
        assert_eq!(params.len(), self.first_moment.len(), "params/state length");
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}

pub fn adam_step(mut state: AdamState, mut params: Vec<f64>, grads: &[f64]) -> (AdamState, Vec<f64>) {
    state.update(&mut params, grads);
    (state, params)
}
