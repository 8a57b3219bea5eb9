//! Adam optimiser with bias-corrected moment estimates.

#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Adam {
    pub fn new(param_count: usize, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Adam {
        Adam { m: vec![0.0; param_count], v: vec![0.0; param_count], t: 0, learning_rate, beta1, beta2, epsilon }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimises_a_quadratic() {
        // f(x) = (x - 3)^2; Adam should walk x toward 3.
        let mut params = vec![0.0];
        let mut adam = Adam::new(1, 0.1, 0.9, 0.999, 1e-8);
        for _ in 0..500 {
            let g = 2.0 * (params[0] - 3.0);
            adam.step(&mut params, &[g]);
        }
        assert!((params[0] - 3.0).abs() < 1e-2, "got {}", params[0]);
    }

    #[test]
    fn first_step_is_learning_rate_sized() {
        let mut params = vec![0.0];
        let mut adam = Adam::new(1, 0.001, 0.9, 0.999, 1e-8);
        adam.step(&mut params, &[42.0]);
        // Bias correction makes the first step ~lr regardless of gradient scale.
        assert!((params[0] + 0.001).abs() < 1e-6, "got {}", params[0]);
    }
}
