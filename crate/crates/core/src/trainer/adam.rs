/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; num_params], v: vec![0.0; num_params], t: 0 }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    /// Descends along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "parameter count");
        assert_eq!(grad.len(), self.m.len(), "gradient length");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut opt = Adam::new(3, 0.1);
        let mut p = vec![1.0, -2.0, 3.0];
        opt.step(&mut p, &[0.5, 0.0, -1.0]);
        let after_one = p.clone();
        let (m1, _) = opt.moments();
        let m1 = m1.to_vec();
        opt.step(&mut p, &[0.0; 3]);
        // momentum still moves parameters that had a gradient
        assert_eq!(p[1], after_one[1]);
        let (m2, _) = opt.moments();
        for (a, b) in m1.iter().zip(m2) {
            assert!((b - 0.9 * a).abs() < 1e-15);
        }

        let mut fresh = Adam::new(2, 0.1);
        let mut q = vec![0.3, 0.4];
        fresh.step(&mut q, &[0.0, 0.0]);
        assert_eq!(q, vec![0.3, 0.4]);
    }

    #[test]
    fn first_step_has_learning_rate_size() {
        let mut opt = Adam::new(3, 1e-2);
        let mut p = vec![0.0; 3];
        let g = [3.0, -1e-3, 250.0];
        opt.step(&mut p, &g);
        for (pi, gi) in p.iter().zip(g) {
            // m̂ = g, v̂ = g², so Δ = -lr·g/(|g| + eps)
            let want = -1e-2 * gi / (gi.abs() + 1e-8);
            assert!((pi - want).abs() < 1e-15);
        }
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut opt = Adam::new(2, 1e-3);
            let mut p = vec![1.0, 1.0];
            for k in 0..20 {
                opt.step(&mut p, &[k as f64 * 0.1, -0.5]);
            }
            p
        };
        assert_eq!(run(), run());
    }
}
