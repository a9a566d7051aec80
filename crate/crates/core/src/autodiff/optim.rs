use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam. Moments are stored per parameter, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F: Scalar = f32> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<F>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![F::zero(); p.numel()], vec![F::zero(); p.numel()]))
            .unzip();
        Adam { config, step: 0, m, v }
    }

    /// Rebuilds optimizer state from saved moments (e.g. a checkpoint).
    pub fn from_state(config: AdamConfig, step: u64, m: Vec<Vec<F>>, v: Vec<Vec<F>>) -> Self {
        Adam { config, step, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<F>], &[Vec<F>]) {
        (&self.m, &self.v)
    }

    /// Applies one update with learning rate `lr` using each parameter's accumulated gradient.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor<F>>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (F::of(beta1), F::of(beta2));
        let (one_b1, one_b2) = (F::of(1.0 - beta1), F::of(1.0 - beta2));
        let step_size = F::of(lr / bc1);
        let bc2_sqrt = F::of(bc2.sqrt());
        let eps = F::of(eps);
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            let (data, grad) = p.data_mut_and_grad();
            let Some(grad) = grad else { continue };
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                data[i] = data[i] - step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_grad_norm<'a, F: Scalar>(params: impl IntoIterator<Item = &'a mut Tensor<F>>, max_norm: f64) -> f64 {
    let mut params: Vec<&mut Tensor<F>> = params.into_iter().collect();
    let norm = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|g| g.f64() * g.f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = F::of(max_norm / norm);
        for p in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                g.iter_mut().for_each(|x| *x = *x * factor);
            }
        }
    }
    norm
}

/// Linear warmup to `peak` over `warmup` steps, then linear decay reaching 0 at `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearWarmup {
    pub peak: f64,
    pub warmup: u64,
    pub total: u64,
}

impl LinearWarmup {
    /// Learning rate for 1-based `step`.
    pub fn lr(&self, step: u64) -> f64 {
        let step = step.max(1);
        if step <= self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        if step >= self.total {
            return 0.0;
        }
        let span = (self.total - self.warmup) as f64;
        self.peak * (self.total - step) as f64 / span
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(w: f64) -> Tensor<f64> {
        Tensor::scalar(w).with_grad(true)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut w = scalar_param(0.0);
        w.grad_mut().unwrap()[0] = 1.0;
        let mut adam = Adam::new(AdamConfig::default(), [&w]);
        adam.step([&mut w], 0.1);
        // m̂ = 1, v̂ = 1 after bias correction, so Δw = −lr·1/(1+ε).
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((w.item() - expected).abs() < 1e-12, "{}", w.item());
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut w = scalar_param(3.5);
        let mut adam = Adam::new(AdamConfig::default(), [&w]);
        for _ in 0..5 {
            adam.step([&mut w], 0.1);
        }
        assert_eq!(w.item(), 3.5);
    }

    #[test]
    fn quadratic_descent_is_monotone() {
        // f(w) = w², f'(w) = 2w, simulated by hand against the optimizer.
        let mut w = scalar_param(1.0);
        let mut adam = Adam::new(AdamConfig::default(), [&w]);
        let mut prev = w.item() * w.item();
        for _ in 0..2 {
            let g = 2.0 * w.item();
            w.zero_grad();
            w.grad_mut().unwrap()[0] = g;
            adam.step([&mut w], 0.1);
            let f = w.item() * w.item();
            assert!(f < prev);
            prev = f;
        }
    }

    #[test]
    fn schedule_shape() {
        let s = LinearWarmup { peak: 1.0, warmup: 4, total: 10 };
        assert_eq!(s.lr(1), 0.25);
        assert_eq!(s.lr(4), 1.0);
        assert_eq!(s.lr(7), 0.5);
        assert_eq!(s.lr(10), 0.0);
        let no_warmup = LinearWarmup { peak: 2.0, warmup: 0, total: 2 };
        assert_eq!(no_warmup.lr(1), 1.0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut a = Tensor::<f64>::zeros(vec![2]).with_grad(true);
        a.grad_mut().unwrap().copy_from_slice(&[3.0, 4.0]);
        let n = clip_grad_norm([&mut a], 1.0);
        assert_eq!(n, 5.0);
        let g = a.grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
    }
}
