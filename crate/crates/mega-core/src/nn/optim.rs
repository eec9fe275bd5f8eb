use crate::error::{Error, Result};
use crate::nn::graph::Gradients;
use crate::nn::params::ParamSet;
use crate::nn::tensor::Tensor;

const ADAM_EPS: f64 = 1e-8;

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let m = (0..params.len())
            .map(|i| Tensor::zeros(&params.value(i).shape))
            .collect();
        let v = (0..params.len())
            .map(|i| Tensor::zeros(&params.value(i).shape))
            .collect();
        AdamW {
            beta1,
            beta2,
            weight_decay,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One decoupled-weight-decay update. Parameters without a gradient this
    /// step are still decayed, mirroring a zero gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients, lr: f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            if let Some(g) = grads.get(i) {
                if !g.all_finite() {
                    return Err(Error::Divergence(params.name(i).to_string()));
                }
            }
            let zero;
            let g = match grads.get(i) {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(&params.value(i).shape);
                    &zero
                }
            };
            let m = &mut self.m[i].data;
            let v = &mut self.v[i].data;
            let theta = &mut params.value_mut(i).data;
            for j in 0..theta.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g.data[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g.data[j] * g.data[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                theta[j] -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + self.weight_decay * theta[j]);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then cosine decay to zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    debug_assert!(step <= total_steps && warmup_steps < total_steps);
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.add("x", Tensor::scalar(v));
        p
    }

    fn grad_of(params: &ParamSet, g: f64) -> Gradients {
        let mut grads = Gradients::zeros(params.len());
        grads.by_param[0] = Some(Tensor::scalar(g));
        grads
    }

    #[test]
    fn zero_gradient_and_zero_decay_leaves_params_unchanged() {
        let mut p = single_param(1.5);
        let mut opt = AdamW::new(&p, 0.9, 0.99, 0.0);
        let grads = grad_of(&p, 0.0);
        opt.step(&mut p, &grads, 1e-3).unwrap();
        assert_eq!(p.value(0).item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // With bias correction, step 1 gives mhat=g, vhat=g^2, so the update
        // is lr * g/(|g| + eps) ~ lr * sign(g).
        let mut p = single_param(0.0);
        let mut opt = AdamW::new(&p, 0.9, 0.99, 0.0);
        let grads = grad_of(&p, -3.7);
        opt.step(&mut p, &grads, 1e-3).unwrap();
        let expected = 1e-3 * 3.7 / (3.7 + ADAM_EPS);
        assert!((p.value(0).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // Minimize x^2/2; gradient is x.
        let mut p = single_param(5.0);
        let mut opt = AdamW::new(&p, 0.9, 0.99, 0.0);
        for _ in 0..500 {
            let x = p.value(0).item();
            let grads = grad_of(&p, x);
            opt.step(&mut p, &grads, 0.05).unwrap();
        }
        assert!(
            p.value(0).item().abs() < 1e-3,
            "ended at {}",
            p.value(0).item()
        );
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = single_param(1.0);
        let mut opt = AdamW::new(&p, 0.9, 0.99, 0.05);
        let grads = grad_of(&p, f64::NAN);
        let err = opt.step(&mut p, &grads, 1e-3).unwrap_err();
        assert!(matches!(err, Error::Divergence(name) if name == "x"));
    }

    #[test]
    fn cosine_schedule_hits_exact_anchors() {
        let base = 1e-3;
        assert_eq!(cosine_lr(20, 100, 20, base), base);
        assert!(cosine_lr(100, 100, 20, base).abs() < 1e-15);
        let mid = cosine_lr(60, 100, 20, base);
        assert!((mid - base / 2.0).abs() < 1e-12);
        // Linear ramp during warmup.
        assert!((cosine_lr(5, 100, 20, base) - base * 0.25).abs() < 1e-15);
        assert_eq!(cosine_lr(0, 100, 0, base), base);
    }
}
