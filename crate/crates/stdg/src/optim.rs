//! Optimizers (Adam and plain SGD) and global-norm gradient clipping.
//!
//! Updates are deterministic functions of (state, gradients, learning rate).
//! Per-parameter learning rates carry the two-group schedule (backbone vs
//! prediction heads).

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        AdamSettings {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments {
    m: Tensor,
    v: Tensor,
}

/// Optimizer state over an ordered parameter list. The caller must present
/// the same parameter order on every step.
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub adam: AdamSettings,
    step_count: u64,
    moments: Vec<Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            adam: AdamSettings::default(),
            step_count: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update. `lrs[i]` is the learning rate for `params[i]`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lrs: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != lrs.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer step arity mismatch: {} params, {} grads, {} lrs",
                params.len(),
                grads.len(),
                lrs.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape_mismatch("optimizer step", p.shape(), g.shape()));
            }
        }
        if self.moments.is_empty() && self.kind == OptimizerKind::Adam {
            self.moments = params
                .iter()
                .map(|p| Moments {
                    m: Tensor::zeros(p.shape()),
                    v: Tensor::zeros(p.shape()),
                })
                .collect();
        }
        self.step_count += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for ((p, g), &lr) in params.iter_mut().zip(grads).zip(lrs) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let AdamSettings { beta1, beta2, eps } = self.adam;
                let t = self.step_count as f64;
                let bc1 = 1.0 - beta1.powf(t);
                let bc2 = 1.0 - beta2.powf(t);
                for (((p, g), &lr), mom) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(lrs)
                    .zip(&mut self.moments)
                {
                    for i in 0..g.len() {
                        let gv = g.data()[i];
                        let m = &mut mom.m.data_mut()[i];
                        *m = beta1 * *m + (1.0 - beta1) * gv;
                        let mhat = *m / bc1;
                        let v = &mut mom.v.data_mut()[i];
                        *v = beta2 * *v + (1.0 - beta2) * gv * gv;
                        let vhat = *v / bc2;
                        p.data_mut()[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Scale all gradients so the global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm. Applying twice equals applying once (up to
/// one rescale by a factor within an ulp of 1).
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "max_norm must be positive, got {max_norm}"
        )));
    }
    let norm = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(factor);
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sgd_basic_step() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd);
        let mut params = vec![Tensor::scalar(1.0)];
        let grads = vec![Tensor::scalar(1.0)];
        opt.step(&mut params, &grads, &[0.1]).unwrap();
        assert!((params[0].data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut opt = Optimizer::new(kind);
            let mut params = vec![Tensor::filled(&[3], 0.7)];
            let grads = vec![Tensor::zeros(&[3])];
            opt.step(&mut params, &grads, &[0.5]).unwrap();
            assert_eq!(params[0].data(), &[0.7, 0.7, 0.7]);
        }
    }

    #[test]
    fn adam_first_step_moves_by_about_lr_against_gradient_sign() {
        // Closed form: with m_hat = g and v_hat = g^2, the first update is
        // lr * g / (|g| + eps) which is lr * sign(g) up to eps rounding.
        let lr = 0.05;
        for &g in &[0.3, -1.7, 2.0e-3] {
            let mut opt = Optimizer::new(OptimizerKind::Adam);
            let mut params = vec![Tensor::scalar(1.0)];
            let grads = vec![Tensor::scalar(g)];
            opt.step(&mut params, &grads, &[lr]).unwrap();
            let moved = params[0].data()[0] - 1.0;
            let expect = -lr * g / (g.abs() + 1e-8);
            assert!((moved - expect).abs() < 1e-12, "g={g}, moved={moved}");
            assert!(moved.signum() == -g.signum());
            assert!((moved.abs() - lr).abs() < 1e-4 * lr);
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut opt = Optimizer::new(OptimizerKind::Adam);
            let mut params = vec![Tensor::from_fn(&[8], |_| rng.gen_range(-1.0..1.0))];
            for _ in 0..25 {
                let grads = vec![Tensor::from_fn(&[8], |_| rng.gen_range(-1.0..1.0))];
                opt.step(&mut params, &grads, &[1e-3]).unwrap();
            }
            params[0].data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clip_scales_to_exact_bound() {
        // Norm-1 gradients clipped at the configured 5e-5 bound.
        let mut grads = vec![Tensor::from_vec(&[2], vec![0.6, 0.8]).unwrap()];
        let pre = clip_gradients(&mut grads, 5e-5).unwrap();
        assert!((pre - 1.0).abs() < 1e-12);
        let post = grads[0].l2_norm();
        assert!((post - 5e-5).abs() < 1e-12 * 5e-5);
    }

    #[test]
    fn clip_below_threshold_is_identity() {
        let mut grads = vec![Tensor::from_vec(&[2], vec![3e-6, 4e-6]).unwrap()];
        clip_gradients(&mut grads, 5e-5).unwrap();
        assert_eq!(grads[0].data(), &[3e-6, 4e-6]);
    }

    #[test]
    fn clip_post_norm_is_min_of_norm_and_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for case in 0..50 {
            let mut grads = vec![
                Tensor::from_fn(&[5], |_| rng.gen_range(-1.0..1.0)),
                Tensor::from_fn(&[3, 2], |_| rng.gen_range(-1.0..1.0)),
            ];
            let max_norm = rng.gen_range(0.01..3.0);
            let pre = clip_gradients(&mut grads, max_norm).unwrap();
            let post = (grads[0].l2_norm().powi(2) + grads[1].l2_norm().powi(2)).sqrt();
            let expect = pre.min(max_norm);
            assert!(
                (post - expect).abs() < 1e-12 * expect.max(1.0),
                "case {case}: post {post}, expect {expect}"
            );
        }
    }

    #[test]
    fn clip_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut grads = vec![Tensor::from_fn(&[16], |_| rng.gen_range(-2.0..2.0))];
        clip_gradients(&mut grads, 0.25).unwrap();
        let once = grads[0].data().to_vec();
        clip_gradients(&mut grads, 0.25).unwrap();
        for (a, b) in once.iter().zip(grads[0].data()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-30));
        }
    }
}
