//! SGD with momentum and L2 weight decay, and a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::model::{Gradients, MaskableModel, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    #[serde(skip)]
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Tensor>) {
        self.velocity = velocity;
    }

    /// `v <- mu v + (g + wd w)`, `w <- w - lr v`.
    pub fn step(&mut self, model: &mut MaskableModel, grads: &Gradients, lr: f32) {
        if self.velocity.is_empty() {
            self.velocity = grads.0.iter().map(|g| Tensor::zeros(g.raw_dim())).collect();
        }
        for ((param, g), v) in model.params_mut().iter_mut().zip(&grads.0).zip(&mut self.velocity) {
            let w = &mut param.value;
            ndarray::Zip::from(&mut *w).and(g).and(&mut *v).for_each(|w, &g, v| {
                *v = self.momentum * *v + g + self.weight_decay * *w;
                *w -= lr * *v;
            });
        }
    }
}

/// Cosine decay from `base` to zero over `total` steps, evaluated at the
/// zero-based step `t`.
pub fn cosine_lr(base: f64, t: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = (t.min(total) as f64) / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use crate::topology::ModelTopology;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 100), 0.1);
        assert!((cosine_lr(0.1, 50, 100) - 0.05).abs() < 1e-12);
        assert!(cosine_lr(0.1, 100, 100).abs() < 1e-12);
        assert!(cosine_lr(0.1, 30, 100) > cosine_lr(0.1, 31, 100));
    }

    #[test]
    fn momentum_accumulates() {
        let t = ModelTopology::residual(
            crate::topology::InputShape {
                height: 4,
                width: 4,
                channels: 1,
            },
            &[2],
            1,
            2,
            1,
        )
        .unwrap();
        let mut model = MaskableModel::new(t, &mut SeedTree::new(0).stream("init")).unwrap();
        let w0 = model.params()[0].value.clone();
        let mut grads = Gradients::zeros_like(&model);
        grads.0[0].fill(1.0);
        let mut opt = Sgd::new(0.9, 0.0);
        opt.step(&mut model, &grads, 0.1);
        opt.step(&mut model, &grads, 0.1);
        // two steps: 0.1 * 1 + 0.1 * 1.9
        let moved = &w0 - &model.params()[0].value;
        assert!(moved.iter().all(|d| (d - 0.29).abs() < 1e-6));
    }
}
