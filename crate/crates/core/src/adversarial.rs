//! L-infinity PGD, adversarial EWS objectives and robust evaluation.
//!
//! Attacks always run the full model in eval mode. After every step the
//! iterate is clamped to the epsilon box around the clean input and to the
//! pixel bounds; the box edges are rounded inwards so that
//! `|x' - x| <= epsilon` holds exactly when measured in double precision.

use ndarray::{s, Array2, Array4, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{accuracy, correct_count, cross_entropy, cross_entropy_with_grad, kl_divergence, kl_with_grads};
use crate::model::{ForwardOptions, Gradients, MaskableModel, Mode};
use crate::rng::SeedTree;
use crate::subnet::SubnetSpec;
use crate::train::LossParts;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub steps: usize,
    /// Defaults to `epsilon / 4`.
    pub step_size: Option<f64>,
    pub random_start: bool,
    pub pixel_min: f32,
    pub pixel_max: f32,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            steps: 10,
            step_size: None,
            random_start: true,
            pixel_min: 0.0,
            pixel_max: 1.0,
        }
    }
}

impl AttackConfig {
    pub fn pgd(epsilon: f64, steps: usize) -> Self {
        Self {
            epsilon,
            steps,
            ..Self::default()
        }
    }

    pub fn step_size(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / 4.0)
    }

    pub fn id(&self) -> String {
        format!("pgd{}", self.steps)
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            v.push(format!("epsilon must be finite and non-negative, got {}", self.epsilon));
        }
        if self.steps == 0 {
            v.push("attack steps must be at least 1".into());
        }
        let a = self.step_size();
        if self.epsilon > 0.0 && !(a > 0.0 && a <= self.epsilon) {
            v.push(format!("step size {a} must lie in (0, epsilon]"));
        }
        if self.pixel_min >= self.pixel_max {
            v.push("pixel bounds are empty".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// Largest f32 whose distance above `x` is at most `eps`, and the smallest
/// one below.
fn box_edges(x: f32, eps: f64) -> (f32, f32) {
    let xd = x as f64;
    let mut hi = (xd + eps) as f32;
    if hi as f64 - xd > eps {
        hi = hi.next_down();
    }
    let mut lo = (xd - eps) as f32;
    if xd - lo as f64 > eps {
        lo = lo.next_up();
    }
    (lo, hi)
}

fn project(adv: &mut Array4<f32>, x: &Array4<f32>, cfg: &AttackConfig) {
    Zip::from(adv).and(x).for_each(|a, &x0| {
        let (lo, hi) = box_edges(x0, cfg.epsilon);
        *a = a.clamp(lo, hi).clamp(cfg.pixel_min, cfg.pixel_max);
    });
}

/// Signed-gradient ascent inside the epsilon box, driven by `grad`, the
/// gradient of the attacked objective w.r.t. the current iterate. Steps whose
/// gradient is not finite are skipped.
pub fn pgd_maximize<R, F>(x: &Array4<f32>, cfg: &AttackConfig, rng: &mut R, mut grad: F) -> Result<Array4<f32>>
where
    R: Rng + ?Sized,
    F: FnMut(&Array4<f32>) -> Result<Array4<f32>>,
{
    cfg.validate()?;
    let mut adv = x.clone();
    if cfg.epsilon == 0.0 {
        return Ok(adv);
    }
    if cfg.random_start {
        let eps = cfg.epsilon as f32;
        adv.mapv_inplace(|v| v + rng.random_range(-eps..=eps));
        project(&mut adv, x, cfg);
    }
    let step = cfg.step_size() as f32;
    for i in 0..cfg.steps {
        let g = grad(&adv)?;
        if g.iter().any(|v| !v.is_finite()) {
            log::warn!("PGD step {i}: non-finite gradient, step skipped");
            continue;
        }
        Zip::from(&mut adv).and(&g).for_each(|a, &gv| {
            if gv > 0.0 {
                *a += step;
            } else if gv < 0.0 {
                *a -= step;
            }
        });
        project(&mut adv, x, cfg);
    }
    Ok(adv)
}

/// PGD on the cross-entropy of the full model.
pub fn pgd_attack<R: Rng + ?Sized>(
    model: &MaskableModel,
    x: &Array4<f32>,
    y: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Array4<f32>> {
    pgd_maximize(x, cfg, rng, |adv| {
        let pass = model.forward(adv, ForwardOptions::new(Mode::Eval))?;
        let (_, d) = cross_entropy_with_grad(&pass.logits, y)?;
        Ok(model.input_gradient(&pass, &d))
    })
}

/// The TRADES inner maximisation: PGD on `KL(M(x) || M(x'))` with the clean
/// prediction held fixed.
pub fn trades_attack<R: Rng + ?Sized>(
    model: &MaskableModel,
    x: &Array4<f32>,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Array4<f32>> {
    let clean = model.forward(x, ForwardOptions::new(Mode::Eval))?.logits;
    pgd_maximize(x, cfg, rng, |adv| {
        let pass = model.forward(adv, ForwardOptions::new(Mode::Eval))?;
        let g = kl_with_grads(&clean, &pass.logits)?;
        Ok(model.input_gradient(&pass, &g.student))
    })
}

/// `CE(M(x'), y) + lambda * KL(M(x') || a(x'))` on freshly attacked inputs,
/// evaluated in the model's current mode.
pub fn adv_ews_loss<R: Rng + ?Sized>(
    model: &MaskableModel,
    subnet: Option<&SubnetSpec>,
    x: &Array4<f32>,
    y: &[usize],
    lambda: f64,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<LossParts> {
    let adv = pgd_attack(model, x, y, cfg, rng)?;
    crate::train::ews_loss(model, subnet, &adv, y, lambda)
}

/// Minus the subnet's accuracy on adversarial inputs.
pub fn adv_controller_reward(model: &MaskableModel, spec: &SubnetSpec, x_adv: &Array4<f32>, y: &[usize]) -> Result<f64> {
    let pass = model.forward(x_adv, ForwardOptions::new(Mode::Eval).masked(spec))?;
    Ok(crate::controller::weak_reward(accuracy(&pass.logits, y)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TradesParts {
    pub total: f64,
    pub ce: f64,
    pub robust_kl: f64,
    pub distill_kl: f64,
}

/// `CE(M(x), y) + beta * KL(M(x) || M(x')) + lambda * KL(M(x) || a(x))` in the
/// model's current mode, for a given `x'`.
pub fn trades_ews_loss(
    model: &MaskableModel,
    subnet: Option<&SubnetSpec>,
    x: &Array4<f32>,
    x_adv: &Array4<f32>,
    y: &[usize],
    beta: f64,
    lambda: f64,
) -> Result<TradesParts> {
    let clean = model.forward_full(x)?;
    let ce = cross_entropy(&clean, y)?;
    let robust_kl = kl_divergence(&clean, &model.forward_full(x_adv)?)?;
    let distill_kl = match subnet {
        Some(spec) if lambda > 0.0 => kl_divergence(&clean, &model.forward_masked(x, spec)?)?,
        _ => 0.0,
    };
    Ok(TradesParts {
        total: ce + beta * robust_kl + lambda * distill_kl,
        ce,
        robust_kl,
        distill_kl,
    })
}

/// Train-mode gradients of [`trades_ews_loss`]. The robustness term
/// differentiates through both of its arguments; the distillation term only
/// through the subnet. Batch statistics of the clean and adversarial full
/// passes are folded into the running statistics, in that order.
pub fn trades_ews_gradients(
    model: &mut MaskableModel,
    subnet: Option<&SubnetSpec>,
    x: &Array4<f32>,
    x_adv: &Array4<f32>,
    y: &[usize],
    beta: f64,
    lambda: f64,
) -> Result<(LossParts, Gradients)> {
    let clean = model.forward(x, ForwardOptions::new(Mode::Train))?;
    let adv = model.forward(x_adv, ForwardOptions::new(Mode::Train))?;
    let (ce, mut d_clean) = cross_entropy_with_grad(&clean.logits, y)?;
    let robust = kl_with_grads(&clean.logits, &adv.logits)?;
    d_clean.scaled_add(beta, &robust.teacher);
    let mut grads = Gradients::zeros_like(model);
    model.backward(&clean, &d_clean, &mut grads, false);
    model.backward(&adv, &(robust.student * beta), &mut grads, false);
    let mut distill = 0.0;
    if let Some(spec) = subnet.filter(|_| lambda > 0.0) {
        let sub = model.forward(x, ForwardOptions::new(Mode::Train).masked(spec))?;
        let g = kl_with_grads(&clean.logits, &sub.logits)?;
        distill = g.value;
        model.backward(&sub, &(g.student * lambda), &mut grads, false);
    }
    model.commit_running_stats(&clean);
    model.commit_running_stats(&adv);
    let robust_part = beta * robust.value;
    Ok((
        LossParts {
            total: ce + robust_part + lambda * distill,
            ce,
            kl: distill,
        },
        grads,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustReport {
    pub attack_id: String,
    pub epsilon: f64,
    pub clean_error: f64,
    pub robust_error: f64,
    /// Largest `|x' - x|` over every generated example, in double precision.
    pub max_perturbation: f64,
    /// Whether every generated pixel lay within the pixel bounds.
    pub within_pixel_bounds: bool,
}

/// Clean and PGD error (percent) of the full model or a subnet. The attack
/// always targets the full model; each chunk draws its random start from its
/// own stream of `seeds`.
pub fn evaluate_robust_subnet(
    model: &MaskableModel,
    split: &crate::data::Split,
    cfg: &AttackConfig,
    seeds: &SeedTree,
    subnet: Option<&SubnetSpec>,
) -> Result<RobustReport> {
    const CHUNK: usize = 128;
    let n = split.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut clean_correct = 0;
    let mut robust_correct = 0;
    let mut max_perturbation = 0.0f64;
    let mut within = true;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let x = split.images.slice(s![start..end, .., .., ..]).to_owned();
        let y = &split.labels[start..end];
        let adv = pgd_attack(model, &x, y, cfg, &mut seeds.step_stream("chunk", start as u64))?;
        Zip::from(&adv).and(&x).for_each(|&a, &x0| {
            max_perturbation = max_perturbation.max((a as f64 - x0 as f64).abs());
            within &= a >= cfg.pixel_min && a <= cfg.pixel_max;
        });
        let mut opts = ForwardOptions::new(Mode::Eval);
        opts.subnet = subnet;
        let logits: Array2<f64> = model.forward(&x, opts)?.logits;
        clean_correct += correct_count(&logits, y);
        let mut opts = ForwardOptions::new(Mode::Eval);
        opts.subnet = subnet;
        robust_correct += correct_count(&model.forward(&adv, opts)?.logits, y);
        start = end;
    }
    Ok(RobustReport {
        attack_id: cfg.id(),
        epsilon: cfg.epsilon,
        clean_error: 100.0 * (1.0 - clean_correct as f64 / n as f64),
        robust_error: 100.0 * (1.0 - robust_correct as f64 / n as f64),
        max_perturbation,
        within_pixel_bounds: within,
    })
}

pub fn evaluate_robust(
    model: &MaskableModel,
    split: &crate::data::Split,
    cfg: &AttackConfig,
    seeds: &SeedTree,
) -> Result<RobustReport> {
    evaluate_robust_subnet(model, split, cfg, seeds, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{InputShape, ModelTopology};

    fn tiny() -> (MaskableModel, Array4<f32>, Vec<usize>) {
        let t = ModelTopology::residual(
            InputShape {
                height: 6,
                width: 6,
                channels: 3,
            },
            &[4, 8],
            1,
            3,
            2,
        )
        .unwrap();
        let model = MaskableModel::new(t, &mut SeedTree::new(2).stream("i")).unwrap();
        let mut rng = SeedTree::new(3).stream("x");
        let x = Array4::from_shape_fn((5, 3, 6, 6), |_| rng.random::<f32>());
        (model, x, vec![0, 1, 2, 1, 0])
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let (model, x, y) = tiny();
        let adv = pgd_attack(&model, &x, &y, &AttackConfig::pgd(0.0, 5), &mut SeedTree::new(1).stream("a")).unwrap();
        assert_eq!(adv, x);
    }

    #[test]
    fn outputs_are_feasible_and_increase_loss() {
        let (model, x, y) = tiny();
        let cfg = AttackConfig::pgd(8.0 / 255.0, 10);
        let adv = pgd_attack(&model, &x, &y, &cfg, &mut SeedTree::new(1).stream("a")).unwrap();
        for (&a, &x0) in adv.iter().zip(&x) {
            assert!((a as f64 - x0 as f64).abs() <= cfg.epsilon);
            assert!((0.0..=1.0).contains(&a));
        }
        let mut eval = model.clone();
        eval.set_mode(Mode::Eval);
        let before = cross_entropy(&eval.forward_full(&x).unwrap(), &y).unwrap();
        let after = cross_entropy(&eval.forward_full(&adv).unwrap(), &y).unwrap();
        assert!(after > before, "{before} -> {after}");
    }

    #[test]
    fn box_edges_are_exact() {
        let mut rng = SeedTree::new(4).stream("e");
        for _ in 0..10_000 {
            let x: f32 = rng.random();
            let eps = rng.random_range(0.0..0.1);
            let (lo, hi) = box_edges(x, eps);
            assert!(hi as f64 - x as f64 <= eps && x as f64 - lo as f64 <= eps);
            assert!(hi.next_up() as f64 - x as f64 > eps);
        }
    }

    fn scalar(v: f32) -> Array4<f32> {
        Array4::from_elem((1, 1, 1, 1), v)
    }

    #[test]
    fn one_dimensional_sign_ascent() {
        let cfg = AttackConfig {
            epsilon: 0.1,
            steps: 1,
            step_size: Some(0.1),
            random_start: false,
            ..AttackConfig::default()
        };
        let x = scalar(0.5);
        let c = 0.9f32;
        let mut rng = SeedTree::new(0).stream("r");
        // ascent on -|x' - c| moves towards c: the face nearest c
        let toward = pgd_maximize(&x, &cfg, &mut rng, |a| Ok(a.mapv(|v| -(v - c).signum()))).unwrap();
        assert!((toward[(0, 0, 0, 0)] - 0.6).abs() < 1e-6);
        // ascent on |x' - c| moves away from c: the opposite face
        let away = pgd_maximize(&x, &cfg, &mut rng, |a| Ok(a.mapv(|v| (v - c).signum()))).unwrap();
        assert!((away[(0, 0, 0, 0)] - 0.4).abs() < 1e-6);
    }

    #[test]
    fn nonfinite_gradients_skip_the_step() {
        let cfg = AttackConfig {
            epsilon: 0.1,
            steps: 3,
            random_start: false,
            ..AttackConfig::default()
        };
        let x = scalar(0.5);
        let adv = pgd_maximize(&x, &cfg, &mut SeedTree::new(0).stream("r"), |a| Ok(a.mapv(|_| f32::NAN))).unwrap();
        assert_eq!(adv, x);
    }

    #[test]
    fn reductions() {
        let (mut model, x, y) = tiny();
        model.set_mode(Mode::Eval);
        let cfg = AttackConfig::pgd(4.0 / 255.0, 3);
        let spec = SubnetSpec::full(model.topology());
        // full-width subnet: no distillation term
        let parts = adv_ews_loss(&model, Some(&spec), &x, &y, 1.0, &cfg, &mut SeedTree::new(5).stream("a")).unwrap();
        assert_eq!(parts.kl, 0.0);
        // zero epsilon: the clean objective
        let clean = crate::train::ews_loss(&model, None, &x, &y, 0.0).unwrap();
        let zero = adv_ews_loss(&model, None, &x, &y, 0.0, &AttackConfig::pgd(0.0, 3), &mut SeedTree::new(5).stream("a"))
            .unwrap();
        assert_eq!(clean, zero);
        // x' = x: no robustness term
        let t = trades_ews_loss(&model, None, &x, &x, &y, 6.0, 0.0).unwrap();
        assert_eq!(t.robust_kl, 0.0);
        assert_eq!(t.total, t.ce);
    }

    #[test]
    fn reward_of_fooled_full_model_is_zero() {
        let (mut model, x, _) = tiny();
        model.set_mode(Mode::Eval);
        let spec = SubnetSpec::full(model.topology());
        let preds = crate::model::argmax_rows(&model.forward_full(&x).unwrap());
        // labels that disagree with every prediction
        let wrong: Vec<usize> = preds.iter().map(|p| (p + 1) % 3).collect();
        assert_eq!(adv_controller_reward(&model, &spec, &x, &wrong).unwrap(), 0.0);
        assert_eq!(adv_controller_reward(&model, &spec, &x, &preds).unwrap(), -1.0);
    }

    #[test]
    fn trades_gradients_match_finite_differences() {
        let (mut model, x, y) = tiny();
        let mut rng = SeedTree::new(9).stream("p");
        let x_adv = x.mapv(|v| (v + rng.random_range(-0.03f32..0.03)).clamp(0.0, 1.0));
        let spec = crate::subnet::sample_uniform_subnet(model.topology(), 0.7, &mut rng);
        let (beta, lambda) = (2.0, 0.5);
        let (parts, grads) = trades_ews_gradients(&mut model.clone(), Some(&spec), &x, &x_adv, &y, beta, lambda).unwrap();
        model.set_mode(Mode::Train);
        let value = trades_ews_loss(&model, Some(&spec), &x, &x_adv, &y, beta, lambda).unwrap();
        assert!((value.total - parts.total).abs() < 1e-9);

        // the distillation target is fixed, so differentiate only CE + beta KL
        // plus lambda KL with the teacher frozen at its current value
        let teacher = model.forward_full(&x).unwrap();
        let objective = |m: &MaskableModel| -> f64 {
            let c = m.forward_full(&x).unwrap();
            let a = m.forward_full(&x_adv).unwrap();
            let s = m.forward_masked(&x, &spec).unwrap();
            cross_entropy(&c, &y).unwrap()
                + beta * kl_divergence(&c, &a).unwrap()
                + lambda * kl_divergence(&teacher, &s).unwrap()
        };
        let h = 1e-3f32;
        let pi = model.params().iter().position(|p| p.name.ends_with("layers.0.weight")).unwrap();
        for idx in [0usize, 7, 19] {
            let orig = model.params()[pi].value.as_slice().unwrap()[idx];
            model.params_mut()[pi].value.as_slice_mut().unwrap()[idx] = orig + h;
            let plus = objective(&model);
            model.params_mut()[pi].value.as_slice_mut().unwrap()[idx] = orig - h;
            let minus = objective(&model);
            model.params_mut()[pi].value.as_slice_mut().unwrap()[idx] = orig;
            let fd = (plus - minus) / (2.0 * h as f64);
            let an = grads.0[pi].as_slice().unwrap()[idx] as f64;
            assert!((fd - an).abs() <= 2e-3 * (1.0 + fd.abs()), "{fd} vs {an}");
        }
    }
}
