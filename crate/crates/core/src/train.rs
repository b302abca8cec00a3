//! The EWS training loop and its baselines.
//!
//! Every model step minimises `CE(M(x), y) + lambda * KL(M(x) || a(x))`, where
//! `a` is one subnet drawn from the configured source and the full network's
//! prediction is a fixed target for the KL term. With the controller as
//! source, the policy is updated first on steps `t` with `t % K == 0`
//! (steps count from 1). Vanilla training is the `lambda = 0` configuration;
//! the dropout baseline is vanilla training with channel dropout after each
//! block.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::adversarial::{self, AttackConfig};
use crate::checkpoint::Checkpoint;
use crate::controller::{self, ControllerPolicy, ControllerStepReport};
use crate::data::{augmentation_by_name, epoch_batches, Augmentation, Dataset, Split};
use crate::error::{Error, Result};
use crate::loss::{correct_count, cross_entropy, cross_entropy_with_grad, kl_divergence, kl_with_grads};
use crate::metrics::{Metric, MetricsLog, MetricsRecord};
use crate::model::{predict, Dropout, ForwardOptions, Gradients, MaskableModel, Mode};
use crate::optim::{cosine_lr, Sgd};
use crate::rng::SeedTree;
use crate::subnet::{sample_uniform_subnet, subnet_from_l1, SubnetSpec};
use crate::topology::ModelTopology;

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubnetSource {
    Controller,
    UniformRandom,
    L1,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialMode {
    None,
    Pgd,
    Trades,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the distillation term.
    pub lambda: f64,
    /// Controller update interval K.
    pub interval: u64,
    /// Subnet width rho.
    pub width: f64,
    pub batch_size: usize,
    /// Subnets scored per controller update.
    pub controller_batch: usize,
    pub lr: f64,
    pub controller_lr: f64,
    pub controller_hidden: usize,
    pub epochs: u64,
    pub seed: u64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Defaults to `controller` when `lambda > 0` and `none` otherwise.
    pub subnet_source: Option<SubnetSource>,
    pub dropout_rate: f64,
    pub augmentation: String,
    pub adversarial: AdversarialMode,
    pub epsilon: f64,
    pub attack_steps: usize,
    pub eval_attack_steps: usize,
    pub attack_step_size: Option<f64>,
    pub trades_beta: f64,
    /// Loss components are logged every this many steps.
    pub log_every: u64,
    /// Caps the validation samples used by per-epoch evaluation.
    pub eval_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            interval: 10,
            width: 0.7,
            batch_size: 64,
            controller_batch: 8,
            lr: 0.05,
            controller_lr: 3.5e-4,
            controller_hidden: controller::DEFAULT_HIDDEN,
            epochs: 15,
            seed: 0,
            weight_decay: 5e-4,
            momentum: 0.9,
            subnet_source: None,
            dropout_rate: 0.0,
            augmentation: "none".into(),
            adversarial: AdversarialMode::None,
            epsilon: 8.0 / 255.0,
            attack_steps: 10,
            eval_attack_steps: 20,
            attack_step_size: None,
            trades_beta: 6.0,
            log_every: 50,
            eval_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn source(&self) -> SubnetSource {
        self.subnet_source.unwrap_or(if self.lambda > 0.0 {
            SubnetSource::Controller
        } else {
            SubnetSource::None
        })
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            v.push(format!("lambda must be a finite non-negative number, got {}", self.lambda));
        }
        if self.interval == 0 {
            v.push("interval (K) must be at least 1".into());
        }
        if !(self.width > 0.0 && self.width <= 1.0) {
            v.push(format!("width must lie in (0, 1], got {}", self.width));
        }
        if (self.source() == SubnetSource::None) != (self.lambda == 0.0) {
            v.push(format!(
                "subnet_source {:?} is inconsistent with lambda {} (none exactly when lambda = 0)",
                self.source(),
                self.lambda
            ));
        }
        if self.batch_size < 2 {
            v.push("batch_size must be at least 2".into());
        }
        if self.controller_batch == 0 {
            v.push("controller_batch must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            v.push(format!("dropout_rate must lie in [0, 1], got {}", self.dropout_rate));
        }
        if self.lr < 0.0 || self.controller_lr < 0.0 {
            v.push("learning rates must be non-negative".into());
        }
        if self.log_every == 0 {
            v.push("log_every must be at least 1".into());
        }
        if self.adversarial == AdversarialMode::Trades && self.trades_beta <= 0.0 {
            v.push("trades_beta must be positive".into());
        }
        if let Err(Error::Config(mut a)) = self.train_attack().validate() {
            v.append(&mut a);
        }
        if let Err(e) = augmentation_by_name(&self.augmentation) {
            v.push(e.to_string());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn train_attack(&self) -> AttackConfig {
        AttackConfig {
            epsilon: self.epsilon,
            steps: self.attack_steps,
            step_size: self.attack_step_size,
            ..AttackConfig::default()
        }
    }

    pub fn eval_attack(&self) -> AttackConfig {
        AttackConfig {
            steps: self.eval_attack_steps,
            ..self.train_attack()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub kl: f64,
}

/// The EWS objective on a batch, evaluated in the model's current mode. The
/// KL term is skipped when `lambda` is zero or there is no subnet.
pub fn ews_loss(
    model: &MaskableModel,
    subnet: Option<&SubnetSpec>,
    x: &Array4<f32>,
    y: &[usize],
    lambda: f64,
) -> Result<LossParts> {
    let full = model.forward_full(x)?;
    let ce = cross_entropy(&full, y)?;
    let kl = match subnet {
        Some(spec) if lambda > 0.0 => kl_divergence(&full, &model.forward_masked(x, spec)?)?,
        _ => 0.0,
    };
    Ok(LossParts {
        total: ce + lambda * kl,
        ce,
        kl,
    })
}

/// Train-mode gradients of [`ews_loss`]. The full pass's batch statistics
/// are folded into the running statistics; the subnet pass leaves them alone.
pub fn ews_gradients(
    model: &mut MaskableModel,
    subnet: Option<&SubnetSpec>,
    x: &Array4<f32>,
    y: &[usize],
    lambda: f64,
    dropout: Option<Dropout<'_>>,
) -> Result<(LossParts, Gradients)> {
    let mut opts = ForwardOptions::new(Mode::Train);
    if let Some(d) = dropout {
        opts = opts.with_dropout(d);
    }
    let full = model.forward(x, opts)?;
    let (ce, dce) = cross_entropy_with_grad(&full.logits, y)?;
    let mut grads = Gradients::zeros_like(model);
    model.backward(&full, &dce, &mut grads, false);
    let mut kl = 0.0;
    if let Some(spec) = subnet.filter(|_| lambda > 0.0) {
        let sub = model.forward(x, ForwardOptions::new(Mode::Train).masked(spec))?;
        let g = kl_with_grads(&full.logits, &sub.logits)?;
        kl = g.value;
        model.backward(&sub, &(g.student * lambda), &mut grads, false);
    }
    model.commit_running_stats(&full);
    Ok((
        LossParts {
            total: ce + lambda * kl,
            ce,
            kl,
        },
        grads,
    ))
}

/// Test error (percent) of the full model or a subnet, in eval mode.
pub fn clean_error(model: &MaskableModel, split: &Split, subnet: Option<&SubnetSpec>) -> Result<f64> {
    Ok(100.0 * (1.0 - clean_accuracy(model, split, subnet)?))
}

pub fn clean_accuracy(model: &MaskableModel, split: &Split, subnet: Option<&SubnetSpec>) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let logits = predict(model, &split.images, subnet, 256)?;
    Ok(correct_count(&logits, &split.labels) as f64 / split.len() as f64)
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub step: u64,
    pub loss: LossParts,
    pub lr: f64,
    pub subnet: Option<SubnetSpec>,
    pub controller: Option<ControllerStepReport>,
}

pub struct Trainer {
    config: TrainConfig,
    run_id: String,
    model: MaskableModel,
    policy: Option<ControllerPolicy>,
    optimizer: Sgd,
    seeds: SeedTree,
    augmentation: Box<dyn Augmentation>,
    step: u64,
    total_steps: u64,
    controller_updates: u64,
    train_seconds: f64,
    best: Option<(f64, u64)>,
}

impl Trainer {
    /// A fresh model (and policy, when the controller is the subnet source)
    /// initialised from the config's seed. `total_steps` sets the horizon of
    /// the cosine schedule.
    pub fn new(config: TrainConfig, topology: ModelTopology, total_steps: u64) -> Result<Self> {
        config.validate()?;
        let seeds = SeedTree::new(config.seed);
        let model = MaskableModel::new(topology, &mut seeds.stream("init"))?;
        let policy = (config.source() == SubnetSource::Controller).then(|| {
            ControllerPolicy::new(
                model.topology(),
                config.width,
                config.controller_hidden,
                &mut seeds.stream("controller-init"),
            )
        });
        let augmentation = augmentation_by_name(&config.augmentation)?;
        Ok(Self {
            optimizer: Sgd::new(config.momentum as f32, config.weight_decay as f32),
            config,
            run_id: "run".into(),
            model,
            policy,
            seeds,
            augmentation,
            step: 0,
            total_steps,
            controller_updates: 0,
            train_seconds: 0.0,
            best: None,
        })
    }

    /// Restores model, policy, optimizer state and counters from a
    /// checkpoint written by [`Trainer::checkpoint`].
    pub fn from_checkpoint(config: TrainConfig, ckpt: Checkpoint, total_steps: u64) -> Result<Self> {
        let mut trainer = Self::new(config, ckpt.model.topology().clone(), total_steps)?;
        trainer.model = ckpt.model;
        trainer.step = ckpt.step;
        if !ckpt.velocity.is_empty() {
            trainer.optimizer.set_velocity(ckpt.velocity);
        }
        if let (Some(state), Some(_)) = (&ckpt.policy, &trainer.policy) {
            trainer.policy = Some(ControllerPolicy::from_state(trainer.model.topology(), state)?);
        }
        let meta = &ckpt.meta;
        if let Some(id) = meta["run_id"].as_str() {
            trainer.run_id = id.to_string();
        }
        trainer.controller_updates = meta["controller_updates"].as_u64().unwrap_or(0);
        trainer.train_seconds = meta["train_seconds"].as_f64().unwrap_or(0.0);
        if let (Some(v), Some(s)) = (meta["best_value"].as_f64(), meta["best_step"].as_u64()) {
            trainer.best = Some((v, s));
        }
        Ok(trainer)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            model: self.model.clone(),
            step: self.step,
            config: Some(serde_json::to_value(&self.config)?),
            meta: serde_json::json!({
                "run_id": self.run_id,
                "controller_updates": self.controller_updates,
                "train_seconds": self.train_seconds,
                "best_value": self.best.map(|b| b.0),
                "best_step": self.best.map(|b| b.1),
            }),
            velocity: self.optimizer.velocity().to_vec(),
            policy: self.policy.as_ref().map(|p| p.state()),
        })
    }

    pub fn with_run_id(mut self, run_id: impl Into<String>) -> Self {
        self.run_id = run_id.into();
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &MaskableModel {
        &self.model
    }

    pub fn into_model(self) -> MaskableModel {
        self.model
    }

    pub fn policy(&self) -> Option<&ControllerPolicy> {
        self.policy.as_ref()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn controller_updates(&self) -> u64 {
        self.controller_updates
    }

    /// Seconds spent inside [`Trainer::train_step`] so far.
    pub fn train_seconds(&self) -> f64 {
        self.train_seconds
    }

    /// Best validation metric and the step it was reached at.
    pub fn best(&self) -> Option<(f64, u64)> {
        self.best
    }

    /// One model step on `(x, y)`, preceded by a controller update when due.
    pub fn train_step(&mut self, x: &Array4<f32>, y: &[usize]) -> Result<StepReport> {
        let started = Instant::now();
        let t = self.step + 1;
        let cfg = &self.config;
        let source = cfg.source();

        let x_adv = match cfg.adversarial {
            AdversarialMode::None => None,
            AdversarialMode::Pgd => Some(adversarial::pgd_attack(
                &self.model,
                x,
                y,
                &cfg.train_attack(),
                &mut self.seeds.step_stream("attack", t),
            )?),
            AdversarialMode::Trades => Some(adversarial::trades_attack(
                &self.model,
                x,
                &cfg.train_attack(),
                &mut self.seeds.step_stream("attack", t),
            )?),
        };

        let mut controller_report = None;
        if source == SubnetSource::Controller && t % cfg.interval == 0 {
            let policy = self.policy.as_mut().expect("controller source has a policy");
            let scored = x_adv.as_ref().unwrap_or(x);
            let report = controller::controller_step(
                policy,
                &self.model,
                scored,
                y,
                cfg.controller_batch,
                cfg.controller_lr,
                &mut self.seeds.step_stream("controller", t),
            )?;
            self.controller_updates += 1;
            controller_report = Some(report);
        }

        let mut rng = self.seeds.step_stream("subnet", t);
        let subnet = match source {
            SubnetSource::Controller => Some(self.policy.as_ref().unwrap().sample_subnet(&mut rng).0),
            SubnetSource::UniformRandom => Some(sample_uniform_subnet(self.model.topology(), cfg.width, &mut rng)),
            SubnetSource::L1 => Some(subnet_from_l1(&self.model, cfg.width)),
            SubnetSource::None => None,
        };

        let mut dropout_rng = self.seeds.step_stream("dropout", t);
        let dropout = (cfg.dropout_rate > 0.0).then(|| Dropout {
            rate: cfg.dropout_rate,
            rng: &mut dropout_rng,
        });
        let (loss, grads) = match (cfg.adversarial, &x_adv) {
            (AdversarialMode::Trades, Some(xa)) => adversarial::trades_ews_gradients(
                &mut self.model,
                subnet.as_ref(),
                x,
                xa,
                y,
                cfg.trades_beta,
                cfg.lambda,
            )?,
            (_, xa) => ews_gradients(&mut self.model, subnet.as_ref(), xa.as_ref().unwrap_or(x), y, cfg.lambda, dropout)?,
        };
        let lr = cosine_lr(cfg.lr, t - 1, self.total_steps);
        self.optimizer.step(&mut self.model, &grads, lr as f32);
        self.step = t;
        self.train_seconds += started.elapsed().as_secs_f64();
        Ok(StepReport {
            step: t,
            loss,
            lr,
            subnet,
            controller: controller_report,
        })
    }

    fn augment(&self, x: &mut Array4<f32>, t: u64) {
        let mut rng = self.seeds.step_stream("augment", t);
        for img in x.axis_iter_mut(Axis(0)) {
            self.augmentation.apply(img, &mut rng);
        }
    }

    fn validation_metric(&self, data: &Dataset, log: &mut MetricsLog) -> Result<f64> {
        let val = if data.val.is_empty() { &data.test } else { &data.val };
        let val = match self.config.eval_limit {
            Some(n) => val.head(n),
            None => val.clone(),
        };
        let split = if data.val.is_empty() { "test" } else { "val" };
        let clean = clean_error(&self.model, &val, None)?;
        log.push(MetricsRecord::new(&self.run_id, self.step, split, Metric::CleanError, clean))?;
        if self.config.adversarial == AdversarialMode::None {
            return Ok(clean);
        }
        let report = adversarial::evaluate_robust(
            &self.model,
            &val,
            &self.config.eval_attack(),
            &self.seeds.child("val-attack"),
        )?;
        log.push(
            MetricsRecord::new(&self.run_id, self.step, split, Metric::RobustError, report.robust_error)
                .with_id(report.attack_id.clone()),
        )?;
        Ok(report.robust_error)
    }

    /// Trains until `until_epoch` (or the configured number of epochs),
    /// evaluating and checkpointing at the end of every epoch. Resumes from
    /// the current step, which must lie on an epoch boundary.
    pub fn fit(
        &mut self,
        data: &Dataset,
        log: &mut MetricsLog,
        run_dir: Option<&Path>,
        until_epoch: Option<u64>,
    ) -> Result<()> {
        let n = data.train.len();
        let steps_per_epoch = (n / self.config.batch_size) as u64;
        if steps_per_epoch == 0 {
            return Err(Error::Dataset(format!(
                "{n} training samples do not fill one batch of {}",
                self.config.batch_size
            )));
        }
        if self.step % steps_per_epoch != 0 {
            return Err(Error::Checkpoint(format!(
                "step {} is not on an epoch boundary of {steps_per_epoch}",
                self.step
            )));
        }
        if self.config.epochs == 0 {
            if self.step == 0 && log.records().is_empty() {
                self.validation_metric(data, log)?;
            }
            return Ok(());
        }
        let end = until_epoch.unwrap_or(self.config.epochs).min(self.config.epochs);
        let start = self.step / steps_per_epoch;
        for epoch in start..end {
            for batch in epoch_batches(n, self.config.batch_size, epoch, &self.seeds) {
                let (mut x, y) = data.train.gather(&batch);
                self.augment(&mut x, self.step + 1);
                let report = self.train_step(&x, &y)?;
                if report.step % self.config.log_every == 0 {
                    for (metric, value) in [
                        (Metric::LossTotal, report.loss.total),
                        (Metric::LossCe, report.loss.ce),
                        (Metric::LossKl, report.loss.kl),
                    ] {
                        log.push(MetricsRecord::new(&self.run_id, report.step, "train", metric, value))?;
                    }
                }
                if let Some(c) = &report.controller {
                    log.push(MetricsRecord::new(
                        &self.run_id,
                        report.step,
                        "train",
                        Metric::ControllerMeanAcc,
                        c.mean_accuracy(),
                    ))?;
                }
            }
            let value = self.validation_metric(data, log)?;
            let improved = self.best.is_none_or(|(b, _)| value < b);
            if improved {
                self.best = Some((value, self.step));
            }
            if let Some(dir) = run_dir {
                let ckpt = self.checkpoint()?;
                ckpt.save(&dir.join(LAST_CHECKPOINT))?;
                if improved {
                    ckpt.save(&dir.join(BEST_CHECKPOINT))?;
                }
            }
        }
        if end == self.config.epochs {
            log.push(MetricsRecord::new(&self.run_id, self.step, "train", Metric::WallclockS, self.train_seconds))?;
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub log: MetricsLog,
}

/// Runs (or resumes) a full training run. With a run directory, metrics go
/// to `metrics.jsonl` and checkpoints to `last.ckpt` / `best.ckpt`, and an
/// existing `last.ckpt` is resumed from.
pub fn train(config: TrainConfig, topology: ModelTopology, data: &Dataset, run_dir: Option<&Path>) -> Result<TrainOutcome> {
    train_named(config, topology, data, run_dir, "run", None)
}

/// [`train`] with the run id stamped on metrics records and checkpoints,
/// optionally stopping early after epoch `until_epoch`.
pub fn train_named(
    config: TrainConfig,
    topology: ModelTopology,
    data: &Dataset,
    run_dir: Option<&Path>,
    run_id: &str,
    until_epoch: Option<u64>,
) -> Result<TrainOutcome> {
    let total_steps = config.epochs * (data.train.len() / config.batch_size.max(1)) as u64;
    let (mut trainer, mut log) = match run_dir {
        None => (
            Trainer::new(config, topology, total_steps)?.with_run_id(run_id),
            MetricsLog::in_memory(),
        ),
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let mut log = MetricsLog::open(&dir.join(METRICS_FILE))?;
            let last = dir.join(LAST_CHECKPOINT);
            let trainer = if last.exists() {
                let ckpt = Checkpoint::load(&last)?;
                log.truncate_after(ckpt.step)?;
                Trainer::from_checkpoint(config, ckpt, total_steps)?
            } else {
                log.truncate_after(0)?;
                Trainer::new(config, topology, total_steps)?.with_run_id(run_id)
            };
            (trainer, log)
        }
    };
    trainer.fit(data, &mut log, run_dir, until_epoch)?;
    Ok(TrainOutcome { trainer, log })
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("run_id", &self.run_id)
            .field("step", &self.step)
            .field("controller_updates", &self.controller_updates)
            .finish_non_exhaustive()
    }
}
