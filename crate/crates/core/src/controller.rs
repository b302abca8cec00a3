//! A recurrent policy over subnets, trained by REINFORCE to find subnets with
//! low accuracy.
//!
//! The policy walks the model block by block. For each block it first picks
//! the kept paths, then the kept channel groups of every parameterized layer
//! on those paths. Each pick is one step of a single-layer LSTM whose input is
//! the embedding of the previous pick (a learned start token for the first).
//! Picks within one subset are emitted in ascending index order: at every
//! step the indices not above the previous pick, and those that would leave
//! too few indices for the remaining picks, are masked out. Every subset
//! therefore has exactly one pick sequence, and `exp(log_prob)` sums to one
//! over the search space.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::accuracy;
use crate::model::{ForwardOptions, MaskableModel, Mode};
use crate::subnet::{selection_count, SubnetSpec};
use crate::topology::{LayerId, ModelTopology};

pub const DEFAULT_HIDDEN: usize = 64;
pub const BASELINE_DECAY: f64 = 0.9;

/// The reward whose expectation the controller ascends: minus the subnet's
/// accuracy, so that ascent drives the policy towards weak subnets.
pub fn weak_reward(subnet_accuracy: f64) -> f64 {
    -subnet_accuracy
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum SlotKey {
    Paths(usize),
    Groups(LayerId),
}

#[derive(Clone, Copy, Debug)]
struct Slot {
    arity: usize,
    emb: usize,
    proj_w: usize,
    proj_b: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolicyState {
    pub hidden: usize,
    pub width: f64,
    pub params: Vec<f64>,
    pub baseline: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ControllerPolicy {
    topology: ModelTopology,
    width: f64,
    hidden: usize,
    slots: Vec<Slot>,
    slot_of: HashMap<SlotKey, usize>,
    start: usize,
    lstm_w: usize,
    lstm_b: usize,
    params: Vec<f64>,
    baseline: Option<f64>,
}

/// One LSTM step kept for backpropagation.
struct Step {
    slot: usize,
    /// Row of the embedding table feeding this step; `None` for the start token.
    input: Option<(usize, usize)>,
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    gates: Vec<f64>,
    c: Vec<f64>,
    h: Vec<f64>,
    probs: Vec<f64>,
    choice: usize,
}

struct Trace {
    steps: Vec<Step>,
    log_prob: f64,
    spec: SubnetSpec,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl ControllerPolicy {
    /// A policy with uniform(-0.1, 0.1) recurrent weights and embeddings and
    /// zero output projections, so that it starts out uniform.
    pub fn new<R: Rng + ?Sized>(topology: &ModelTopology, width: f64, hidden: usize, rng: &mut R) -> Self {
        let mut policy = Self::layout(topology, width, hidden);
        let proj_ranges: Vec<(usize, usize)> = policy
            .slots
            .iter()
            .map(|s| (s.proj_w, s.proj_b + s.arity))
            .collect();
        for (i, p) in policy.params.iter_mut().enumerate() {
            if !proj_ranges.iter().any(|&(a, b)| i >= a && i < b) {
                *p = rng.random_range(-0.1..0.1);
            }
        }
        policy
    }

    fn layout(topology: &ModelTopology, width: f64, hidden: usize) -> Self {
        let mut offset = 0;
        let mut alloc = |n: usize| {
            let at = offset;
            offset += n;
            at
        };
        let start = alloc(hidden);
        let lstm_w = alloc(4 * hidden * 2 * hidden);
        let lstm_b = alloc(4 * hidden);
        let mut slots = Vec::new();
        let mut slot_of = HashMap::new();
        let mut add = |key: SlotKey, arity: usize, slots: &mut Vec<Slot>| {
            slots.push(Slot {
                arity,
                emb: alloc(arity * hidden),
                proj_w: alloc(arity * hidden),
                proj_b: alloc(arity),
            });
            slot_of.insert(key, slots.len() - 1);
        };
        for (b, block) in topology.blocks.iter().enumerate() {
            add(SlotKey::Paths(b), block.n_paths(), &mut slots);
            for p in 0..block.n_paths() {
                for id in topology.maskable_layers(b, p) {
                    add(SlotKey::Groups(id), topology.groups, &mut slots);
                }
            }
        }
        Self {
            topology: topology.clone(),
            width,
            hidden,
            slots,
            slot_of,
            start,
            lstm_w,
            lstm_b,
            params: vec![0.0; offset],
            baseline: None,
        }
    }

    pub fn from_state(topology: &ModelTopology, state: &PolicyState) -> Result<Self> {
        let mut policy = Self::layout(topology, state.width, state.hidden);
        if state.params.len() != policy.params.len() {
            return Err(Error::Checkpoint(format!(
                "policy has {} parameters, expected {}",
                state.params.len(),
                policy.params.len()
            )));
        }
        policy.params.clone_from(&state.params);
        policy.baseline = state.baseline;
        Ok(policy)
    }

    pub fn state(&self) -> PolicyState {
        PolicyState {
            hidden: self.hidden,
            width: self.width,
            params: self.params.clone(),
            baseline: self.baseline,
        }
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn baseline(&self) -> Option<f64> {
        self.baseline
    }

    pub fn set_baseline(&mut self, baseline: Option<f64>) {
        self.baseline = baseline;
    }

    fn lstm_step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let hd = self.hidden;
        let w = &self.params[self.lstm_w..self.lstm_w + 8 * hd * hd];
        let b = &self.params[self.lstm_b..self.lstm_b + 4 * hd];
        let mut z = b.to_vec();
        for (r, zr) in z.iter_mut().enumerate() {
            let row = &w[r * 2 * hd..(r + 1) * 2 * hd];
            let mut acc = 0.0;
            for j in 0..hd {
                acc += row[j] * x[j] + row[hd + j] * h_prev[j];
            }
            *zr += acc;
        }
        let mut gates = vec![0.0; 4 * hd];
        let mut c = vec![0.0; hd];
        let mut h = vec![0.0; hd];
        for j in 0..hd {
            let i = sigmoid(z[j]);
            let f = sigmoid(z[hd + j]);
            let g = z[2 * hd + j].tanh();
            let o = sigmoid(z[3 * hd + j]);
            gates[j] = i;
            gates[hd + j] = f;
            gates[2 * hd + j] = g;
            gates[3 * hd + j] = o;
            c[j] = f * c_prev[j] + i * g;
            h[j] = o * c[j].tanh();
        }
        (gates, c, h)
    }

    /// Runs the policy, letting `choose` pick each index from the masked
    /// distribution. `choose` gets (slot key, pick number within the subset,
    /// probabilities) and must return an index with positive probability.
    fn run<F>(&self, mut choose: F) -> Result<Trace>
    where
        F: FnMut(SlotKey, usize, &[f64]) -> Result<usize>,
    {
        let hd = self.hidden;
        let mut h = vec![0.0; hd];
        let mut c = vec![0.0; hd];
        let mut input: Option<(usize, usize)> = None;
        let mut steps = Vec::new();
        let mut log_prob = 0.0;
        let mut path_choices = Vec::new();
        let mut channel_group_choices = BTreeMap::new();

        let mut pick_subset = |key: SlotKey,
                               k: usize,
                               h: &mut Vec<f64>,
                               c: &mut Vec<f64>,
                               input: &mut Option<(usize, usize)>,
                               steps: &mut Vec<Step>,
                               log_prob: &mut f64|
         -> Result<Vec<usize>> {
            let si = self.slot_of[&key];
            let slot = self.slots[si];
            let mut chosen = Vec::with_capacity(k);
            for j in 0..k {
                let x: Vec<f64> = match *input {
                    None => self.params[self.start..self.start + hd].to_vec(),
                    Some((emb_slot, row)) => {
                        let base = self.slots[emb_slot].emb + row * hd;
                        self.params[base..base + hd].to_vec()
                    }
                };
                let (gates, c_new, h_new) = self.lstm_step(&x, h, c);
                let lo = chosen.last().map_or(0, |&p: &usize| p + 1);
                let hi = slot.arity - (k - j); // inclusive upper bound
                let mut logits = vec![f64::NEG_INFINITY; slot.arity];
                for (a, logit) in logits.iter_mut().enumerate().take(hi + 1).skip(lo) {
                    let row = &self.params[slot.proj_w + a * hd..slot.proj_w + (a + 1) * hd];
                    *logit = self.params[slot.proj_b + a] + row.iter().zip(&h_new).map(|(w, v)| w * v).sum::<f64>();
                }
                let max = logits[lo..=hi].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits[lo..=hi].iter().map(|l| (l - max).exp()).sum();
                let probs: Vec<f64> = logits
                    .iter()
                    .map(|&l| if l.is_finite() { (l - max).exp() / z } else { 0.0 })
                    .collect();
                let a = choose(key, j, &probs)?;
                if a < lo || a > hi {
                    return Err(Error::InvalidSubnet(vec![format!(
                        "pick {a} outside the feasible range {lo}..={hi}"
                    )]));
                }
                *log_prob += (logits[a] - max) - z.ln();
                steps.push(Step {
                    slot: si,
                    input: *input,
                    x,
                    h_prev: std::mem::take(h),
                    c_prev: std::mem::take(c),
                    gates,
                    c: c_new.clone(),
                    h: h_new.clone(),
                    probs,
                    choice: a,
                });
                *h = h_new;
                *c = c_new;
                *input = Some((si, a));
                chosen.push(a);
            }
            Ok(chosen)
        };

        for (b, block) in self.topology.blocks.iter().enumerate() {
            let k = selection_count(block.n_paths(), self.width);
            let paths = pick_subset(SlotKey::Paths(b), k, &mut h, &mut c, &mut input, &mut steps, &mut log_prob)?;
            for &p in &paths {
                for id in self.topology.maskable_layers(b, p) {
                    let kg = selection_count(self.topology.groups, self.width);
                    let groups =
                        pick_subset(SlotKey::Groups(id), kg, &mut h, &mut c, &mut input, &mut steps, &mut log_prob)?;
                    channel_group_choices.insert(id, groups);
                }
            }
            path_choices.push(paths);
        }
        Ok(Trace {
            steps,
            log_prob,
            spec: SubnetSpec {
                width: self.width,
                block_widths: BTreeMap::new(),
                path_choices,
                channel_group_choices,
            },
        })
    }

    /// Samples a subnet and returns it with its log-probability.
    pub fn sample_subnet<R: Rng + ?Sized>(&self, rng: &mut R) -> (SubnetSpec, f64) {
        let trace = self
            .run(|_, _, probs| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut last = 0;
                for (a, &p) in probs.iter().enumerate() {
                    if p > 0.0 {
                        acc += p;
                        last = a;
                        if u < acc {
                            return Ok(a);
                        }
                    }
                }
                Ok(last)
            })
            .expect("sampling only picks feasible indices");
        (trace.spec, trace.log_prob)
    }

    fn replay(&self, spec: &SubnetSpec) -> Result<Trace> {
        spec.validate(&self.topology)?;
        if spec.width != self.width || !spec.block_widths.is_empty() {
            return Err(Error::InvalidSubnet(vec![format!(
                "spec width {} does not match policy width {}",
                spec.width, self.width
            )]));
        }
        self.run(|key, j, _| {
            let list = match key {
                SlotKey::Paths(b) => &spec.path_choices[b],
                SlotKey::Groups(id) => &spec.channel_group_choices[&id],
            };
            Ok(list[j])
        })
    }

    /// Log-probability the policy assigns to `spec`.
    pub fn log_prob(&self, spec: &SubnetSpec) -> Result<f64> {
        Ok(self.replay(spec)?.log_prob)
    }

    /// Log-probability of `spec` and its gradient w.r.t. the parameters.
    pub fn log_prob_grad(&self, spec: &SubnetSpec) -> Result<(f64, Vec<f64>)> {
        let trace = self.replay(spec)?;
        let mut grad = vec![0.0; self.params.len()];
        self.backward(&trace, 1.0, &mut grad);
        Ok((trace.log_prob, grad))
    }

    /// Accumulates `scale * d log_prob / d params` of `trace` into `grad`.
    fn backward(&self, trace: &Trace, scale: f64, grad: &mut [f64]) {
        let hd = self.hidden;
        let mut dh_next = vec![0.0; hd];
        let mut dc_next = vec![0.0; hd];
        for step in trace.steps.iter().rev() {
            let slot = self.slots[step.slot];
            let mut dh = dh_next.clone();
            for a in 0..slot.arity {
                let target = if a == step.choice { 1.0 } else { 0.0 };
                let dlogit = scale * (target - step.probs[a]);
                if step.probs[a] == 0.0 && a != step.choice {
                    continue;
                }
                if dlogit == 0.0 {
                    continue;
                }
                grad[slot.proj_b + a] += dlogit;
                let wrow = slot.proj_w + a * hd;
                for j in 0..hd {
                    grad[wrow + j] += dlogit * step.h[j];
                    dh[j] += dlogit * self.params[wrow + j];
                }
            }
            let mut dz = vec![0.0; 4 * hd];
            let mut dc_prev = vec![0.0; hd];
            for j in 0..hd {
                let i = step.gates[j];
                let f = step.gates[hd + j];
                let g = step.gates[2 * hd + j];
                let o = step.gates[3 * hd + j];
                let tc = step.c[j].tanh();
                let dc = dc_next[j] + dh[j] * o * (1.0 - tc * tc);
                dz[j] = dc * g * i * (1.0 - i);
                dz[hd + j] = dc * step.c_prev[j] * f * (1.0 - f);
                dz[2 * hd + j] = dc * i * (1.0 - g * g);
                dz[3 * hd + j] = dh[j] * tc * o * (1.0 - o);
                dc_prev[j] = dc * f;
            }
            let mut dx = vec![0.0; hd];
            let mut dh_prev = vec![0.0; hd];
            for (r, &dzr) in dz.iter().enumerate() {
                if dzr == 0.0 {
                    continue;
                }
                grad[self.lstm_b + r] += dzr;
                let row = self.lstm_w + r * 2 * hd;
                for j in 0..hd {
                    grad[row + j] += dzr * step.x[j];
                    grad[row + hd + j] += dzr * step.h_prev[j];
                    dx[j] += dzr * self.params[row + j];
                    dh_prev[j] += dzr * self.params[row + hd + j];
                }
            }
            let base = match step.input {
                None => self.start,
                Some((s, row)) => self.slots[s].emb + row * hd,
            };
            for j in 0..hd {
                grad[base + j] += dx[j];
            }
            dh_next = dh_prev;
            dc_next = dc_prev;
        }
    }

    /// The policy-gradient estimate `(1/C) sum_i (r_i - b) grad log pi(spec_i)`
    /// with the current baseline `b` (the batch mean when no baseline exists
    /// yet).
    pub fn policy_gradient(&self, specs: &[SubnetSpec], rewards: &[f64]) -> Result<Vec<f64>> {
        if specs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if specs.len() != rewards.len() {
            return Err(Error::Shape {
                expected: format!("{} rewards", specs.len()),
                actual: format!("{} rewards", rewards.len()),
            });
        }
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let baseline = self.baseline.unwrap_or(mean);
        let inv_c = 1.0 / specs.len() as f64;
        let mut grad = vec![0.0; self.params.len()];
        for (spec, &r) in specs.iter().zip(rewards) {
            let advantage = r - baseline;
            if advantage == 0.0 {
                continue;
            }
            let trace = self.replay(spec)?;
            self.backward(&trace, advantage * inv_c, &mut grad);
        }
        Ok(grad)
    }

    /// One REINFORCE ascent step followed by the moving-average baseline
    /// update `b <- 0.9 b + 0.1 mean(r)`.
    pub fn reinforce_update(&mut self, specs: &[SubnetSpec], rewards: &[f64], learning_rate: f64) -> Result<()> {
        let grad = self.policy_gradient(specs, rewards)?;
        for (p, g) in self.params.iter_mut().zip(&grad) {
            *p += learning_rate * g;
        }
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        self.baseline = Some(match self.baseline {
            Some(b) => BASELINE_DECAY * b + (1.0 - BASELINE_DECAY) * mean,
            None => mean,
        });
        Ok(())
    }
}

/// Outcome of one controller update.
#[derive(Clone, Debug)]
pub struct ControllerStepReport {
    pub specs: Vec<SubnetSpec>,
    pub accuracies: Vec<f64>,
    pub rewards: Vec<f64>,
}

impl ControllerStepReport {
    pub fn mean_accuracy(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len().max(1) as f64
    }
}

/// Samples `count` subnets, scores each by eval-mode accuracy on the batch and
/// applies one REINFORCE update with reward `-accuracy`.
pub fn controller_step<R: Rng + ?Sized>(
    policy: &mut ControllerPolicy,
    model: &MaskableModel,
    x: &Array4<f32>,
    labels: &[usize],
    count: usize,
    learning_rate: f64,
    rng: &mut R,
) -> Result<ControllerStepReport> {
    let specs: Vec<SubnetSpec> = (0..count).map(|_| policy.sample_subnet(rng).0).collect();
    let mut accuracies = Vec::with_capacity(count);
    for spec in &specs {
        let pass = model.forward(x, ForwardOptions::new(Mode::Eval).masked(spec))?;
        accuracies.push(accuracy(&pass.logits, labels));
    }
    step_with_accuracies(policy, specs, accuracies, learning_rate)
}

/// The update half of [`controller_step`], for callers that score subnets
/// themselves (e.g. on adversarial inputs).
pub fn step_with_accuracies(
    policy: &mut ControllerPolicy,
    specs: Vec<SubnetSpec>,
    accuracies: Vec<f64>,
    learning_rate: f64,
) -> Result<ControllerStepReport> {
    let rewards: Vec<f64> = accuracies.iter().map(|&a| weak_reward(a)).collect();
    policy.reinforce_update(&specs, &rewards, learning_rate)?;
    Ok(ControllerStepReport {
        specs,
        accuracies,
        rewards,
    })
}
