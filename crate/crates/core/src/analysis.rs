//! Read-only diagnostics of a frozen model: subnet accuracy distributions,
//! per-block vulnerability and a comparison of weak-subnet search strategies.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{pgd_attack, AttackConfig};
use crate::controller::{controller_step, ControllerPolicy};
use crate::corruption::{corrupt_split, CorruptionKind};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::model::MaskableModel;
use crate::rng::SeedTree;
use crate::subnet::{sample_uniform_subnet, sample_with_block_widths, subnet_from_l1, SubnetSpec};
use crate::train::clean_accuracy;

/// Inputs on which subnets are scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum InputVariant {
    Clean,
    Corruption { kind: CorruptionKind, severity: u8, seed: u64 },
    /// Adversarial examples crafted once against the full model.
    Attack { attack: AttackConfig, seed: u64 },
}

impl InputVariant {
    pub fn id(&self) -> String {
        match self {
            InputVariant::Clean => "clean".into(),
            InputVariant::Corruption { kind, severity, .. } => format!("{kind}-{severity}"),
            InputVariant::Attack { attack, .. } => attack.id(),
        }
    }

    /// The evaluation split under this variant.
    pub fn apply(&self, model: &MaskableModel, split: &Split) -> Result<Split> {
        match self {
            InputVariant::Clean => Ok(split.clone()),
            InputVariant::Corruption { kind, severity, seed } => corrupt_split(split, *kind, *severity, *seed),
            InputVariant::Attack { attack, seed } => {
                const CHUNK: usize = 128;
                let seeds = SeedTree::new(*seed);
                let mut images = split.images.clone();
                for start in (0..split.len()).step_by(CHUNK) {
                    let end = (start + CHUNK).min(split.len());
                    let x = split.images.slice(ndarray::s![start..end, .., .., ..]).to_owned();
                    let adv = pgd_attack(
                        model,
                        &x,
                        &split.labels[start..end],
                        attack,
                        &mut seeds.step_stream("chunk", start as u64),
                    )?;
                    images.slice_mut(ndarray::s![start..end, .., .., ..]).assign(&adv);
                }
                Ok(Split {
                    images,
                    labels: split.labels.clone(),
                })
            }
        }
    }
}

/// Five-number summary plus mean, the layout of one box in a box plot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSummary {
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl BoxSummary {
    /// Quartiles interpolate linearly between order statistics.
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Ok(Self {
            n: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
        })
    }
}

/// Accuracies of sampled subnets, with everything needed to redraw the box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubnetDistribution {
    pub width: f64,
    pub variant: String,
    pub full_accuracy: f64,
    pub summary: BoxSummary,
    pub values: Vec<f64>,
}

impl SubnetDistribution {
    /// Recomputes the summary from the raw values.
    pub fn recomputed(&self) -> Result<BoxSummary> {
        BoxSummary::from_values(&self.values)
    }
}

pub fn subnet_accuracy_distribution<R: Rng + ?Sized>(
    model: &MaskableModel,
    split: &Split,
    width: f64,
    n_samples: usize,
    variant: &InputVariant,
    rng: &mut R,
) -> Result<SubnetDistribution> {
    if n_samples == 0 {
        return Err(Error::Other("subnet distribution needs at least one sample".into()));
    }
    let inputs = variant.apply(model, split)?;
    let values = (0..n_samples)
        .map(|_| {
            let spec = sample_uniform_subnet(model.topology(), width, rng);
            clean_accuracy(model, &inputs, Some(&spec))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SubnetDistribution {
        width,
        variant: variant.id(),
        full_accuracy: clean_accuracy(model, &inputs, None)?,
        summary: BoxSummary::from_values(&values)?,
        values,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockVulnerability {
    pub block: usize,
    pub downsamples: bool,
    pub mean_error: f64,
    pub errors: Vec<f64>,
}

/// Test error (percent) when only block `b` is masked at `width`, averaged
/// over `n_per_block` sampled subnets, for every block.
pub fn block_vulnerability<R: Rng + ?Sized>(
    model: &MaskableModel,
    split: &Split,
    width: f64,
    n_per_block: usize,
    rng: &mut R,
) -> Result<Vec<BlockVulnerability>> {
    if n_per_block == 0 {
        return Err(Error::Other("block vulnerability needs at least one sample per block".into()));
    }
    let topology = model.topology();
    (0..topology.blocks.len())
        .map(|b| {
            let widths = BTreeMap::from([(b, width)]);
            let errors = (0..n_per_block)
                .map(|_| {
                    let spec = sample_with_block_widths(topology, 1.0, &widths, rng);
                    Ok(100.0 * (1.0 - clean_accuracy(model, split, Some(&spec))?))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(BlockVulnerability {
                block: b,
                downsamples: topology.blocks[b].downsamples,
                mean_error: errors.iter().sum::<f64>() / errors.len() as f64,
                errors,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Uniform,
    L1,
    Controller,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Uniform, Strategy::L1, Strategy::Controller];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Uniform => "uniform",
            Strategy::L1 => "l1",
            Strategy::Controller => "controller",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Other(format!("unknown search strategy `{s}`")))
    }
}

/// Controller search budget against a frozen model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchBudget {
    pub steps: usize,
    /// Subnets sampled per controller update.
    pub per_step: usize,
    /// Images drawn per controller update.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: usize,
    /// Subnets scored per strategy after the search.
    pub eval_samples: usize,
}

impl Default for SearchBudget {
    fn default() -> Self {
        Self {
            steps: 500,
            per_step: 8,
            batch_size: 128,
            learning_rate: 0.05,
            hidden: 64,
            eval_samples: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub strategy: Strategy,
    pub mean_accuracy: f64,
    pub accuracies: Vec<f64>,
    pub specs: Vec<SubnetSpec>,
}

impl StrategyResult {
    /// Fraction of evaluated subnets that keep `path` in `block`.
    pub fn path_frequency(&self, block: usize, path: usize) -> f64 {
        let hits = self.specs.iter().filter(|s| s.keeps_path(block, path)).count();
        hits as f64 / self.specs.len().max(1) as f64
    }
}

/// Scores subnets proposed by each strategy on `split`. The L1 heuristic is
/// deterministic, so its single subnet stands for all samples. The
/// controller first trains for `budget.steps` updates on batches of `split`.
pub fn compare_search_strategies(
    model: &MaskableModel,
    split: &Split,
    strategies: &[Strategy],
    width: f64,
    budget: &SearchBudget,
    seeds: &SeedTree,
) -> Result<Vec<StrategyResult>> {
    if split.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let topology = model.topology();
    let mut out = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        let specs: Vec<SubnetSpec> = match strategy {
            Strategy::Uniform => {
                let mut rng = seeds.stream("search-uniform");
                (0..budget.eval_samples)
                    .map(|_| sample_uniform_subnet(topology, width, &mut rng))
                    .collect()
            }
            Strategy::L1 => vec![subnet_from_l1(model, width)],
            Strategy::Controller => {
                let policy = train_search_controller(model, split, width, budget, seeds)?;
                let mut rng = seeds.stream("search-sample");
                (0..budget.eval_samples).map(|_| policy.sample_subnet(&mut rng).0).collect()
            }
        };
        let accuracies = specs
            .iter()
            .map(|s| clean_accuracy(model, split, Some(s)))
            .collect::<Result<Vec<_>>>()?;
        out.push(StrategyResult {
            strategy,
            mean_accuracy: accuracies.iter().sum::<f64>() / accuracies.len() as f64,
            accuracies,
            specs,
        });
    }
    Ok(out)
}

/// Trains a fresh controller to find weak subnets of a frozen model.
pub fn train_search_controller(
    model: &MaskableModel,
    split: &Split,
    width: f64,
    budget: &SearchBudget,
    seeds: &SeedTree,
) -> Result<ControllerPolicy> {
    let mut policy = ControllerPolicy::new(
        model.topology(),
        width,
        budget.hidden,
        &mut seeds.stream("search-controller-init"),
    );
    let batch = budget.batch_size.clamp(1, split.len());
    for step in 0..budget.steps {
        let mut rng = seeds.step_stream("search-controller", step as u64);
        let picked = index::sample(&mut rng, split.len(), batch).into_vec();
        let (x, y) = split.gather(&picked);
        controller_step(&mut policy, model, &x, &y, budget.per_step, budget.learning_rate, &mut rng)?;
    }
    Ok(policy)
}

/// Tab-separated box-plot rows: one line per distribution.
pub fn distributions_to_text(rows: &[(String, SubnetDistribution)]) -> String {
    let mut s = String::from("label\tvariant\twidth\tn\tmin\tq1\tmedian\tq3\tmax\tmean\tfull\n");
    for (label, d) in rows {
        let b = &d.summary;
        s.push_str(&format!(
            "{label}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            d.variant, d.width, b.n, b.min, b.q1, b.median, b.q3, b.max, b.mean, d.full_accuracy
        ));
    }
    s
}
