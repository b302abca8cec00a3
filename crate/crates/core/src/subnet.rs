//! The subnet search space: which paths each block keeps and which channel
//! groups each layer keeps.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MaskableModel;
use crate::topology::{LayerId, ModelTopology};

/// Number of elements kept out of `n` at width `width`: round-half-even of
/// `width * n`, clamped to `[1, n]`.
pub fn selection_count(n: usize, width: f64) -> usize {
    assert!(n >= 1, "selection_count needs n >= 1");
    let raw = (width * n as f64).round_ties_even();
    (raw.max(1.0) as usize).min(n)
}

/// A concrete subnet of a [`ModelTopology`].
///
/// Path choices are indexed by block; channel group choices are keyed by
/// layer and only exist for parameterized layers on selected paths. All index
/// lists are kept sorted ascending.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubnetSpec {
    pub width: f64,
    /// Blocks sampled at a width other than `width`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub block_widths: BTreeMap<usize, f64>,
    pub path_choices: Vec<Vec<usize>>,
    pub channel_group_choices: BTreeMap<LayerId, Vec<usize>>,
}

impl SubnetSpec {
    /// The subnet that keeps everything.
    pub fn full(topology: &ModelTopology) -> Self {
        let path_choices: Vec<Vec<usize>> = topology
            .blocks
            .iter()
            .map(|b| (0..b.n_paths()).collect())
            .collect();
        let channel_group_choices = topology
            .all_maskable_layers()
            .into_iter()
            .map(|id| (id, (0..topology.groups).collect()))
            .collect();
        Self {
            width: 1.0,
            block_widths: BTreeMap::new(),
            path_choices,
            channel_group_choices,
        }
    }

    pub fn block_width(&self, block: usize) -> f64 {
        self.block_widths.get(&block).copied().unwrap_or(self.width)
    }

    pub fn keeps_path(&self, block: usize, path: usize) -> bool {
        self.path_choices
            .get(block)
            .is_some_and(|paths| paths.contains(&path))
    }

    /// 0/1 multipliers for the output channels of `id`, or `None` when every
    /// group is kept.
    pub fn channel_mask(&self, id: LayerId, channels: usize, groups: usize) -> Option<Vec<f32>> {
        let kept = self.channel_group_choices.get(&id)?;
        if kept.len() == groups {
            return None;
        }
        let per_group = channels / groups;
        let mut mask = vec![0.0; channels];
        for &g in kept {
            mask[g * per_group..(g + 1) * per_group].fill(1.0);
        }
        Some(mask)
    }

    /// Every invariant violation of this spec against `topology`.
    pub fn violations(&self, topology: &ModelTopology) -> Vec<String> {
        let mut out = Vec::new();
        let widths = std::iter::once(self.width).chain(self.block_widths.values().copied());
        for w in widths {
            if !(w > 0.0 && w <= 1.0) {
                out.push(format!("width {w} outside (0, 1]"));
            }
        }
        if let Some((&b, _)) = self.block_widths.range(topology.blocks.len()..).next() {
            out.push(format!("width override for nonexistent block {b}"));
        }
        if self.path_choices.len() != topology.blocks.len() {
            out.push(format!(
                "{} path lists for {} blocks",
                self.path_choices.len(),
                topology.blocks.len()
            ));
        }
        let mut expected_layers = Vec::new();
        for (b, (block, chosen)) in topology.blocks.iter().zip(&self.path_choices).enumerate() {
            let width = self.block_width(b);
            let want = if width > 0.0 && width <= 1.0 {
                selection_count(block.n_paths(), width)
            } else {
                0
            };
            check_subset(&mut out, &format!("block {b}"), chosen, block.n_paths(), want);
            for &p in chosen.iter().filter(|&&p| p < block.n_paths()) {
                expected_layers.extend(topology.maskable_layers(b, p).map(|id| (id, width)));
            }
        }
        for &(id, width) in &expected_layers {
            match self.channel_group_choices.get(&id) {
                None => out.push(format!("layer {id}: missing channel groups")),
                Some(groups) => {
                    let want = if width > 0.0 && width <= 1.0 {
                        selection_count(topology.groups, width)
                    } else {
                        0
                    };
                    check_subset(&mut out, &format!("layer {id}"), groups, topology.groups, want);
                }
            }
        }
        for id in self.channel_group_choices.keys() {
            if !expected_layers.iter().any(|(e, _)| e == id) {
                out.push(format!("layer {id}: not a maskable layer on a selected path"));
            }
        }
        out
    }

    pub fn validate(&self, topology: &ModelTopology) -> Result<()> {
        let violations = self.violations(topology);
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSubnet(violations))
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("subnet specs always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn check_subset(out: &mut Vec<String>, what: &str, chosen: &[usize], n: usize, want: usize) {
    if chosen.len() != want {
        out.push(format!("{what}: keeps {} but expected {want}", chosen.len()));
    }
    if let Some(bad) = chosen.iter().find(|&&i| i >= n) {
        out.push(format!("{what}: index {bad} out of range 0..{n}"));
    }
    if chosen.windows(2).any(|w| w[0] >= w[1]) {
        out.push(format!("{what}: indices not distinct and ascending"));
    }
}

fn sorted_sample<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    let mut picked = index::sample(rng, n, k).into_vec();
    picked.sort_unstable();
    picked
}

/// Uniformly sampled subnet: every block's path subset and every layer's
/// group subset is drawn uniformly among subsets of the mandated size.
pub fn sample_uniform_subnet<R: Rng + ?Sized>(
    topology: &ModelTopology,
    width: f64,
    rng: &mut R,
) -> SubnetSpec {
    sample_with_block_widths(topology, width, &BTreeMap::new(), rng)
}

/// Uniform sampling where some blocks use their own width. A width of 1
/// everywhere except one block restricts masking to that block.
pub fn sample_with_block_widths<R: Rng + ?Sized>(
    topology: &ModelTopology,
    width: f64,
    block_widths: &BTreeMap<usize, f64>,
    rng: &mut R,
) -> SubnetSpec {
    let mut path_choices = Vec::with_capacity(topology.blocks.len());
    let mut channel_group_choices = BTreeMap::new();
    for (b, block) in topology.blocks.iter().enumerate() {
        let w = block_widths.get(&b).copied().unwrap_or(width);
        let paths = sorted_sample(rng, block.n_paths(), selection_count(block.n_paths(), w));
        for &p in &paths {
            for id in topology.maskable_layers(b, p) {
                let k = selection_count(topology.groups, w);
                channel_group_choices.insert(id, sorted_sample(rng, topology.groups, k));
            }
        }
        path_choices.push(paths);
    }
    SubnetSpec {
        width,
        block_widths: block_widths.clone(),
        path_choices,
        channel_group_choices,
    }
}

/// Every subnet of `topology` at `width`, in a fixed order. Returns `None`
/// when the space holds more than `limit` specs.
pub fn enumerate_space(topology: &ModelTopology, width: f64, limit: usize) -> Option<Vec<SubnetSpec>> {
    let mut specs = vec![SubnetSpec {
        width,
        block_widths: BTreeMap::new(),
        path_choices: Vec::new(),
        channel_group_choices: BTreeMap::new(),
    }];
    for (b, block) in topology.blocks.iter().enumerate() {
        let path_sets = subsets(block.n_paths(), selection_count(block.n_paths(), width));
        let group_sets = subsets(topology.groups, selection_count(topology.groups, width));
        let mut next = Vec::new();
        for spec in &specs {
            for paths in &path_sets {
                let layers: Vec<LayerId> = paths.iter().flat_map(|&p| topology.maskable_layers(b, p)).collect();
                let mut partial = vec![spec.clone()];
                partial[0].path_choices.push(paths.clone());
                for id in layers {
                    let mut grown = Vec::with_capacity(partial.len() * group_sets.len());
                    for s in &partial {
                        for g in &group_sets {
                            let mut s = s.clone();
                            s.channel_group_choices.insert(id, g.clone());
                            grown.push(s);
                        }
                    }
                    partial = grown;
                    if partial.len() > limit {
                        return None;
                    }
                }
                next.extend(partial);
                if next.len() > limit {
                    return None;
                }
            }
        }
        specs = next;
    }
    Some(specs)
}

/// All ascending `k`-subsets of `0..n`.
fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Indices of the `k` smallest values, ties to the lowest index, ascending.
fn lowest_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order.into_iter().take(k).collect();
    kept.sort_unstable();
    kept
}

/// The L1-norm heuristic: keep the paths and channel groups whose weights
/// have the smallest L1 norm. Identity paths have norm 0 and win first.
pub fn subnet_from_l1(model: &MaskableModel, width: f64) -> SubnetSpec {
    let topology = model.topology();
    let mut path_choices = Vec::new();
    let mut channel_group_choices = BTreeMap::new();
    for (b, block) in topology.blocks.iter().enumerate() {
        let norms: Vec<f64> = (0..block.n_paths())
            .map(|p| topology.maskable_layers(b, p).map(|id| model.weight_l1(id)).sum())
            .collect();
        let paths = lowest_k(&norms, selection_count(block.n_paths(), width));
        for &p in &paths {
            for id in topology.maskable_layers(b, p) {
                let group_norms = model.group_weight_l1(id);
                let k = selection_count(topology.groups, width);
                channel_group_choices.insert(id, lowest_k(&group_norms, k));
            }
        }
        path_choices.push(paths);
    }
    SubnetSpec {
        width,
        block_widths: BTreeMap::new(),
        path_choices,
        channel_group_choices,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use crate::topology::{BlockTopology, InputShape, LayerTopology, PathTopology};
    use proptest::prelude::*;

    fn one_layer_topology(channels: usize, groups: usize) -> ModelTopology {
        ModelTopology {
            input_shape: InputShape {
                height: 4,
                width: 4,
                channels: 1,
            },
            blocks: vec![BlockTopology {
                paths: vec![PathTopology {
                    layers: vec![LayerTopology::conv(1, channels, 3, 1, false)],
                }],
                downsamples: false,
                relu_after: false,
            }],
            num_classes: 2,
            groups,
        }
    }

    #[test]
    fn selection_count_examples() {
        assert_eq!(selection_count(10, 0.7), 7);
        assert_eq!(selection_count(2, 0.7), 1);
        assert_eq!(selection_count(4, 0.1), 1);
        assert_eq!(selection_count(4, 0.625), 2); // 2.5 rounds to even
        assert_eq!(selection_count(4, 0.875), 4); // 3.5 rounds to even
        assert_eq!(selection_count(3, 1.0), 3);
    }

    #[test]
    fn full_width_sample_is_the_full_spec() {
        let t = ModelTopology::desk(10);
        let mut rng = SeedTree::new(1).stream("t");
        let spec = sample_uniform_subnet(&t, 1.0, &mut rng);
        assert_eq!(spec, SubnetSpec::full(&t));
    }

    #[test]
    fn two_path_block_selection_frequency() {
        let t = ModelTopology::desk(10);
        let mut rng = SeedTree::new(2).stream("t");
        let draws = 10_000;
        let mut first = 0;
        for _ in 0..draws {
            let spec = sample_uniform_subnet(&t, 0.7, &mut rng);
            if spec.path_choices[1] == vec![0] {
                first += 1;
            }
        }
        let freq = first as f64 / draws as f64;
        assert!((freq - 0.5).abs() <= 0.02, "{freq}");
    }

    #[test]
    fn group_pair_frequency_is_uniform() {
        let t = one_layer_topology(8, 4);
        let mut rng = SeedTree::new(3).stream("t");
        let id = LayerId {
            block: 0,
            path: 0,
            layer: 0,
        };
        let mut counts = BTreeMap::<Vec<usize>, usize>::new();
        let draws = 10_000;
        for _ in 0..draws {
            let spec = sample_uniform_subnet(&t, 0.5, &mut rng);
            *counts.entry(spec.channel_group_choices[&id].clone()).or_default() += 1;
        }
        assert_eq!(counts.len(), 6);
        for (pair, c) in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 1.0 / 6.0).abs() <= 0.01, "{pair:?}: {f}");
        }
    }

    #[test]
    fn validate_reports_each_violation() {
        let t = ModelTopology::desk(10);
        assert!(SubnetSpec::full(&t).validate(&t).is_ok());

        let mut rng = SeedTree::new(4).stream("t");
        let mut bad = sample_uniform_subnet(&t, 0.7, &mut rng);
        bad.path_choices[2] = vec![5];
        let v = bad.violations(&t);
        assert!(v.iter().any(|m| m.contains("block 2") && m.contains("out of range")), "{v:?}");

        let mut bad = sample_uniform_subnet(&t, 0.7, &mut rng);
        bad.path_choices[1] = vec![0, 1];
        let v = bad.violations(&t);
        assert!(
            v.iter().any(|m| m.contains("block 1") && m.contains("expected 1")),
            "{v:?}"
        );
    }

    #[test]
    fn channel_mask_zeroes_unselected_groups() {
        let t = one_layer_topology(8, 4);
        let id = LayerId {
            block: 0,
            path: 0,
            layer: 0,
        };
        let mut spec = SubnetSpec::full(&t);
        assert!(spec.channel_mask(id, 8, 4).is_none());
        spec.channel_group_choices.insert(id, vec![1, 3]);
        assert_eq!(
            spec.channel_mask(id, 8, 4).unwrap(),
            vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn json_round_trip() {
        let t = ModelTopology::desk(10);
        let mut rng = SeedTree::new(5).stream("t");
        let spec = sample_uniform_subnet(&t, 0.7, &mut rng);
        let back = SubnetSpec::from_json(&spec.to_json()).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn enumeration_counts() {
        let t = one_layer_topology(8, 4);
        assert_eq!(enumerate_space(&t, 0.5, 100).unwrap().len(), 6);
        let desk = ModelTopology::desk(10);
        assert!(enumerate_space(&desk, 0.7, 1000).is_none());
        for spec in enumerate_space(&t, 0.75, 100).unwrap() {
            spec.validate(&t).unwrap();
        }
    }

    #[test]
    fn lowest_k_breaks_ties_by_index() {
        assert_eq!(lowest_k(&[0.1, 5.0, 5.0, 5.0], 1), vec![0]);
        assert_eq!(lowest_k(&[2.0, 2.0, 2.0, 2.0], 2), vec![0, 1]);
        assert_eq!(lowest_k(&[3.0, 1.0, 2.0], 2), vec![1, 2]);
    }

    proptest! {
        #[test]
        fn selection_count_is_monotone(n in 1usize..64, a in 0.001f64..1.0, b in 0.001f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(selection_count(n, lo) <= selection_count(n, hi));
            prop_assert!(selection_count(n, lo) <= selection_count(n + 1, lo));
            prop_assert!((1..=n).contains(&selection_count(n, lo)));
        }

        #[test]
        fn uniform_samples_validate(seed in any::<u64>(), width in 0.01f64..=1.0, blocks in 1usize..3) {
            let shape = InputShape { height: 8, width: 8, channels: 3 };
            let t = ModelTopology::residual(shape, &[4, 8], blocks, 3, 4).unwrap();
            let mut rng = SeedTree::new(seed).stream("p");
            let spec = sample_uniform_subnet(&t, width, &mut rng);
            prop_assert!(spec.validate(&t).is_ok(), "{:?}", spec.violations(&t));
        }
    }
}
