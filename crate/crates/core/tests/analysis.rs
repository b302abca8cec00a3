use std::sync::OnceLock;

use ews_core::analysis::{
    block_vulnerability, compare_search_strategies, subnet_accuracy_distribution, InputVariant, SearchBudget, Strategy,
    SubnetDistribution,
};
use ews_core::checkpoint::model_hash;
use ews_core::corruption::CorruptionKind;
use ews_core::data::{synthetic, Dataset, SyntheticConfig};
use ews_core::topology::{BlockTopology, LayerTopology, PathTopology};
use ews_core::train::{clean_accuracy, train, TrainConfig};
use ews_core::{MaskableModel, ModelTopology, SeedTree};

fn easy_data() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| {
        synthetic(&SyntheticConfig {
            train: 640,
            val: 100,
            test: 300,
            jitter: 1.0,
            noise: 0.05,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    })
}

fn trained() -> &'static MaskableModel {
    static MODEL: OnceLock<MaskableModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let cfg = TrainConfig {
            lambda: 0.0,
            epochs: 4,
            ..Default::default()
        };
        train(cfg, ModelTopology::desk(10), easy_data(), None).unwrap().trainer.into_model()
    })
}

#[test]
fn full_width_distribution_has_no_spread() {
    let model = trained();
    let test = &easy_data().test;
    let d = subnet_accuracy_distribution(model, test, 1.0, 5, &InputVariant::Clean, &mut SeedTree::new(1).stream("s"))
        .unwrap();
    assert_eq!(d.summary.min, d.summary.max);
    assert_eq!(d.summary.mean, d.full_accuracy);
    assert_eq!(d.full_accuracy, clean_accuracy(model, test, None).unwrap());
}

#[test]
fn untrained_model_sits_at_chance() {
    let model = MaskableModel::new(ModelTopology::desk(10), &mut SeedTree::new(8).stream("init")).unwrap();
    let d = subnet_accuracy_distribution(
        &model,
        &easy_data().test,
        0.7,
        20,
        &InputVariant::Clean,
        &mut SeedTree::new(2).stream("s"),
    )
    .unwrap();
    assert!((d.summary.mean - 0.1).abs() <= 0.03, "{}", d.summary.mean);
}

#[test]
fn zero_samples_are_rejected() {
    let r = subnet_accuracy_distribution(
        trained(),
        &easy_data().test,
        0.7,
        0,
        &InputVariant::Clean,
        &mut SeedTree::new(2).stream("s"),
    );
    assert!(r.is_err());
}

#[test]
fn summaries_recompute_from_dumped_values_and_model_is_untouched() {
    let model = trained();
    let before = model_hash(model);
    for variant in [
        InputVariant::Corruption {
            kind: CorruptionKind::GaussianNoise,
            severity: 3,
            seed: 1,
        },
        InputVariant::Attack {
            attack: ews_core::adversarial::AttackConfig::pgd(8.0 / 255.0, 3),
            seed: 1,
        },
    ] {
        let d = subnet_accuracy_distribution(model, &easy_data().test, 0.7, 6, &variant, &mut SeedTree::new(4).stream("s"))
            .unwrap();
        let dumped = serde_json::to_string(&d).unwrap();
        let back: SubnetDistribution = serde_json::from_str(&dumped).unwrap();
        assert_eq!(back.recomputed().unwrap(), d.summary);
    }
    assert_eq!(model_hash(model), before);
}

#[test]
fn uniform_only_comparison_matches_distribution_mean() {
    let model = trained();
    let seeds = SeedTree::new(6);
    let budget = SearchBudget {
        eval_samples: 10,
        ..Default::default()
    };
    let r = compare_search_strategies(model, &easy_data().test, &[Strategy::Uniform], 0.7, &budget, &seeds).unwrap();
    let d = subnet_accuracy_distribution(
        model,
        &easy_data().test,
        0.7,
        10,
        &InputVariant::Clean,
        &mut seeds.stream("search-uniform"),
    )
    .unwrap();
    assert_eq!(r.len(), 1);
    assert!((r[0].mean_accuracy - d.summary.mean).abs() < 1e-12);
}

#[test]
fn identity_only_block_is_a_no_op_to_mask() {
    let mut topology = ModelTopology::desk(10);
    topology.blocks.insert(
        2,
        BlockTopology {
            paths: vec![PathTopology::identity()],
            downsamples: false,
            relu_after: false,
        },
    );
    let model = MaskableModel::new(topology, &mut SeedTree::new(3).stream("init")).unwrap();
    let test = &easy_data().test;
    let full_error = 100.0 * (1.0 - clean_accuracy(&model, test, None).unwrap());
    let a = block_vulnerability(&model, test, 0.5, 3, &mut SeedTree::new(5).stream("b")).unwrap();
    assert_eq!(a[2].mean_error, full_error);
    assert!(a[2].errors.iter().all(|&e| e == full_error));
    let b = block_vulnerability(&model, test, 0.5, 3, &mut SeedTree::new(5).stream("b")).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().any(|v| v.downsamples));
}

/// Stem plus one block whose second path is a convolution that outputs zero.
/// Subnets that keep only that path see no features at all.
fn planted_model() -> MaskableModel {
    let stem = ModelTopology::residual(ModelTopology::desk(10).input_shape, &[16], 1, 10, 1).unwrap();
    let mut live = stem.clone();
    live.blocks.truncate(1);
    live.blocks.push(BlockTopology {
        paths: vec![PathTopology {
            layers: vec![LayerTopology::conv(16, 16, 3, 1, false)],
        }],
        downsamples: false,
        relu_after: true,
    });
    let mut planted = live.clone();
    planted.blocks[1].paths.push(PathTopology {
        layers: vec![LayerTopology::conv(16, 16, 3, 1, false)],
    });
    let cfg = TrainConfig {
        lambda: 0.0,
        epochs: 15,
        ..Default::default()
    };
    let trained = train(cfg, live, easy_data(), None).unwrap().trainer.into_model();
    let mut model = MaskableModel::new(planted, &mut SeedTree::new(0).stream("init")).unwrap();
    for p in model.params_mut() {
        match trained.param(&p.name) {
            Some(t) => p.value = t.clone(),
            None => p.value.fill(0.0),
        }
    }
    for (i, rs) in trained.running_stats().iter().enumerate() {
        model.running_stats_mut()[i] = rs.clone();
    }
    model
}

#[test]
fn planted_dead_path_is_found_by_every_strategy() {
    let model = planted_model();
    let test = &easy_data().test;
    let full = clean_accuracy(&model, test, None).unwrap();
    assert!(full > 0.25, "planted model accuracy {full}");
    let budget = SearchBudget {
        steps: 100,
        eval_samples: 64,
        learning_rate: 0.2,
        ..Default::default()
    };
    let results = compare_search_strategies(&model, test, &Strategy::ALL, 0.7, &budget, &SeedTree::new(9)).unwrap();
    for r in &results {
        let dead: Vec<f64> = r
            .specs
            .iter()
            .zip(&r.accuracies)
            .filter(|(s, _)| !s.keeps_path(1, 0))
            .map(|(_, &a)| a)
            .collect();
        assert!(!dead.is_empty(), "{} never masked the live path", r.strategy);
        assert!(dead.iter().all(|&a| (a - 0.1).abs() < 1e-12), "{}: {dead:?}", r.strategy);
    }
    let uniform = results[0].path_frequency(1, 1);
    let controller = results[2].path_frequency(1, 1);
    assert!(controller >= 0.9 && controller > uniform, "controller {controller} vs uniform {uniform}");
}
