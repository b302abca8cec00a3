use ews_core::corruption::{
    corrupt_split, evaluate_cached, evaluate_corrupted, full_suite, CorruptionCache, CorruptionKind, CorruptionSpec,
    MAX_SEVERITY,
};
use ews_core::data::{synthetic, SyntheticConfig};
use ews_core::{MaskableModel, ModelTopology, SeedTree};
use ndarray::Array3;
use proptest::prelude::*;

fn mean_abs_change(a: &Array3<f32>, b: &Array3<f32>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn distortion_grows_with_severity(seed in any::<u64>(), h in 2usize..24, w in 2usize..24) {
        let mut rng = SeedTree::new(seed).stream("img");
        let img = Array3::from_shape_fn((3, h, w), |_| rand::Rng::random::<f32>(&mut rng));
        for kind in CorruptionKind::ALL {
            let mut prev = 0.0;
            for s in 1..=MAX_SEVERITY {
                let out = CorruptionSpec::new(kind, s, seed).apply(img.view()).unwrap();
                prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
                let d = mean_abs_change(&out, &img);
                prop_assert!(d + 1e-6 >= prev, "{kind} severity {s}: {d} < {prev}");
                prev = d;
            }
        }
    }

    #[test]
    fn corruption_is_deterministic(seed in any::<u64>(), s in 1u8..=5) {
        let mut rng = SeedTree::new(seed ^ 1).stream("img");
        let img = Array3::from_shape_fn((3, 8, 8), |_| rand::Rng::random::<f32>(&mut rng));
        for kind in CorruptionKind::ALL {
            let spec = CorruptionSpec::new(kind, s, seed);
            prop_assert_eq!(spec.apply(img.view()).unwrap(), spec.apply(img.view()).unwrap());
        }
    }
}

fn small_data() -> ews_core::data::Dataset {
    synthetic(&SyntheticConfig {
        train: 20,
        val: 10,
        test: 200,
        seed: 4,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn chance_model_errs_near_ninety_everywhere() {
    let data = small_data();
    let mut model = MaskableModel::new(ModelTopology::desk(10), &mut SeedTree::new(1).stream("init")).unwrap();
    model.param_mut("head.weight").unwrap().fill(0.0);
    let table = evaluate_corrupted(&model, &data.test, &full_suite(), 9).unwrap();
    assert_eq!(table.cells.len(), 40);
    for c in &table.cells {
        assert!((c.error - 90.0).abs() <= 3.0, "{} {}: {}", c.kind, c.severity, c.error);
    }
}

#[test]
fn empty_suite_reduces_to_clean_error() {
    let data = small_data();
    let model = MaskableModel::new(ModelTopology::desk(10), &mut SeedTree::new(2).stream("init")).unwrap();
    let table = evaluate_corrupted(&model, &data.test, &[], 0).unwrap();
    assert_eq!(table.mean_error(), table.clean_error);
}

#[test]
fn cache_round_trip_replays_evaluation() {
    let data = small_data();
    let model = MaskableModel::new(ModelTopology::desk(10), &mut SeedTree::new(3).stream("init")).unwrap();
    let cells = [(CorruptionKind::ShotNoise, 2), (CorruptionKind::JpegLike, 5)];
    let cache = CorruptionCache::build(&data.test, &cells, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    cache.write(&path).unwrap();
    let back = CorruptionCache::read(&path).unwrap();
    assert_eq!(back, cache);
    assert_eq!(back.entries[0].split, corrupt_split(&data.test, CorruptionKind::ShotNoise, 2, 11).unwrap());
    assert_eq!(
        evaluate_cached(&model, &data.test, &back).unwrap(),
        evaluate_corrupted(&model, &data.test, &cells, 11).unwrap()
    );
}
