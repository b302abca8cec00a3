use ews_core::loss::cross_entropy_with_grad;
use ews_core::model::{Dropout, Gradients};
use ews_core::topology::{BlockTopology, InputShape, LayerTopology, PathTopology};
use ews_core::{ForwardOptions, LayerId, MaskableModel, Mode, ModelTopology, SeedTree, SubnetSpec};
use ndarray::Array4;
use rand::Rng;

fn random_input(n: usize, shape: InputShape, seed: u64) -> Array4<f32> {
    let mut rng = SeedTree::new(seed).stream("input");
    Array4::from_shape_fn((n, shape.channels, shape.height, shape.width), |_| rng.random::<f32>())
}

fn desk_model(seed: u64) -> MaskableModel {
    let mut rng = SeedTree::new(seed).stream("init");
    MaskableModel::new(ModelTopology::desk(10), &mut rng).unwrap()
}

fn small_topology() -> ModelTopology {
    let shape = InputShape {
        height: 6,
        width: 6,
        channels: 2,
    };
    ModelTopology::residual(shape, &[4, 8], 1, 3, 2).unwrap()
}

#[test]
fn logits_shape_and_zero_head() {
    let mut model = desk_model(1);
    let x = random_input(4, model.topology().input_shape, 2);
    let logits = model.forward_full(&x).unwrap();
    assert_eq!(logits.dim(), (4, 10));
    assert!(logits.iter().all(|v| v.is_finite()));

    model.param_mut("head.weight").unwrap().fill(0.0);
    let logits = model.forward_full(&x).unwrap();
    assert!(logits.iter().all(|&v| v == 0.0));
}

#[test]
fn eval_forward_is_bitwise_deterministic() {
    let mut model = desk_model(3);
    model.set_mode(Mode::Eval);
    let x = random_input(5, model.topology().input_shape, 4);
    let a = model.forward_full(&x).unwrap();
    let b = model.forward_full(&x).unwrap();
    assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn rejects_wrong_input_shape() {
    let model = desk_model(5);
    let x = Array4::<f32>::zeros((2, 3, 8, 8));
    assert!(model.forward_full(&x).is_err());
}

#[test]
fn all_ones_mask_matches_full_forward() {
    let mut model = desk_model(6);
    let full = SubnetSpec::full(model.topology());
    for mode in [Mode::Train, Mode::Eval] {
        model.set_mode(mode);
        let x = random_input(16, model.topology().input_shape, 7);
        let a = model.forward_full(&x).unwrap();
        let b = model.forward_masked(&x, &full).unwrap();
        let diff = (&a - &b).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(diff <= 1e-6, "{mode:?}: {diff}");
    }
}

#[test]
fn invalid_subnet_is_rejected() {
    let model = desk_model(8);
    let mut spec = SubnetSpec::full(model.topology());
    spec.path_choices[1] = vec![3];
    let x = random_input(1, model.topology().input_shape, 9);
    assert!(model.forward_masked(&x, &spec).is_err());
}

#[test]
fn identity_only_block_passes_input_through() {
    // stem, then a block with a residual path and an identity path
    let shape = InputShape {
        height: 5,
        width: 5,
        channels: 3,
    };
    let topology = ModelTopology::residual(shape, &[4], 1, 2, 2).unwrap();
    let mut rng = SeedTree::new(10).stream("init");
    let mut model = MaskableModel::new(topology.clone(), &mut rng).unwrap();
    model.set_mode(Mode::Eval);
    let mut spec = SubnetSpec::full(&topology);
    spec.width = 0.5;
    spec.path_choices[1] = vec![1];
    spec.channel_group_choices.retain(|id, _| id.block == 0);
    spec.block_widths.insert(0, 1.0);
    spec.validate(&topology).unwrap();
    let x = random_input(3, shape, 11);
    let pass = model
        .forward(&x, ForwardOptions::new(Mode::Eval).masked(&spec).keeping_block_outputs())
        .unwrap();
    assert_eq!(pass.block_outputs[0], pass.block_outputs[1]);
}

#[test]
fn masked_channel_is_exactly_zero() {
    let shape = InputShape {
        height: 4,
        width: 4,
        channels: 1,
    };
    let topology = ModelTopology {
        input_shape: shape,
        blocks: vec![BlockTopology {
            paths: vec![PathTopology {
                layers: vec![LayerTopology::conv(1, 4, 3, 1, false)],
            }],
            downsamples: false,
            relu_after: false,
        }],
        num_classes: 2,
        groups: 4,
    };
    let mut rng = SeedTree::new(12).stream("init");
    let model = MaskableModel::new(topology.clone(), &mut rng).unwrap();
    let id = LayerId {
        block: 0,
        path: 0,
        layer: 0,
    };
    let mut spec = SubnetSpec::full(&topology);
    spec.width = 0.75;
    spec.channel_group_choices.insert(id, vec![1, 2, 3]);
    spec.validate(&topology).unwrap();
    let x = random_input(2, shape, 13);
    for mode in [Mode::Train, Mode::Eval] {
        let pass = model
            .forward(&x, ForwardOptions::new(mode).masked(&spec).keeping_block_outputs())
            .unwrap();
        let out = &pass.block_outputs[0];
        for i in 0..2 {
            assert!(out.slice(ndarray::s![i, 0, .., ..]).iter().all(|&v| v == 0.0));
            assert!(out.slice(ndarray::s![i, 1, .., ..]).iter().any(|&v| v != 0.0));
        }
    }
}

#[test]
fn deselected_path_parameters_do_not_matter() {
    let mut model = desk_model(14);
    model.set_mode(Mode::Eval);
    let mut rng = SeedTree::new(15).stream("spec");
    let spec = ews_core::sample_uniform_subnet(model.topology(), 0.7, &mut rng);
    let x = random_input(6, model.topology().input_shape, 16);
    let before = model.forward_masked(&x, &spec).unwrap();
    let topology = model.topology().clone();
    for (b, block) in topology.blocks.iter().enumerate() {
        for p in 0..block.n_paths() {
            if spec.keeps_path(b, p) {
                continue;
            }
            let prefix = format!("blocks.{b}.paths.{p}.");
            for t in model.params_mut().iter_mut().filter(|t| t.name.starts_with(&prefix)) {
                t.value.mapv_inplace(|_| rng.random::<f32>() * 100.0 - 50.0);
            }
        }
    }
    let after = model.forward_masked(&x, &spec).unwrap();
    assert_eq!(before, after);
}

#[test]
fn masked_train_forward_leaves_running_stats() {
    let mut model = desk_model(17);
    let x = random_input(8, model.topology().input_shape, 18);
    let mut rng = SeedTree::new(19).stream("spec");
    let spec = ews_core::sample_uniform_subnet(model.topology(), 0.7, &mut rng);
    let before = model.running_stats().to_vec();
    let pass = model.forward(&x, ForwardOptions::new(Mode::Train).masked(&spec)).unwrap();
    model.commit_running_stats(&pass);
    assert_eq!(before, model.running_stats());
    let pass = model.forward(&x, ForwardOptions::new(Mode::Train)).unwrap();
    model.commit_running_stats(&pass);
    assert_ne!(before, model.running_stats());
}

#[test]
fn dropout_rate_one_zeroes_block_outputs() {
    let model = desk_model(20);
    let x = random_input(3, model.topology().input_shape, 21);
    let mut rng = SeedTree::new(22).stream("drop");
    let pass = model
        .forward(
            &x,
            ForwardOptions::new(Mode::Train)
                .with_dropout(Dropout {
                    rate: 1.0,
                    rng: &mut rng,
                })
                .keeping_block_outputs(),
        )
        .unwrap();
    assert!(pass.block_outputs[1].iter().all(|&v| v == 0.0));

    // eval mode ignores dropout entirely
    let mut rng = SeedTree::new(22).stream("drop");
    let a = model
        .forward(
            &x,
            ForwardOptions::new(Mode::Eval).with_dropout(Dropout {
                rate: 0.5,
                rng: &mut rng,
            }),
        )
        .unwrap();
    let b = model.forward(&x, ForwardOptions::new(Mode::Eval)).unwrap();
    assert_eq!(a.logits, b.logits);
}

fn loss_of(model: &MaskableModel, x: &Array4<f32>, labels: &[usize], mode: Mode, spec: Option<&SubnetSpec>) -> f64 {
    let mut opts = ForwardOptions::new(mode);
    opts.subnet = spec;
    let pass = model.forward(x, opts).unwrap();
    cross_entropy_with_grad(&pass.logits, labels).unwrap().0
}

fn check_param_gradients(mode: Mode, masked: bool) {
    let topology = small_topology();
    let mut rng = SeedTree::new(23).stream("init");
    let mut model = MaskableModel::new(topology.clone(), &mut rng).unwrap();
    // non-trivial norm parameters
    for t in model.params_mut().iter_mut().filter(|t| t.name.contains("norm")) {
        t.value.mapv_inplace(|v| v + rng.random::<f32>() * 0.5 - 0.25);
    }
    for rs in model.running_stats_mut() {
        for v in &mut rs.mean {
            *v = rng.random::<f32>() * 0.2;
        }
    }
    let spec = masked.then(|| ews_core::sample_uniform_subnet(&topology, 0.7, &mut rng));
    let x = random_input(4, topology.input_shape, 24);
    let labels = [0, 1, 2, 1];
    let mut opts = ForwardOptions::new(mode);
    opts.subnet = spec.as_ref();
    let pass = model.forward(&x, opts).unwrap();
    let (_, dlogits) = cross_entropy_with_grad(&pass.logits, &labels).unwrap();
    let mut grads = Gradients::zeros_like(&model);
    let dx = model.backward(&pass, &dlogits, &mut grads, true).unwrap();

    let h = 1e-3f32;
    let mut checked = 0;
    for pi in 0..model.params().len() {
        let len = model.params()[pi].value.len();
        for idx in (0..len).step_by((len / 3).max(1)) {
            let analytic = grads.0[pi].as_slice().unwrap()[idx] as f64;
            let orig = model.params()[pi].value.as_slice().unwrap()[idx];
            model.params_mut()[pi].value.as_slice_mut().unwrap()[idx] = orig + h;
            let plus = loss_of(&model, &x, &labels, mode, spec.as_ref());
            model.params_mut()[pi].value.as_slice_mut().unwrap()[idx] = orig - h;
            let minus = loss_of(&model, &x, &labels, mode, spec.as_ref());
            model.params_mut()[pi].value.as_slice_mut().unwrap()[idx] = orig;
            let fd = (plus - minus) / (2.0 * h as f64);
            let tol = 2e-3 + 5e-2 * fd.abs().max(analytic.abs());
            assert!(
                (fd - analytic).abs() <= tol,
                "{} [{idx}] ({mode:?}, masked={masked}): fd {fd} vs analytic {analytic}",
                model.params()[pi].name
            );
            checked += 1;
        }
    }
    assert!(checked > 20);

    // input gradient
    let mut xs = x.clone();
    for idx in [0usize, 17, 40, 100] {
        let orig = xs.as_slice().unwrap()[idx];
        xs.as_slice_mut().unwrap()[idx] = orig + h;
        let plus = loss_of(&model, &xs, &labels, mode, spec.as_ref());
        xs.as_slice_mut().unwrap()[idx] = orig - h;
        let minus = loss_of(&model, &xs, &labels, mode, spec.as_ref());
        xs.as_slice_mut().unwrap()[idx] = orig;
        let fd = (plus - minus) / (2.0 * h as f64);
        let analytic = dx.as_slice().unwrap()[idx] as f64;
        assert!((fd - analytic).abs() <= 2e-3 + 5e-2 * fd.abs(), "input[{idx}]: {fd} vs {analytic}");
    }
}

#[test]
fn parameter_gradients_match_finite_differences_train() {
    check_param_gradients(Mode::Train, false);
}

#[test]
fn parameter_gradients_match_finite_differences_eval() {
    check_param_gradients(Mode::Eval, false);
}

#[test]
fn parameter_gradients_match_finite_differences_masked() {
    check_param_gradients(Mode::Train, true);
    check_param_gradients(Mode::Eval, true);
}

#[test]
fn group_l1_reflects_filter_weights() {
    let topology = small_topology();
    let mut rng = SeedTree::new(25).stream("init");
    let mut model = MaskableModel::new(topology, &mut rng).unwrap();
    let id = LayerId {
        block: 0,
        path: 0,
        layer: 0,
    };
    let name = model.weight_name(id).unwrap().to_string();
    let w = model.param_mut(&name).unwrap();
    w.fill(1.0);
    let per_filter = w.len() / w.shape()[0];
    let norms = model.group_weight_l1(id);
    // 4 output channels in 2 groups
    assert_eq!(norms, vec![2.0 * per_filter as f64; 2]);
}
