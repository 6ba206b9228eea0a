use mtcmtm::autodiff::grad_check_params;
use mtcmtm::encoders::*;
use mtcmtm::layers::*;
use mtcmtm::{ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect::<Vec<_>>()).unwrap()
}

fn small_tab(input_len: usize, n_blocks: usize) -> TabularConfig {
    TabularConfig {
        input_len,
        stem_channels: 4,
        stem_len: 3,
        n_blocks,
        cbam_reduction: 2,
        cbam_kernel: 3,
    }
}

fn zeroed(specs: &[ParamSpec]) -> ParamStore<f64> {
    init_params(&with_scheme(specs, InitScheme::Zeros), 0)
}

fn run<R>(store: &ParamStore<f64>, f: impl for<'t> FnOnce(&Forward<'t, '_, f64>) -> R) -> R {
    let tape = Tape::new();
    let fw = Forward::new(&tape, store, Mode::Eval);
    f(&fw)
}

#[test]
fn tabular_identical_rows_give_identical_features() {
    let enc = TabularEncoder::new(&small_tab(5, 2)).unwrap();
    let store = init_params(&enc.specs(), 3);
    let row = random(&[1, 5], 4, -1.0, 1.0);
    let mut data = row.to_vec();
    data.extend(random(&[1, 5], 5, -1.0, 1.0).to_vec());
    data.extend(row.to_vec());
    let x = Tensor::new(vec![3, 5], data).unwrap();
    let v = run(&store, |f| enc.forward(f, f.constant(x)).unwrap().value());
    let d = enc.feature_dim();
    assert_eq!(v.shape(), &[3, d]);
    assert_eq!(v.data()[..d], v.data()[2 * d..]);
}

#[test]
fn tabular_rejects_wrong_width() {
    let enc = TabularEncoder::new(&small_tab(5, 1)).unwrap();
    let store = init_params(&enc.specs(), 0);
    let err = run(&store, |f| enc.forward(f, f.constant(Tensor::zeros(vec![2, 4]))).unwrap_err());
    assert!(err.to_string().contains("tabular_encode"));
}

#[test]
fn tabular_encoder_gradients() {
    let enc = TabularEncoder::new(&small_tab(4, 2)).unwrap();
    let store = init_params(&enc.specs(), 1);
    let x = random(&[3, 4], 2, -1.0, 1.0);
    let report = grad_check_params(
        |tape, s| {
            let f = Forward::new(tape, s, Mode::Train);
            enc.forward(&f, tape.constant(x.clone()))?.mean_all()
        },
        &store,
        1e-6,
        Some(6),
        9,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn image_mlp_with_zero_weights_returns_last_bias() {
    let cfg = ImageConfig {
        height: 8,
        width: 8,
        feature_dim: 3,
        hidden: 5,
        ..ImageConfig::default()
    };
    let enc = ImageEncoder::new(&cfg);
    let mut store = zeroed(&enc.specs());
    store.set("img.fc2.b", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
    let x = random(&[2, 8, 8, 1], 1, 0.0, 1.0);
    let v = run(&store, |f| enc.forward(f, f.constant(x)).unwrap().value());
    assert_eq!(v.to_vec(), vec![0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
}

#[test]
fn image_encoders_shapes_and_gradients() {
    for kind in [ImageKind::Mlp, ImageKind::SmallCnn] {
        let cfg = ImageConfig {
            kind,
            height: 8,
            width: 8,
            feature_dim: 3,
            hidden: 4,
            cnn_channels: [2, 3],
            ..ImageConfig::default()
        };
        let enc = ImageEncoder::new(&cfg);
        let store = init_params(&enc.specs(), 5);
        let x = random(&[2, 8, 8, 1], 6, 0.0, 1.0);
        let v = run(&store, |f| enc.forward(f, f.constant(x.clone())).unwrap().value());
        assert_eq!(v.shape(), &[2, 3]);
        let bad = run(&store, |f| enc.forward(f, f.constant(Tensor::zeros(vec![2, 8, 8]))).is_err());
        assert!(bad);
        let report = grad_check_params(
            |tape, s| {
                let f = Forward::new(tape, s, Mode::Train);
                enc.forward(&f, tape.constant(x.clone()))?.powf(2.0)?.mean_all()
            },
            &store,
            1e-6,
            Some(8),
            3,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{kind:?}: {report:?}");
    }
}

#[test]
fn projection_rows_have_unit_norm() {
    let head = ProjectionHead::new("proj", 6, 4);
    let store = init_params(&head.specs(), 3);
    let v = random(&[5, 6], 3, -2.0, 2.0);
    let z = run(&store, |f| head.forward(f, f.constant(v)).unwrap().value());
    for row in z.data().chunks(4) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
}

#[test]
fn projection_matches_brute_force() {
    let head = ProjectionHead::new("proj", 3, 2);
    let mut store = init_params(&head.specs(), 3);
    for (i, name) in ["proj.fc1.b", "proj.fc2.b"].into_iter().enumerate() {
        let shape = store.get(name).unwrap().shape().to_vec();
        store.set(name, random(&shape, 40 + i as u64, -0.5, 0.5)).unwrap();
    }
    let v = random(&[2, 3], 8, -1.0, 1.0);
    let z = run(&store, |f| head.forward(f, f.constant(v.clone())).unwrap().value());
    let w1 = store.get("proj.fc1.w").unwrap().to_vec();
    let b1 = store.get("proj.fc1.b").unwrap().to_vec();
    let w2 = store.get("proj.fc2.w").unwrap().to_vec();
    let b2 = store.get("proj.fc2.b").unwrap().to_vec();
    for r in 0..2 {
        let x = &v.data()[r * 3..r * 3 + 3];
        let h: Vec<f64> = (0..3)
            .map(|j| (b1[j] + (0..3).map(|i| x[i] * w1[i * 3 + j]).sum::<f64>()).max(0.0))
            .collect();
        let o: Vec<f64> = (0..2)
            .map(|j| b2[j] + (0..3).map(|i| h[i] * w2[i * 2 + j]).sum::<f64>())
            .collect();
        let n = o.iter().map(|a| a * a).sum::<f64>().sqrt();
        for j in 0..2 {
            assert!((z.data()[r * 2 + j] - o[j] / n).abs() < 1e-12);
        }
    }
}

#[test]
fn projection_with_identity_head_is_scale_invariant() {
    let head = ProjectionHead::new("proj", 3, 2);
    let mut store = zeroed(&head.specs());
    store.set("proj.fc1.w", Tensor::eye(3)).unwrap();
    store
        .set("proj.fc2.w", Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap())
        .unwrap();
    let v = random(&[4, 3], 2, 0.1, 1.0);
    let scaled = v.map(|x| 10.0 * x);
    let a = run(&store, |f| head.forward(f, f.constant(v)).unwrap().value());
    let b = run(&store, |f| head.forward(f, f.constant(scaled)).unwrap().value());
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn mask_estimator_range_and_zero_weights() {
    let head = MaskEstimator::new(4, 6);
    let z = random(&[3, 4], 1, -30.0, 30.0);
    let zero = run(&zeroed(&head.specs()), |f| head.forward(f, f.constant(z.clone())).unwrap().value());
    assert!(zero.data().iter().all(|&v| v == 0.5));
    let m = run(&init_params(&head.specs(), 2), |f| head.forward(f, f.constant(z)).unwrap().value());
    assert_eq!(m.shape(), &[3, 6]);
    assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn predictor_head_zero_weights_give_uniform_probabilities() {
    let head = PredictorHead::new("head", 4, Task::Classification { classes: 5 });
    let v = random(&[2, 4], 1, -1.0, 1.0);
    let logits = run(&zeroed(&head.specs()), |f| {
        head.forward(f, f.constant(v)).unwrap().softmax(1).unwrap().value()
    });
    assert_eq!(logits.shape(), &[2, 5]);
    assert!(logits.data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
}

#[test]
fn dense_stats_formula() {
    assert_eq!(
        ModelStats::dense(10, 5),
        ModelStats {
            param_count: 55,
            flops_per_forward: 100
        }
    );
}

#[test]
fn doubling_blocks_grows_both_counts() {
    let task = Task::Regression { dim: 2 };
    for n in 1..=4 {
        let a = model_stats(&small_tab(6, n), task);
        let b = model_stats(&small_tab(6, 2 * n), task);
        assert!(b.param_count > a.param_count && b.flops_per_forward > a.flops_per_forward);
    }
}

#[test]
fn pretrain_model_registers_the_downstream_encoder() {
    let cfg = EncoderConfig {
        tabular: small_tab(5, 2),
        ..EncoderConfig::default()
    };
    let pre = PretrainModel::new(&cfg).unwrap();
    let down = DownstreamModel::new(&cfg.tabular, Task::Regression { dim: 1 }).unwrap();
    let pre_tab: Vec<_> = pre.specs().into_iter().filter(|s| s.name.starts_with("tab.")).collect();
    let down_tab: Vec<_> = down.specs().into_iter().filter(|s| s.name.starts_with("tab.")).collect();
    assert_eq!(pre_tab, down_tab);
}

fn tab_config() -> impl Strategy<Value = TabularConfig> {
    (1usize..20, 1usize..4, 1usize..6, 1usize..=8, prop::sample::select(vec![1usize, 2]), prop::sample::select(vec![1usize, 3, 5]))
        .prop_map(|(input_len, c, stem_len, n_blocks, reduction, kernel)| TabularConfig {
            input_len,
            stem_channels: 2 * c,
            stem_len,
            n_blocks,
            cbam_reduction: reduction,
            cbam_kernel: kernel,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stats_count_registered_parameters(cfg in tab_config(), classes in 2usize..6) {
        for task in [Task::Regression { dim: classes - 1 }, Task::Classification { classes }] {
            let model = DownstreamModel::new(&cfg, task).unwrap();
            let specs = model.specs();
            prop_assert_eq!(model_stats(&cfg, task).param_count, registered_count(&specs));
            let store: ParamStore<f64> = init_params(&specs, 0);
            prop_assert_eq!(store.trainable_count(), registered_count(&specs));
        }
    }

    #[test]
    fn tabular_output_shape(cfg in tab_config(), batch in 1usize..5, seed in any::<u64>()) {
        let enc = TabularEncoder::new(&cfg).unwrap();
        let store = init_params(&enc.specs(), seed);
        let x = random(&[batch, cfg.input_len], seed, -1.0, 1.0);
        let v = run(&store, |f| enc.forward(f, f.constant(x)).unwrap().value());
        prop_assert_eq!(v.shape(), &[batch, cfg.feature_dim()]);
        prop_assert!(v.is_finite());
    }
}
