use dvg_core::dvg::{sample_pairs, FipHandle, GeneratorBundle, LossWeights};
use dvg_core::gradcheck::grad_check;
use dvg_core::hfr::{
    extract_features, loss_cls, loss_pair, pretrain_fip, train_hfr, FipConfig, HfrConfig,
    RecognizerBundle,
};
use dvg_core::nn::{Activation, LayerSpec, Mlp};
use dvg_core::rng::RandomSource;
use dvg_core::synthdata::{build_dataset, gather_images, DatasetSpec, Modality, PairedDataset};
use dvg_core::tape::{Tape, Var};
use dvg_core::tensor::Tensor;

fn rng(label: &str) -> RandomSource {
    RandomSource::from_master(9090).derive(label)
}

fn rand_tensor(shape: &[usize], r: &mut RandomSource) -> Tensor {
    let mut data = vec![0.0; shape.iter().product()];
    r.fill_normal(&mut data);
    Tensor::new(shape, data)
}

fn micro_dataset(seed: u64) -> PairedDataset {
    build_dataset(&DatasetSpec {
        train_identities: 4,
        test_identities: 1,
        samples_per_identity: 3,
        seed,
    })
}

fn micro_recognizer(r: &mut RandomSource) -> RecognizerBundle {
    RecognizerBundle::with_dims(1024, (16, 12), 8, 4, r)
}

fn micro_pool(count: usize) -> Vec<dvg_core::synthdata::PairRecord> {
    let mut r = rng("pool-gen");
    let gen = GeneratorBundle::with_dims(
        1024,
        4,
        (8, 8),
        (8, 8),
        (8, 8),
        LossWeights::default(),
        &mut r,
    );
    sample_pairs(&gen, count, &rng("pool-draws"))
}

fn recognizer_bits(bundle: &RecognizerBundle) -> Vec<(String, Vec<u64>)> {
    bundle
        .named_params()
        .into_iter()
        .map(|(name, t)| (name, t.data().iter().map(|x| x.to_bits()).collect()))
        .collect()
}

#[test]
fn cls_uniform_logits_matches_ln_class_count() {
    let mut r = rng("uniform");
    let mut bundle = RecognizerBundle::with_dims(8, (6, 5), 4, 100, &mut r);
    for (_, t) in bundle.head.named_params_mut("head") {
        for x in t.data_mut() {
            *x = 0.0;
        }
    }
    let tape = Tape::new();
    let head = bundle.head.bind(&tape, false);
    let trunk_out = tape.constant(rand_tensor(&[5, 4], &mut r));
    let labels = [3, 17, 0, 99, 42];
    let val = loss_cls(&head, trunk_out, &labels).item();
    assert!((val - 100f64.ln()).abs() < 1e-12, "got {val}");
}

#[test]
fn cls_vanishes_when_the_right_logit_dominates() {
    let mut r = rng("margin");
    let mut bundle = RecognizerBundle::with_dims(4, (4, 4), 4, 4, &mut r);
    for (name, t) in bundle.head.named_params_mut("head") {
        let is_weight = name.ends_with("weight");
        for (i, x) in t.data_mut().iter_mut().enumerate() {
            *x = if is_weight && i % 5 == 0 { 50.0 } else { 0.0 };
        }
    }
    let tape = Tape::new();
    let head = bundle.head.bind(&tape, false);
    // One-hot embeddings: row i activates class i with logit 50.
    let mut eye = vec![0.0; 16];
    for i in 0..4 {
        eye[i * 4 + i] = 1.0;
    }
    let trunk_out = tape.constant(Tensor::matrix(4, 4, eye));
    let val = loss_cls(&head, trunk_out, &[0, 1, 2, 3]).item();
    assert!(val < 1e-9, "got {val}");
}

#[test]
#[should_panic(expected = "label out of range")]
fn cls_rejects_out_of_range_labels() {
    let mut r = rng("bad-label");
    let bundle = RecognizerBundle::with_dims(4, (4, 4), 4, 4, &mut r);
    let tape = Tape::new();
    let head = bundle.head.bind(&tape, false);
    let trunk_out = tape.constant(rand_tensor(&[1, 4], &mut r));
    loss_cls(&head, trunk_out, &[4]);
}

#[test]
fn recognizer_objective_gradients_match_finite_differences() {
    // Trunk 8 -> 6 -> 5 -> 4, head 4 -> 3, batch 2, dropout off.
    let mut r = rng("grad");
    let x_cls = rand_tensor(&[2, 8], &mut r);
    let xn = rand_tensor(&[2, 8], &mut r);
    let xv = rand_tensor(&[2, 8], &mut r);
    let labels = vec![0usize, 2];
    let points: Vec<Tensor> = vec![
        rand_tensor(&[6, 8], &mut r),
        rand_tensor(&[6], &mut r),
        rand_tensor(&[5, 6], &mut r),
        rand_tensor(&[5], &mut r),
        rand_tensor(&[4, 5], &mut r),
        rand_tensor(&[4], &mut r),
        rand_tensor(&[3, 4], &mut r),
        rand_tensor(&[3], &mut r),
    ];

    fn trunk<'t>(vars: &[Var<'t>], x: Var<'t>) -> Var<'t> {
        let h1 = x.linear(vars[0], vars[1]).leaky_relu(0.2);
        let h2 = h1.linear(vars[2], vars[3]).leaky_relu(0.2);
        h2.linear(vars[4], vars[5])
    }

    let err_cls = grad_check(
        |tape, vars| {
            let x = tape.constant(x_cls.clone());
            trunk(vars, x).linear(vars[6], vars[7]).softmax_xent(&labels)
        },
        &points,
        1e-4,
    );
    assert!(err_cls <= 1e-6, "classification gradient error {err_cls}");

    // Tighter step: the curvature normalize_rows adds makes the 1e-4
    // secant overshoot the tolerance by hairs.
    let err_pair = grad_check(
        |tape, vars| {
            let en = trunk(vars, tape.constant(xn.clone())).normalize_rows();
            let ev = trunk(vars, tape.constant(xv.clone())).normalize_rows();
            loss_pair(en, ev)
        },
        &points[..6],
        1e-5,
    );
    assert!(err_pair <= 1e-6, "pair gradient error {err_pair}");

    let err_total = grad_check(
        |tape, vars| {
            let cls = trunk(vars, tape.constant(x_cls.clone()))
                .linear(vars[6], vars[7])
                .softmax_xent(&labels);
            let en = trunk(vars, tape.constant(xn.clone())).normalize_rows();
            let ev = trunk(vars, tape.constant(xv.clone())).normalize_rows();
            cls + loss_pair(en, ev).mul_scalar(0.5)
        },
        &points,
        1e-4,
    );
    assert!(err_total <= 1e-6, "combined gradient error {err_total}");
}

#[test]
fn pair_oracles() {
    let tape = Tape::new();
    let e = tape.constant(Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]));
    assert_eq!(loss_pair(e, e).item(), 0.0);

    // Orthogonal unit embeddings: ||e1 - e2||^2 = 2.
    let a = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]));
    let b = tape.constant(Tensor::matrix(1, 2, vec![0.0, 1.0]));
    let val = loss_pair(a, b).item();
    assert!((val - 2.0).abs() < 1e-12, "got {val}");
}

#[test]
fn pair_stays_within_unit_sphere_bound() {
    let mut r = rng("pair-bound");
    for _ in 0..200 {
        let tape = Tape::new();
        let en = tape.constant(rand_tensor(&[3, 6], &mut r)).normalize_rows();
        let ev = tape.constant(rand_tensor(&[3, 6], &mut r)).normalize_rows();
        let val = loss_pair(en, ev).item();
        assert!((0.0..=4.0 + 1e-12).contains(&val), "out of bound: {val}");
    }
}

#[test]
fn pair_gradient_reaches_trunk_but_not_head() {
    let mut r = rng("pair-grad");
    let bundle = micro_recognizer(&mut r);
    let tape = Tape::new();
    let trunk = bundle.trunk.bind(&tape, true);
    let head = bundle.head.bind(&tape, true);
    let pn = tape.constant(rand_tensor(&[3, 1024], &mut r));
    let pv = tape.constant(rand_tensor(&[3, 1024], &mut r));
    let pair = loss_pair(
        trunk.forward(pn).normalize_rows(),
        trunk.forward(pv).normalize_rows(),
    );
    let grads = tape.backward(pair).unwrap();
    assert!(
        trunk
            .param_vars()
            .iter()
            .any(|v| grads.wrt_ref(*v).is_some_and(|g| g.data().iter().any(|x| *x != 0.0))),
        "trunk received no gradient from the pair term"
    );
    for v in head.param_vars() {
        assert!(grads.wrt_ref(v).is_none(), "head received gradient from the pair term");
    }
}

#[test]
fn training_is_deterministic() {
    let ds = micro_dataset(5);
    let pool = micro_pool(6);
    let cfg = HfrConfig { steps: 12, batch_size: 4, ..HfrConfig::default() };
    let run = || {
        let mut bundle = micro_recognizer(&mut rng("det-init"));
        let mut r = rng("det-train");
        let logs = train_hfr(&mut bundle, &ds, &pool, &cfg, &mut r).unwrap();
        (recognizer_bits(&bundle), serde_json::to_string(&logs).unwrap())
    };
    let (pa, la) = run();
    let (pb, lb) = run();
    assert_eq!(pa, pb);
    assert_eq!(la, lb);
}

#[test]
fn zero_alpha_matches_empty_pool_bit_for_bit() {
    let ds = micro_dataset(5);
    let pool = micro_pool(6);
    let base_cfg = HfrConfig { steps: 15, batch_size: 4, alpha1: 0.0, ..HfrConfig::default() };

    let mut baseline = micro_recognizer(&mut rng("ablate-init"));
    let logs_a =
        train_hfr(&mut baseline, &ds, &[], &base_cfg, &mut rng("ablate-train")).unwrap();

    let mut zero_alpha = micro_recognizer(&mut rng("ablate-init"));
    let logs_b =
        train_hfr(&mut zero_alpha, &ds, &pool, &base_cfg, &mut rng("ablate-train")).unwrap();

    assert_eq!(recognizer_bits(&baseline), recognizer_bits(&zero_alpha));
    assert_eq!(
        serde_json::to_string(&logs_a).unwrap(),
        serde_json::to_string(&logs_b).unwrap()
    );
    assert!(logs_b.iter().all(|l| l.pair == 0.0));

    // The pair term switched on must leave a different trajectory.
    let mut with_pool = micro_recognizer(&mut rng("ablate-init"));
    let cfg = HfrConfig { alpha1: 0.001, ..base_cfg };
    let logs_c = train_hfr(&mut with_pool, &ds, &pool, &cfg, &mut rng("ablate-train")).unwrap();
    assert_ne!(recognizer_bits(&baseline), recognizer_bits(&with_pool));
    assert!(logs_c.iter().all(|l| l.pair > 0.0));
}

#[test]
fn pair_term_shrinks_under_strong_alpha() {
    let ds = micro_dataset(5);
    let pool = micro_pool(4);
    let cfg = HfrConfig { steps: 300, batch_size: 4, alpha1: 0.5, ..HfrConfig::default() };
    let mut bundle = micro_recognizer(&mut rng("shrink-init"));
    let logs = train_hfr(&mut bundle, &ds, &pool, &cfg, &mut rng("shrink-train")).unwrap();
    let mean = |s: &[dvg_core::hfr::HfrStepLog]| {
        s.iter().map(|l| l.pair).sum::<f64>() / s.len() as f64
    };
    let head = mean(&logs[..30]);
    let tail = mean(&logs[logs.len() - 30..]);
    assert!(
        tail < head,
        "pair distance failed to shrink: first 30 steps {head}, last 30 steps {tail}"
    );
}

#[test]
fn schedule_drops_learning_rate_late_in_the_run() {
    let ds = micro_dataset(5);
    let cfg = HfrConfig { steps: 10, batch_size: 4, ..HfrConfig::default() };
    let mut bundle = micro_recognizer(&mut rng("lr-init"));
    let logs = train_hfr(&mut bundle, &ds, &[], &cfg, &mut rng("lr-train")).unwrap();
    assert!(logs[..6].iter().all(|l| l.lr == cfg.lr_initial));
    assert!(logs[6..].iter().all(|l| l.lr == cfg.lr_late));
}

#[test]
fn features_are_unit_norm_deterministic_and_chunk_invariant() {
    let mut r = rng("features");
    let bundle = RecognizerBundle::with_dims(8, (6, 5), 4, 10, &mut r);
    // More rows than one evaluation chunk holds.
    let images = rand_tensor(&[520, 8], &mut r);
    let a = extract_features(&bundle, &images);
    let b = extract_features(&bundle, &images);
    assert_eq!(a, b);
    assert_eq!(a.shape(), &[520, 4]);
    for i in 0..520 {
        let norm: f64 = a.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9, "row {i} norm {norm}");
    }
    // Single-row extraction agrees with the batched pass.
    let one = Tensor::matrix(1, 8, images.row(519).to_vec());
    assert_eq!(extract_features(&bundle, &one).row(0), a.row(519));
}

#[test]
fn pretrained_trunk_is_shared_byte_for_byte() {
    let mut r = rng("pretrained");
    let trunk = Mlp::new(
        16,
        &[
            LayerSpec::plain(8, Activation::LeakyRelu(0.2)),
            LayerSpec::plain(4, Activation::Linear),
        ],
        &mut r,
    );
    let fip = FipHandle { trunk };
    let bundle = RecognizerBundle::from_pretrained(&fip, 7, &mut r);
    assert_eq!(bundle.class_count(), 7);
    assert_eq!(bundle.embed_dim(), 4);
    let fip_bits: Vec<Vec<u64>> = fip
        .trunk
        .named_params("t")
        .iter()
        .map(|(_, t)| t.data().iter().map(|x| x.to_bits()).collect())
        .collect();
    let trunk_bits: Vec<Vec<u64>> = bundle
        .trunk
        .named_params("t")
        .iter()
        .map(|(_, t)| t.data().iter().map(|x| x.to_bits()).collect())
        .collect();
    assert_eq!(fip_bits, trunk_bits);
}

#[test]
fn extractor_gate_passes_and_the_modality_gap_is_material() {
    let ds = build_dataset(&DatasetSpec::with_seed(7));
    let source = RandomSource::from_master(7).derive("fip");
    let (fip, report) = pretrain_fip(&ds, &FipConfig::default(), &source).unwrap();
    assert!(
        report.holdout_top1_v >= 0.9,
        "held-out top-1 on the training modality: {}",
        report.holdout_top1_v
    );
    assert!(
        report.holdout_top1_n <= report.holdout_top1_v - 0.15,
        "modality gap too small: V {} vs N {}",
        report.holdout_top1_v,
        report.holdout_top1_n
    );

    let idxs: Vec<usize> = (0..4).collect();
    let feats = fip.features_tensor(&gather_images(&ds.test, &idxs, Modality::N));
    for i in 0..4 {
        let norm: f64 = feats.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9, "feature row {i} norm {norm}");
    }
}
