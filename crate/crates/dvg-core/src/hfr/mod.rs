//! Cross-modality recognizer and its trainer.
//!
//! One trunk embeds both modalities; a linear head over the raw trunk
//! activations carries the supervised identity term, while generated pairs
//! feed an unlabeled distance term that pulls the two modalities of one
//! identity together in feature space. Recognition features are the
//! unit-normalized trunk activations; the head never touches them.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dvg::FipHandle;
use crate::error::{require_finite, TrainError};
use crate::nn::{
    center_pixels, Activation, BoundMlp, LayerSpec, LrSchedule, Mlp, Optimizer, OptimizerKind,
};
use crate::rng::RandomSource;
use crate::synthdata::{gather_images, warp_image, Modality, PairRecord, PairedDataset};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const LEAKY_SLOPE: f64 = 0.2;
const TRUNK_DROPOUT: f64 = 0.5;
/// Rows per forward pass when embedding large image sets.
const EVAL_CHUNK: usize = 512;

/// Embedding trunk plus identity head.
#[derive(Clone, Debug)]
pub struct RecognizerBundle {
    pub trunk: Mlp,
    pub head: Mlp,
}

fn linear_head(embed_dim: usize, class_count: usize, rng: &mut RandomSource) -> Mlp {
    Mlp::new(
        embed_dim,
        &[LayerSpec::plain(class_count, Activation::Linear)],
        rng,
    )
}

impl RecognizerBundle {
    /// Full-scale recognizer: trunk 1024→256→128→64 with dropout 0.5 on the
    /// hidden layers, linear head over the raw 64-dim activations.
    pub fn new(image_dim: usize, class_count: usize, rng: &mut RandomSource) -> Self {
        Self::with_dims(image_dim, (256, 128), 64, class_count, rng)
    }

    pub fn with_dims(
        image_dim: usize,
        hidden: (usize, usize),
        embed_dim: usize,
        class_count: usize,
        rng: &mut RandomSource,
    ) -> Self {
        let hidden_layer = |fan_out| LayerSpec {
            fan_out,
            activation: Activation::LeakyRelu(LEAKY_SLOPE),
            dropout: TRUNK_DROPOUT,
        };
        let trunk = Mlp::new(
            image_dim,
            &[
                hidden_layer(hidden.0),
                hidden_layer(hidden.1),
                LayerSpec::plain(embed_dim, Activation::Linear),
            ],
            rng,
        );
        let head = linear_head(embed_dim, class_count, rng);
        RecognizerBundle { trunk, head }
    }

    /// Start from a pretrained extractor trunk; only the head is fresh.
    pub fn from_pretrained(fip: &FipHandle, class_count: usize, rng: &mut RandomSource) -> Self {
        RecognizerBundle {
            trunk: fip.trunk.clone(),
            head: linear_head(fip.feature_dim(), class_count, rng),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.trunk.output_dim()
    }

    pub fn class_count(&self) -> usize {
        self.head.output_dim()
    }

    /// Stable `(name, tensor)` order: trunk first, head after.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.trunk.named_params("trunk");
        out.extend(self.head.named_params("head"));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.trunk.named_params_mut("trunk");
        out.extend(self.head.named_params_mut("head"));
        out
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.named_params().iter().map(|(_, t)| t.numel()).collect()
    }
}

/// Mean identity cross-entropy of the head over raw trunk activations.
pub fn loss_cls<'t>(head: &BoundMlp<'t>, trunk_out: Var<'t>, labels: &[usize]) -> Var<'t> {
    head.forward(trunk_out).softmax_xent(labels)
}

/// Mean squared distance between the unit embeddings of a pair batch;
/// unit rows keep every per-pair term within [0, 4].
pub fn loss_pair<'t>(embed_n: Var<'t>, embed_v: Var<'t>) -> Var<'t> {
    let b = embed_n.shape()[0] as f64;
    (embed_n - embed_v).square().sum_all().mul_scalar(1.0 / b)
}

/// Unit-norm recognition features of an image batch, dropout off.
pub fn extract_features(bundle: &RecognizerBundle, images: &Tensor) -> Tensor {
    let rows = images.shape()[0];
    let in_dim = images.shape()[1];
    let mut data = Vec::with_capacity(rows * bundle.embed_dim());
    let mut start = 0usize;
    while start < rows {
        let take = (rows - start).min(EVAL_CHUNK);
        let mut chunk = Vec::with_capacity(take * in_dim);
        for r in start..start + take {
            chunk.extend_from_slice(images.row(r));
        }
        let tape = Tape::new();
        let trunk = bundle.trunk.bind(&tape, false);
        let x = tape.constant(Tensor::matrix(take, in_dim, chunk));
        let feats = trunk.forward(center_pixels(x)).normalize_rows().value();
        data.extend_from_slice(feats.data());
        start += take;
    }
    Tensor::matrix(rows, bundle.embed_dim(), data)
}

/// Fraction of rows whose top head logit names the right class.
pub fn top1_accuracy(bundle: &RecognizerBundle, images: &Tensor, labels: &[usize]) -> f64 {
    let rows = images.shape()[0];
    let in_dim = images.shape()[1];
    assert_eq!(rows, labels.len(), "one label per image row");
    let mut hits = 0usize;
    let mut start = 0usize;
    while start < rows {
        let take = (rows - start).min(EVAL_CHUNK);
        let mut chunk = Vec::with_capacity(take * in_dim);
        for r in start..start + take {
            chunk.extend_from_slice(images.row(r));
        }
        let tape = Tape::new();
        let trunk = bundle.trunk.bind(&tape, false);
        let head = bundle.head.bind(&tape, false);
        let x = tape.constant(Tensor::matrix(take, in_dim, chunk));
        let logits = head.forward(trunk.forward(center_pixels(x))).value();
        for i in 0..take {
            let row = logits.row(i);
            let best = (1..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            if best == labels[start + i] {
                hits += 1;
            }
        }
        start += take;
    }
    hits as f64 / rows as f64
}

/// Fresh geometric + brightness jitter for every row of an ink-on-white
/// image batch, covering the same perturbation ranges the dataset itself
/// uses. Teaching the trunk these invariances from a handful of stored
/// renders per identity needs more coverage than the renders alone give.
pub fn jitter_images(images: &Tensor, rng: &mut RandomSource) -> Tensor {
    let rows = images.shape()[0];
    let dim = images.shape()[1];
    let side = (dim as f64).sqrt() as usize;
    assert_eq!(side * side, dim, "rows must be square images");
    let max_rot = 25.0f64.to_radians();
    let mut data = Vec::with_capacity(rows * dim);
    for r in 0..rows {
        let rot = rng.uniform_in(-max_rot, max_rot);
        let dx = rng.uniform_in(-3.0, 3.0);
        let dy = rng.uniform_in(-3.0, 3.0);
        let scale = rng.uniform_in(0.85, 1.15);
        let gain = rng.uniform_in(0.9, 1.1);
        let warped = warp_image(images.row(r), side, rot, dx, dy, scale);
        data.extend(warped.iter().map(|&p| (1.0 - gain * (1.0 - p)).clamp(0.0, 1.0)));
    }
    Tensor::matrix(rows, dim, data)
}

/// Class index of each distinct identity, assigned in ascending identity
/// order so labels are stable across runs.
pub fn class_index(pairs: &[PairRecord]) -> HashMap<u32, usize> {
    let mut ids: Vec<u32> = pairs.iter().map(|p| p.identity).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect()
}

/// Identity-classifier pretraining knobs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FipConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Renders per identity held out of training for the accuracy gate.
    pub holdout_per_identity: usize,
    /// Required held-out top-1 accuracy on the training modality.
    pub gate_top1: f64,
    pub lr_initial: f64,
    pub lr_late: f64,
    pub lr_drop_frac: f64,
}

impl Default for FipConfig {
    fn default() -> Self {
        FipConfig {
            steps: 4000,
            batch_size: 32,
            holdout_per_identity: 2,
            gate_top1: 0.9,
            lr_initial: 1e-3,
            lr_late: 5e-4,
            lr_drop_frac: 0.6,
        }
    }
}

/// Held-out accuracy of a freshly pretrained extractor.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct FipReport {
    /// Top-1 on held-out renders of the modality it was trained on (V).
    pub holdout_top1_v: f64,
    /// The same classifier applied to the matching modality-N renders.
    pub holdout_top1_n: f64,
    pub final_cls: f64,
}

/// Train an identity classifier on modality-V training images, check it on
/// held-out renders of the same identities, and freeze its trunk as the
/// identity feature extractor. Fails if the accuracy gate is unmet.
pub fn pretrain_fip(
    dataset: &PairedDataset,
    cfg: &FipConfig,
    rng: &RandomSource,
) -> Result<(FipHandle, FipReport), TrainError> {
    if dataset.train.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    assert!(cfg.steps >= 1, "pretraining needs at least one step");
    assert!(cfg.batch_size >= 1, "batch size must be positive");
    let classes = class_index(&dataset.train);

    // Identity-major holdout: the last renders of every identity are kept
    // out of training so the gate measures generalization over nuisance,
    // not memorized pixels.
    let mut by_id: HashMap<u32, Vec<usize>> = HashMap::new();
    for (i, p) in dataset.train.iter().enumerate() {
        by_id.entry(p.identity).or_default().push(i);
    }
    let mut ids: Vec<u32> = by_id.keys().copied().collect();
    ids.sort_unstable();
    let mut fit_idx = Vec::new();
    let mut held_idx = Vec::new();
    for id in ids {
        let list = &by_id[&id];
        assert!(
            list.len() > cfg.holdout_per_identity,
            "identity {id} has {} renders; holdout of {} leaves nothing to train on",
            list.len(),
            cfg.holdout_per_identity
        );
        let cut = list.len() - cfg.holdout_per_identity;
        fit_idx.extend_from_slice(&list[..cut]);
        held_idx.extend_from_slice(&list[cut..]);
    }

    let image_dim = dataset.train[0].n.len();
    let mut init_rng = rng.derive("init");
    let mut bundle = RecognizerBundle::new(image_dim, classes.len(), &mut init_rng);
    // Adam here: pretraining starts from scratch, and the momentum-SGD rule
    // reserved for fine-tuning is far too slow to clear the gate.
    let mut opt = Optimizer::new(OptimizerKind::adam(cfg.lr_initial), &bundle.param_sizes());
    let schedule = LrSchedule {
        initial: cfg.lr_initial,
        late: cfg.lr_late,
        drop_at_frac: cfg.lr_drop_frac,
    };
    let mut step_rng = rng.derive("steps");
    let mut final_cls = f64::NAN;
    for step in 0..cfg.steps {
        let idxs: Vec<usize> = (0..cfg.batch_size)
            .map(|_| fit_idx[step_rng.index(fit_idx.len())])
            .collect();
        let labels: Vec<usize> =
            idxs.iter().map(|&i| classes[&dataset.train[i].identity]).collect();
        let x = jitter_images(&gather_images(&dataset.train, &idxs, Modality::V), &mut step_rng);
        let tape = Tape::new();
        let trunk = bundle.trunk.bind(&tape, true);
        let head = bundle.head.bind(&tape, true);
        // No dropout here: the jitter already regularizes, and the trunk has
        // to fit tightly before the gate check. Fine-tuning later runs the
        // same trunk with its stated dropout.
        let raw = trunk.forward(center_pixels(tape.constant(x)));
        let cls = loss_cls(&head, raw, &labels);
        final_cls = require_finite("cls", cls.item())?;
        let grads = tape.backward(cls)?;
        let mut vars = trunk.param_vars();
        vars.extend(head.param_vars());
        let grad_refs: Vec<Option<&Tensor>> = vars.iter().map(|v| grads.wrt_ref(*v)).collect();
        opt.set_lr(schedule.at(step, cfg.steps));
        opt.step(&mut bundle.named_params_mut(), &grad_refs)?;
    }

    let held_labels: Vec<usize> =
        held_idx.iter().map(|&i| classes[&dataset.train[i].identity]).collect();
    let holdout_top1_v = top1_accuracy(
        &bundle,
        &gather_images(&dataset.train, &held_idx, Modality::V),
        &held_labels,
    );
    let holdout_top1_n = top1_accuracy(
        &bundle,
        &gather_images(&dataset.train, &held_idx, Modality::N),
        &held_labels,
    );
    if holdout_top1_v < cfg.gate_top1 {
        return Err(TrainError::GateNotMet { got: holdout_top1_v, required: cfg.gate_top1 });
    }
    Ok((
        FipHandle { trunk: bundle.trunk },
        FipReport { holdout_top1_v, holdout_top1_n, final_cls },
    ))
}

/// Recognizer training knobs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HfrConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Scale of the generated-pair distance term; 0 is the baseline.
    pub alpha1: f64,
    pub lr_initial: f64,
    pub lr_late: f64,
    pub lr_drop_frac: f64,
}

impl Default for HfrConfig {
    fn default() -> Self {
        HfrConfig {
            steps: 3000,
            batch_size: 32,
            alpha1: 0.001,
            lr_initial: 1e-3,
            lr_late: 5e-4,
            lr_drop_frac: 0.6,
        }
    }
}

/// Loss terms of one recognizer step.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct HfrStepLog {
    pub cls: f64,
    pub pair: f64,
    pub lr: f64,
}

/// One recognizer update: a labeled real batch split evenly between the two
/// modalities, plus — only when a pool is present and `alpha1 > 0` — an
/// unlabeled generated batch through the pair term. The inactive branch
/// draws nothing from `rng`, so a run with `alpha1 = 0` consumes randomness
/// exactly like one with no pool at all.
pub fn train_hfr_step(
    bundle: &mut RecognizerBundle,
    dataset: &PairedDataset,
    pool: &[PairRecord],
    cfg: &HfrConfig,
    opt: &mut Optimizer,
    step: u64,
    rng: &mut RandomSource,
) -> Result<HfrStepLog, TrainError> {
    if dataset.train.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    assert!(
        cfg.batch_size >= 2 && cfg.batch_size % 2 == 0,
        "batch must split evenly between the two modalities"
    );
    let half = cfg.batch_size / 2;
    let classes = class_index(&dataset.train);
    let use_pool = cfg.alpha1 > 0.0 && !pool.is_empty();

    let idx_n: Vec<usize> = (0..half).map(|_| rng.index(dataset.train.len())).collect();
    let idx_v: Vec<usize> = (0..half).map(|_| rng.index(dataset.train.len())).collect();
    let mut labels: Vec<usize> =
        idx_n.iter().map(|&i| classes[&dataset.train[i].identity]).collect();
    labels.extend(idx_v.iter().map(|&i| classes[&dataset.train[i].identity]));
    let image_dim = dataset.train[0].n.len();
    let mut data = Vec::with_capacity(cfg.batch_size * image_dim);
    for &i in &idx_n {
        data.extend_from_slice(&dataset.train[i].n);
    }
    for &i in &idx_v {
        data.extend_from_slice(&dataset.train[i].v);
    }
    let x = Tensor::matrix(cfg.batch_size, image_dim, data);

    let tape = Tape::new();
    let trunk = bundle.trunk.bind(&tape, true);
    let head = bundle.head.bind(&tape, true);
    let raw = trunk.forward_train(center_pixels(tape.constant(x)), rng);
    let cls = loss_cls(&head, raw, &labels);
    let (total, pair_val) = if use_pool {
        let pool_idx: Vec<usize> = (0..half).map(|_| rng.index(pool.len())).collect();
        let pn = gather_images(pool, &pool_idx, Modality::N);
        let pv = gather_images(pool, &pool_idx, Modality::V);
        let raw_n = trunk.forward_train(center_pixels(tape.constant(pn)), rng);
        let raw_v = trunk.forward_train(center_pixels(tape.constant(pv)), rng);
        let pair = loss_pair(raw_n.normalize_rows(), raw_v.normalize_rows());
        (cls + pair.mul_scalar(cfg.alpha1), pair.item())
    } else {
        (cls, 0.0)
    };

    let log = HfrStepLog {
        cls: require_finite("cls", cls.item())?,
        pair: require_finite("pair", pair_val)?,
        lr: {
            let lr = LrSchedule {
                initial: cfg.lr_initial,
                late: cfg.lr_late,
                drop_at_frac: cfg.lr_drop_frac,
            }
            .at(step, cfg.steps);
            opt.set_lr(lr);
            lr
        },
    };
    require_finite("total", total.item())?;
    let grads = tape.backward(total)?;
    let mut vars = trunk.param_vars();
    vars.extend(head.param_vars());
    let grad_refs: Vec<Option<&Tensor>> = vars.iter().map(|v| grads.wrt_ref(*v)).collect();
    opt.step(&mut bundle.named_params_mut(), &grad_refs)?;
    Ok(log)
}

/// Run the full step budget against a fresh optimizer; per-step loss terms
/// come back as the training history.
pub fn train_hfr(
    bundle: &mut RecognizerBundle,
    dataset: &PairedDataset,
    pool: &[PairRecord],
    cfg: &HfrConfig,
    rng: &mut RandomSource,
) -> Result<Vec<HfrStepLog>, TrainError> {
    let mut opt =
        Optimizer::new(OptimizerKind::sgd_momentum(cfg.lr_initial), &bundle.param_sizes());
    (0..cfg.steps)
        .map(|step| train_hfr_step(bundle, dataset, pool, cfg, &mut opt, step, rng))
        .collect()
}
