//! Evaluation protocols and analysis probes: linear evaluation on
//! frozen representations, fine-tuning, transformation-prediction
//! probes, projection-matrix spectra, pixel histograms and the
//! augmentation ablation grid.

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::augment::{
    augment_single, color_drop, derive_stream, gaussian_noise, rotate90, sobel, AugmentationPolicy,
    ImageBatch, PolicyMode, TransformKind, TransformOp,
};
use crate::contrastive::partner;
use crate::data::LabeledImages;
use crate::error::{Error, Result};
use crate::model::{Bindings, BnPass, Encoder, LinearClassifier, ProjectionHead};
use crate::optim::{nesterov_step, OptimizerState, ParamKind};
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;
use crate::train::{run_pretraining, train_epoch, BnStats, TrainConfig, TrainMode, TrainState};

/// Which frozen representation feeds a probe or classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReprSpace {
    /// Encoder output after pooling.
    H,
    /// Projection-head output.
    Z,
}

impl ReprSpace {
    pub fn tag(&self) -> &'static str {
        match self {
            ReprSpace::H => "h",
            ReprSpace::Z => "g(h)",
        }
    }
}

/// Hyperparameters for training classifiers on frozen features.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            epochs: 60,
            batch: 128,
            lr: 0.4,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// Frozen features for a dataset: eval-mode forward, deterministic
/// preprocessing only. Populates BN running statistics first when the
/// encoder has none (fresh random-init encoders).
pub fn extract_features(
    encoder: &mut Encoder,
    head: Option<&ProjectionHead>,
    images: &ImageBatch,
    batch: usize,
) -> Result<Tensor> {
    if !encoder.has_bn_stats() {
        encoder.calibrate_bn(images, batch.max(2))?;
    }
    let mut rows: Vec<f64> = Vec::new();
    let mut dim = 0;
    let mut start = 0;
    while start < images.count {
        let end = (start + batch).min(images.count);
        let idx: Vec<usize> = (start..end).collect();
        let slice = images.select(&idx);
        let mut tape = Tape::new();
        let x = tape.constant(slice.to_tensor());
        let mut bind = Bindings::default();
        let h = encoder.forward(&mut tape, x, &BnPass::Eval, &mut bind)?;
        let feat = match head {
            Some(head) => head.forward(&mut tape, h, &mut bind)?,
            None => h,
        };
        let value = tape.value(feat);
        dim = value.shape()[1];
        rows.extend_from_slice(value.data());
        start = end;
    }
    Tensor::from_vec(&[images.count, dim], rows)
}

/// Multinomial logistic regression on fixed features, trained with
/// Nesterov momentum; returns test accuracy.
pub fn feature_classifier_accuracy(
    train_features: &Tensor,
    train_labels: &[usize],
    test_features: &Tensor,
    test_labels: &[usize],
    classes: usize,
    opts: &EvalOptions,
) -> Result<f64> {
    feature_classifier(
        train_features,
        train_labels,
        test_features,
        test_labels,
        classes,
        opts,
        0.0,
    )
    .map(|(acc, _)| acc)
}

#[allow(clippy::too_many_arguments)]
fn feature_classifier(
    train_features: &Tensor,
    train_labels: &[usize],
    test_features: &Tensor,
    test_labels: &[usize],
    classes: usize,
    opts: &EvalOptions,
    weight_decay: f64,
) -> Result<(f64, LinearClassifier)> {
    let m = train_features.shape()[0];
    if m != train_labels.len() {
        return Err(Error::contract(format!(
            "{m} feature rows vs {} labels",
            train_labels.len()
        )));
    }
    if test_features.shape()[0] != test_labels.len() {
        return Err(Error::contract(format!(
            "{} test feature rows vs {} labels",
            test_features.shape()[0],
            test_labels.len()
        )));
    }
    let d = train_features.shape()[1];
    let mut clf = LinearClassifier::build(d, classes, opts.seed.wrapping_add(17));
    let mut opt = OptimizerState::new(opts.momentum, weight_decay);
    let mut order: Vec<usize> = (0..m).collect();
    let mut rng = derive_stream(opts.seed, 0, 0, 11);

    for _epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch.max(1)) {
            let mut feats = Vec::with_capacity(chunk.len() * d);
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                feats.extend_from_slice(train_features.row(i));
                labels.push(train_labels[i]);
            }
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::from_vec(&[chunk.len(), d], feats)?);
            let mut bind = Bindings::default();
            let logits = clf.forward(&mut tape, x, &mut bind)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            clf.w.zero_grad();
            clf.b.zero_grad();
            tape.backward(loss)?;
            for (name, grad) in bind.grad_by_name(&tape) {
                match name {
                    "clf.w" => clf.w.accumulate_grad(grad),
                    "clf.b" => clf.b.accumulate_grad(grad),
                    _ => {}
                }
            }
            nesterov_step(
                &mut [
                    (&mut clf.w, ParamKind::weight()),
                    (&mut clf.b, ParamKind::bias_or_bn()),
                ],
                opts.lr,
                &mut opt,
            )?;
        }
    }
    let acc = classifier_accuracy(&clf, test_features, test_labels)?;
    Ok((acc, clf))
}

fn classifier_accuracy(clf: &LinearClassifier, features: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let mut bind = Bindings::default();
    let logits = clf.forward(&mut tape, x, &mut bind)?;
    let lv = tape.value(logits);
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = lv.row(i);
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(j, _)| j)
            .unwrap();
        if argmax == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Linear evaluation protocol: a classifier trained on frozen features
/// extracted from the given representation space; the encoder is never
/// updated (asserted by parameter digest).
pub fn linear_eval(
    encoder: &mut Encoder,
    head: Option<&ProjectionHead>,
    train: &LabeledImages,
    test: &LabeledImages,
    opts: &EvalOptions,
) -> Result<f64> {
    let digest_before = encoder_digest(encoder);
    let train_feat = extract_features(encoder, head, &train.images, opts.batch.max(32))?;
    let test_feat = extract_features(encoder, head, &test.images, opts.batch.max(32))?;
    let acc = feature_classifier_accuracy(
        &train_feat,
        &train.labels,
        &test_feat,
        &test.labels,
        train.classes,
        opts,
    )?;
    if encoder_digest(encoder) != digest_before {
        return Err(Error::state(
            "linear evaluation modified encoder parameters".into(),
        ));
    }
    Ok(acc)
}

fn encoder_digest(encoder: &mut Encoder) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    encoder.visit_params(&mut |name, t, _| {
        hasher.update(name.as_bytes());
        for v in t.data() {
            hasher.update(v.to_le_bytes());
        }
    });
    format!("{:x}", hasher.finalize())
}

/// Logistic regression on raw pixels; the sanity floor any learned
/// representation must beat.
pub fn pixel_logistic_regression(
    train: &LabeledImages,
    test: &LabeledImages,
    opts: &EvalOptions,
) -> Result<f64> {
    let d = train.images.image_len();
    let to_features = |set: &LabeledImages| {
        Tensor::from_vec(&[set.len(), d], set.images.data().to_vec()).expect("flat pixels")
    };
    feature_classifier_accuracy(
        &to_features(train),
        &train.labels,
        &to_features(test),
        &test.labels,
        train.classes,
        opts,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneOptions {
    /// Class-balanced label fraction to train on.
    pub fraction: f64,
    /// Override the fraction-dependent default (60 epochs at 1%, 30 at
    /// 10% and above).
    pub epochs: Option<usize>,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for FineTuneOptions {
    fn default() -> Self {
        FineTuneOptions {
            fraction: 0.1,
            epochs: None,
            batch: 64,
            lr: 0.05,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl FineTuneOptions {
    pub fn resolved_epochs(&self) -> usize {
        self.epochs.unwrap_or(if self.fraction <= 0.0101 { 60 } else { 30 })
    }
}

/// Fine-tunes the whole encoder plus a fresh classifier on a
/// class-balanced subset with crop-and-flip augmentation only and no
/// weight decay; returns test accuracy.
pub fn fine_tune(
    encoder: &mut Encoder,
    train: &LabeledImages,
    test: &LabeledImages,
    opts: &FineTuneOptions,
) -> Result<f64> {
    let subset = train.balanced_fraction(opts.fraction)?;
    let d = encoder.config.representation_dim();
    let mut clf = LinearClassifier::build(d, train.classes, opts.seed.wrapping_add(23));
    let mut opt = OptimizerState::new(opts.momentum, 0.0);
    let policy = AugmentationPolicy::crop_flip(opts.seed.wrapping_add(31));
    let epochs = opts.resolved_epochs();

    for epoch in 0..epochs {
        let order = crate::train::epoch_permutation(opts.seed, epoch, subset.len());
        for chunk in order.chunks(opts.batch.max(2)) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = subset.images.select(chunk);
            let ids: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
            let view = augment_single(&batch, &policy, epoch as u64, Some(&ids))?;
            let labels: Vec<usize> = chunk.iter().map(|&i| subset.labels[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(view.to_tensor());
            let mut bind = Bindings::default();
            let bounds = [0..chunk.len()];
            let h = encoder.forward(
                &mut tape,
                x,
                &BnPass::Train {
                    bounds: &bounds,
                    scope: crate::tensor::tape::BnScope::Global,
                    update_running: true,
                },
                &mut bind,
            )?;
            let logits = clf.forward(&mut tape, h, &mut bind)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            encoder.visit_params(&mut |_, t, _| t.zero_grad());
            clf.w.zero_grad();
            clf.b.zero_grad();
            tape.backward(loss)?;
            let grads: std::collections::HashMap<&str, &[f64]> = bind.grad_by_name(&tape).collect();
            encoder.visit_params(&mut |name, t, _| {
                if let Some(g) = grads.get(name.as_str()) {
                    t.accumulate_grad(g);
                }
            });
            if let Some(g) = grads.get("clf.w") {
                clf.w.accumulate_grad(g);
            }
            if let Some(g) = grads.get("clf.b") {
                clf.b.accumulate_grad(g);
            }

            let mut ptrs: Vec<(*mut Tensor, ParamKind)> = Vec::new();
            encoder.visit_params(&mut |_, t, kind| ptrs.push((t as *mut Tensor, kind)));
            let mut params: Vec<(&mut Tensor, ParamKind)> =
                ptrs.into_iter().map(|(p, k)| (unsafe { &mut *p }, k)).collect();
            params.push((&mut clf.w, ParamKind::weight()));
            params.push((&mut clf.b, ParamKind::bias_or_bn()));
            nesterov_step(&mut params, opts.lr, &mut opt)?;
        }
    }

    let test_feat = extract_features(encoder, None, &test.images, opts.batch.max(32))?;
    classifier_accuracy(&clf, &test_feat, &test.labels)
}

/// Transformation-prediction probe kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    /// Original color vs grayscale, skewed so the majority baseline is
    /// 80%.
    ColorVsGray,
    /// Four-way rotation.
    Rotation4,
    /// Original vs noise-corrupted.
    CorruptedVsOriginal,
    /// Original vs Sobel-filtered.
    SobelVsOriginal,
}

impl ProbeKind {
    pub fn classes(&self) -> usize {
        match self {
            ProbeKind::Rotation4 => 4,
            _ => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ProbeKind::ColorVsGray => "color_vs_gray",
            ProbeKind::Rotation4 => "rotation",
            ProbeKind::CorruptedVsOriginal => "corrupted_vs_original",
            ProbeKind::SobelVsOriginal => "sobel_vs_original",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "color_vs_gray" => ProbeKind::ColorVsGray,
            "rotation" => ProbeKind::Rotation4,
            "corrupted_vs_original" => ProbeKind::CorruptedVsOriginal,
            "sobel_vs_original" => ProbeKind::SobelVsOriginal,
            other => return Err(Error::contract(format!("unknown probe kind '{other}'"))),
        })
    }
}

/// Labeled probe set: images with the transform applied per label.
///
/// Labels follow a fixed per-index pattern so class proportions are
/// exact; transform parameters are drawn per item from the seed.
pub fn probe_dataset(images: &ImageBatch, kind: ProbeKind, seed: u64) -> Result<LabeledImages> {
    let mut out = ImageBatch::new(images.count, images.height, images.width);
    let mut labels = Vec::with_capacity(images.count);
    for i in 0..images.count {
        let img = images.image(i);
        let mut rng = derive_stream(seed, 0, i as u64, 201);
        let (img, label) = match kind {
            ProbeKind::ColorVsGray => {
                // Exactly one in five grayscale: majority baseline 0.8.
                if i % 5 == 4 {
                    (color_drop(&img), 1)
                } else {
                    (img, 0)
                }
            }
            ProbeKind::Rotation4 => {
                let quarters = i % 4;
                (rotate90(&img, quarters), quarters)
            }
            ProbeKind::CorruptedVsOriginal => {
                if i % 2 == 1 {
                    (gaussian_noise(&img, 0.15, &mut rng), 1)
                } else {
                    (img, 0)
                }
            }
            ProbeKind::SobelVsOriginal => {
                if i % 2 == 1 {
                    (sobel(&img), 1)
                } else {
                    (img, 0)
                }
            }
        };
        out.set_image(i, &img);
        labels.push(label);
    }
    Ok(LabeledImages {
        images: out,
        labels,
        classes: kind.classes(),
    })
}

/// Majority-class share: the accuracy of random (majority) guessing.
pub fn majority_baseline(labels: &[usize], classes: usize) -> f64 {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    counts.into_iter().max().unwrap_or(0) as f64 / labels.len() as f64
}

#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub kind: &'static str,
    pub repr_tag: &'static str,
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    pub baseline: f64,
}

#[derive(Debug, Clone)]
pub struct ProbePair {
    pub on_h: ProbeReport,
    pub on_z: ProbeReport,
    /// Accuracy of the shuffled-label negative control on h.
    pub shuffled_control: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOptions {
    pub train_fraction: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            train_fraction: 0.7,
            epochs: 20,
            lr: 0.2,
            batch: 64,
            seed: 0,
        }
    }
}

/// Trains MLP probes (one hidden layer of the feature width) on frozen
/// h and frozen g(h) to predict the applied transformation; also runs
/// the shuffled-label control whose accuracy must sit at the majority
/// baseline.
pub fn transform_probe(
    encoder: &mut Encoder,
    head: &ProjectionHead,
    images: &ImageBatch,
    kind: ProbeKind,
    opts: &ProbeOptions,
) -> Result<ProbePair> {
    let d = encoder.config.representation_dim();
    if head.output_dim() != d {
        return Err(Error::contract(format!(
            "probe needs a head with matched dims, got {} -> {}",
            d,
            head.output_dim()
        )));
    }
    let probe_set = probe_dataset(images, kind, opts.seed)?;
    let split = ((probe_set.len() as f64) * opts.train_fraction).round() as usize;
    // Interleaved split keeps the exact label pattern in both halves.
    let train_idx: Vec<usize> = (0..probe_set.len()).filter(|i| i % 10 < 7).collect();
    let test_idx: Vec<usize> = (0..probe_set.len()).filter(|i| i % 10 >= 7).collect();
    let _ = split;
    let train = probe_set.select(&train_idx);
    let test = probe_set.select(&test_idx);

    let mut reports = Vec::new();
    let mut control = 0.0;
    for space in [ReprSpace::H, ReprSpace::Z] {
        let head_opt = match space {
            ReprSpace::H => None,
            ReprSpace::Z => Some(head),
        };
        let train_feat = extract_features(encoder, head_opt, &train.images, 64)?;
        let test_feat = extract_features(encoder, head_opt, &test.images, 64)?;
        let acc = mlp_probe_accuracy(
            &train_feat,
            &train.labels,
            &test_feat,
            &test.labels,
            kind.classes(),
            opts,
            false,
        )?;
        let per_class = per_class_accuracy(
            &train_feat,
            &train.labels,
            &test_feat,
            &test.labels,
            kind.classes(),
            opts,
        )?;
        if matches!(space, ReprSpace::H) {
            control = mlp_probe_accuracy(
                &train_feat,
                &train.labels,
                &test_feat,
                &test.labels,
                kind.classes(),
                opts,
                true,
            )?;
        }
        reports.push(ProbeReport {
            kind: kind.name(),
            repr_tag: space.tag(),
            accuracy: acc,
            per_class,
            baseline: majority_baseline(&test.labels, kind.classes()),
        });
    }
    let on_z = reports.pop().expect("two reports");
    let on_h = reports.pop().expect("two reports");
    Ok(ProbePair {
        on_h,
        on_z,
        shuffled_control: control,
    })
}

/// One-hidden-layer MLP probe. With `shuffle_labels` the training
/// labels are permuted and strong weight decay drives the probe to the
/// majority predictor, the negative control.
#[allow(clippy::too_many_arguments)]
fn mlp_probe_accuracy(
    train_features: &Tensor,
    train_labels: &[usize],
    test_features: &Tensor,
    test_labels: &[usize],
    classes: usize,
    opts: &ProbeOptions,
    shuffle_labels: bool,
) -> Result<f64> {
    let d = train_features.shape()[1];
    let m = train_features.shape()[0];
    let mut labels = train_labels.to_vec();
    let mut weight_decay = 0.0;
    if shuffle_labels {
        let mut rng = derive_stream(opts.seed, 1, 0, 301);
        labels.shuffle(&mut rng);
        weight_decay = 0.5;
    }

    let mut w1 = he(&[d, d], d, opts.seed.wrapping_add(43));
    let mut b1 = Tensor::zeros(&[d]).set_requires_grad(true);
    let mut w2 = he(&[d, classes], d, opts.seed.wrapping_add(44));
    let mut b2 = Tensor::zeros(&[classes]).set_requires_grad(true);
    let mut opt = OptimizerState::new(0.9, weight_decay);
    // The control must decay toward the prior; regular probes use none.
    opt.exclusions_enabled = !shuffle_labels;

    let mut order: Vec<usize> = (0..m).collect();
    let mut shuffle_rng = derive_stream(opts.seed, 2, 0, 302);
    for _ in 0..opts.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(opts.batch.max(1)) {
            let mut feats = Vec::with_capacity(chunk.len() * d);
            let mut batch_labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                feats.extend_from_slice(train_features.row(i));
                batch_labels.push(labels[i]);
            }
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::from_vec(&[chunk.len(), d], feats)?);
            let w1v = tape.leaf(&w1);
            let b1v = tape.leaf(&b1);
            let a = tape.dense(x, w1v, Some(b1v))?;
            let r = tape.relu(a);
            let w2v = tape.leaf(&w2);
            let b2v = tape.leaf(&b2);
            let logits = tape.dense(r, w2v, Some(b2v))?;
            let loss = tape.softmax_cross_entropy(logits, &batch_labels)?;
            tape.backward(loss)?;
            for t in [&mut w1, &mut b1, &mut w2, &mut b2] {
                t.zero_grad();
            }
            for (t, v) in [(&mut w1, w1v), (&mut b1, b1v), (&mut w2, w2v), (&mut b2, b2v)] {
                if let Some(g) = tape.grad_of(v) {
                    t.accumulate_grad(g);
                }
            }
            nesterov_step(
                &mut [
                    (&mut w1, ParamKind::weight()),
                    (&mut b1, ParamKind::weight()),
                    (&mut w2, ParamKind::weight()),
                    (&mut b2, ParamKind::weight()),
                ],
                opts.lr,
                &mut opt,
            )?;
        }
    }

    // Test accuracy.
    let mut tape = Tape::new();
    let x = tape.constant(test_features.clone());
    let w1v = tape.leaf(&w1);
    let b1v = tape.leaf(&b1);
    let a = tape.dense(x, w1v, Some(b1v))?;
    let r = tape.relu(a);
    let w2v = tape.leaf(&w2);
    let b2v = tape.leaf(&b2);
    let logits = tape.dense(r, w2v, Some(b2v))?;
    let lv = tape.value(logits);
    let mut correct = 0usize;
    for (i, &label) in test_labels.iter().enumerate() {
        let row = lv.row(i);
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(j, _)| j)
            .unwrap();
        if argmax == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_labels.len() as f64)
}

fn per_class_accuracy(
    train_features: &Tensor,
    train_labels: &[usize],
    test_features: &Tensor,
    test_labels: &[usize],
    classes: usize,
    opts: &ProbeOptions,
) -> Result<Vec<f64>> {
    // Reuse the probe for per-class splits of the test set.
    let mut per = Vec::with_capacity(classes);
    for c in 0..classes {
        let idx: Vec<usize> = (0..test_labels.len()).filter(|&i| test_labels[i] == c).collect();
        if idx.is_empty() {
            per.push(0.0);
            continue;
        }
        let mut feats = Vec::new();
        for &i in &idx {
            feats.extend_from_slice(test_features.row(i));
        }
        let sub = Tensor::from_vec(&[idx.len(), test_features.shape()[1]], feats)?;
        let sub_labels: Vec<usize> = idx.iter().map(|&i| test_labels[i]).collect();
        per.push(mlp_probe_accuracy(
            train_features,
            train_labels,
            &sub,
            &sub_labels,
            classes,
            opts,
            false,
        )?);
    }
    Ok(per)
}

fn he(shape: &[usize], fan_in: usize, seed: u64) -> Tensor {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("std");
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())
        .expect("shape")
        .set_requires_grad(true)
}

/// Squared real parts of the eigenvalues of a square matrix, sorted
/// descending.
pub fn projection_spectrum(w: &Tensor) -> Result<Vec<f64>> {
    let shape = w.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::contract(format!(
            "projection_spectrum needs a square matrix, got {shape:?}"
        )));
    }
    let n = shape[0];
    let mat = nalgebra::DMatrix::from_row_slice(n, n, w.data());
    let eigen = mat.complex_eigenvalues();
    let mut out: Vec<f64> = eigen.iter().map(|c| c.re * c.re).collect();
    out.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(out)
}

/// Normalized histogram of pixel intensities over all channels.
pub fn pixel_histogram(values: &[f64], bins: usize) -> Result<Vec<f64>> {
    if bins == 0 {
        return Err(Error::contract("histogram needs at least one bin"));
    }
    if values.is_empty() {
        return Err(Error::contract("histogram of empty data"));
    }
    let mut hist = vec![0.0; bins];
    for v in values {
        let idx = ((v * bins as f64) as usize).min(bins - 1);
        hist[idx] += 1.0;
    }
    let total: f64 = values.len() as f64;
    for h in &mut hist {
        *h /= total;
    }
    Ok(hist)
}

/// Chi-square distance between two normalized histograms.
pub fn chi_square_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let s = x + y;
            if s > 0.0 {
                (x - y) * (x - y) / s
            } else {
                0.0
            }
        })
        .sum::<f64>()
        * 0.5
}

/// Ablation grid over ordered transform pairs, trained asymmetrically
/// (crop on both branches, studied transforms on one) and scored by
/// linear evaluation. Row-average lives in the final column; failed
/// cells become NaN holes.
pub struct GridResult {
    pub transforms: Vec<TransformKind>,
    /// n rows of n+1 columns.
    pub scores: Vec<Vec<f64>>,
}

impl GridResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("first");
        for t in &self.transforms {
            let _ = write!(out, ",{}", t.name());
        }
        out.push_str(",row_avg\n");
        for (i, row) in self.scores.iter().enumerate() {
            let _ = write!(out, "{}", self.transforms[i].name());
            for v in row {
                if v.is_nan() {
                    out.push_str(",hole");
                } else {
                    let _ = write!(out, ",{v:.4}");
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Policy for one grid cell: crop applied to both branches, then the
/// studied transforms on branch one only.
pub fn grid_cell_policy(
    first: TransformKind,
    second: Option<TransformKind>,
    strength: f64,
    seed: u64,
) -> AugmentationPolicy {
    let mut ops = vec![TransformOp::new(TransformKind::CropResize)];
    ops.push(TransformOp::new(first).with_probability(op_default_prob(first)));
    if let Some(second) = second {
        ops.push(TransformOp::new(second).with_probability(op_default_prob(second)));
    }
    AugmentationPolicy {
        ops,
        strength,
        seed,
        mode: PolicyMode::Asymmetric,
    }
}

fn op_default_prob(kind: TransformKind) -> f64 {
    // In the ablation the studied transform always fires; stochastic
    // gates stay only where the operator is itself probabilistic.
    match kind {
        TransformKind::ColorJitter => 0.8,
        TransformKind::ColorDrop => 0.2,
        _ => 1.0,
    }
}

pub fn augmentation_grid(
    base: &TrainConfig,
    eval_opts: &EvalOptions,
    transforms: &[TransformKind],
    train: &LabeledImages,
    test: &LabeledImages,
) -> Result<GridResult> {
    let n = transforms.len();
    let mut scores = vec![vec![f64::NAN; n + 1]; n];
    for (i, &t1) in transforms.iter().enumerate() {
        for (j, &t2) in transforms.iter().enumerate() {
            let second = if i == j { None } else { Some(t2) };
            let mut config = base.clone();
            config.policy = grid_cell_policy(t1, second, config.policy.strength, config.policy.seed);
            let cell = run_pretraining(&config, train, None).and_then(|(mut state, _)| {
                linear_eval(&mut state.encoder, None, train, test, eval_opts)
            });
            match cell {
                Ok(score) => scores[i][j] = score,
                Err(err) => {
                    eprintln!("grid cell ({}, {}) failed: {err}", t1.name(), t2.name());
                }
            }
        }
        let row = &scores[i];
        let valid: Vec<f64> = row[..n].iter().copied().filter(|v| !v.is_nan()).collect();
        scores[i][n] = if valid.is_empty() {
            f64::NAN
        } else {
            valid.iter().sum::<f64>() / valid.len() as f64
        };
    }
    Ok(GridResult {
        transforms: transforms.to_vec(),
        scores,
    })
}

/// Color-strength sweep: linear-eval score of contrastive pretraining
/// and test accuracy of supervised training, per strength.
pub fn color_strength_sweep(
    base: &TrainConfig,
    eval_opts: &EvalOptions,
    strengths: &[f64],
    train: &LabeledImages,
    test: &LabeledImages,
) -> Result<Vec<(f64, f64, f64)>> {
    let mut rows = Vec::with_capacity(strengths.len());
    for &s in strengths {
        let mut contrastive = base.clone();
        contrastive.mode = TrainMode::Contrastive;
        contrastive.policy.strength = s;
        let (mut state, _) = run_pretraining(&contrastive, train, None)?;
        let unsup = linear_eval(&mut state.encoder, None, train, test, eval_opts)?;

        let mut supervised = base.clone();
        supervised.mode = TrainMode::Supervised;
        supervised.policy.strength = s;
        let (mut sup_state, _) = run_pretraining(&supervised, train, None)?;
        let sup_acc = supervised_test_accuracy(&mut sup_state, test)?;
        rows.push((s, unsup, sup_acc));
    }
    Ok(rows)
}

fn supervised_test_accuracy(state: &mut TrainState, test: &LabeledImages) -> Result<f64> {
    let clf = state
        .classifier
        .as_ref()
        .ok_or_else(|| Error::state("supervised state lacks a classifier".into()))?
        .clone();
    let feats = extract_features(&mut state.encoder, None, &test.images, 64)?;
    classifier_accuracy(&clf, &feats, &test.labels)
}

/// Local-vs-global BN comparison data for the leakage experiment: the
/// training contrastive accuracy of the final epoch and the linear-eval
/// accuracy of the trained encoder.
pub struct BnRunSummary {
    pub train_contrastive_acc: f64,
    pub linear_eval_acc: f64,
}

pub fn bn_leakage_run(
    base: &TrainConfig,
    stats: BnStats,
    eval_opts: &EvalOptions,
    train: &LabeledImages,
    test: &LabeledImages,
) -> Result<BnRunSummary> {
    let mut config = base.clone();
    config.bn_stats = stats;
    let mut state = TrainState::init(&config, train.classes)?;
    let mut last_epoch_acc = 0.0;
    while state.epoch < config.epochs {
        let metrics = train_epoch(&mut state, train, &config)?;
        let accs: Vec<f64> = metrics.iter().map(|m| m.contrastive_acc).collect();
        last_epoch_acc = accs.iter().sum::<f64>() / accs.len().max(1) as f64;
    }
    let linear = linear_eval(&mut state.encoder, None, train, test, eval_opts)?;
    Ok(BnRunSummary {
        train_contrastive_acc: last_epoch_acc,
        linear_eval_acc: linear,
    })
}

/// Two random crops of one image stay closer in histogram space than
/// crops of different images, averaged over the corpus — the color
/// histogram statistic (no color distortion involved).
pub fn crop_histogram_statistic(
    images: &ImageBatch,
    bins: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    use crate::augment::random_resized_crop;
    let op = TransformOp::new(TransformKind::CropResize);
    let mut same = 0.0;
    let mut cross = 0.0;
    let count = images.count;
    if count < 2 {
        return Err(Error::contract("need at least two images"));
    }
    let mut hists = Vec::with_capacity(count * 2);
    for i in 0..count {
        let img = images.image(i);
        for branch in 0..2u64 {
            let mut rng = derive_stream(seed, 0, i as u64, 400 + branch);
            let crop = random_resized_crop(&img, (img.h, img.w), &op, &mut rng)?;
            hists.push(pixel_histogram(&crop.px, bins)?);
        }
    }
    for i in 0..count {
        same += chi_square_distance(&hists[2 * i], &hists[2 * i + 1]);
        let j = (i + 1) % count;
        cross += chi_square_distance(&hists[2 * i], &hists[2 * j]);
    }
    Ok((same / count as f64, cross / count as f64))
}

pub use crate::contrastive::Metric as SimilarityMetric;
