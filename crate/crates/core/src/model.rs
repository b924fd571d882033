//! Base encoder f and projection head g.
//!
//! The encoder is a small 3-stage residual network with BN + ReLU
//! blocks; the representation h is the activation after global average
//! pooling and is never normalized by the model itself. The projection
//! head maps h to the loss space z and carries no batch norm.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::augment::ImageBatch;
use crate::error::{Error, Result};
use crate::optim::ParamKind;
use crate::tensor::tape::{BnMode, BnScope, Padding, Tape, Var};
use crate::tensor::Tensor;

/// Stem variant: 7x7/2 + max pool for large inputs, 3x3/1 without a
/// pool for 32x32-class inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemKind {
    ImagenetStyle,
    CifarStyle,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub stem: StemKind,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub width_multiplier: f64,
    pub bn_epsilon: f64,
    /// Weight on the old value in running-statistic updates.
    pub bn_momentum: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            stem: StemKind::CifarStyle,
            stage_widths: vec![8, 16, 32],
            blocks_per_stage: vec![1, 1, 1],
            width_multiplier: 1.0,
            bn_epsilon: 1e-5,
            bn_momentum: 0.9,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() || self.blocks_per_stage.is_empty() {
            return Err(Error::contract("encoder needs at least one stage"));
        }
        if self.stage_widths.len() != self.blocks_per_stage.len() {
            return Err(Error::contract(format!(
                "{} stage widths vs {} block counts",
                self.stage_widths.len(),
                self.blocks_per_stage.len()
            )));
        }
        if self.stage_widths.iter().any(|w| *w == 0) || self.blocks_per_stage.iter().any(|b| *b == 0)
        {
            return Err(Error::contract("stage widths and block counts must be positive"));
        }
        if self.width_multiplier <= 0.0 {
            return Err(Error::contract("width multiplier must be positive"));
        }
        Ok(())
    }

    pub fn scaled_width(&self, stage: usize) -> usize {
        ((self.stage_widths[stage] as f64 * self.width_multiplier).round() as usize).max(1)
    }

    /// Output dimension of h: the last stage width after scaling.
    pub fn representation_dim(&self) -> usize {
        self.scaled_width(self.stage_widths.len() - 1)
    }
}

/// Statistics source for a forward pass.
#[derive(Debug, Clone)]
pub enum BnPass<'a> {
    Train {
        bounds: &'a [Range<usize>],
        scope: BnScope,
        update_running: bool,
    },
    Eval,
}

/// Ordered (name, var) pairs recorded by a forward pass so gradients
/// can be routed back to the owning tensors by name.
#[derive(Debug, Default)]
pub struct Bindings {
    items: Vec<(String, Var)>,
}

impl Bindings {
    pub fn push(&mut self, name: String, var: Var) {
        self.items.push((name, var));
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, Var)> {
        self.items.iter()
    }

    pub fn grad_by_name<'a>(&'a self, tape: &'a Tape) -> impl Iterator<Item = (&'a str, &'a [f64])> {
        self.items
            .iter()
            .filter_map(move |(name, var)| tape.grad_of(*var).map(|g| (name.as_str(), g)))
    }
}

fn he_tensor(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::from_vec(shape, data)
        .expect("consistent shape")
        .set_requires_grad(true)
}

#[derive(Debug, Clone)]
struct ConvLayer {
    w: Tensor,
    stride: usize,
}

impl ConvLayer {
    fn init(rng: &mut ChaCha8Rng, out_c: usize, in_c: usize, k: usize, stride: usize) -> Self {
        ConvLayer {
            w: he_tensor(rng, &[out_c, in_c, k, k], in_c * k * k),
            stride,
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var, name: &str, bind: &mut Bindings) -> Result<Var> {
        let w = tape.leaf(&self.w);
        bind.push(format!("{name}.w"), w);
        tape.conv2d(x, w, self.stride, Padding::Same)
    }
}

#[derive(Debug, Clone)]
struct BnLayer {
    gamma: Tensor,
    beta: Tensor,
    running: Vec<(f64, f64)>,
    accumulated: bool,
}

impl BnLayer {
    fn init(channels: usize) -> Self {
        BnLayer {
            gamma: Tensor::filled(&[channels], 1.0).set_requires_grad(true),
            beta: Tensor::zeros(&[channels]).set_requires_grad(true),
            running: vec![(0.0, 1.0); channels],
            accumulated: false,
        }
    }

    fn forward(
        &mut self,
        tape: &mut Tape,
        x: Var,
        pass: &BnPass,
        eps: f64,
        momentum: f64,
        name: &str,
        bind: &mut Bindings,
    ) -> Result<Var> {
        let gamma = tape.leaf(&self.gamma);
        let beta = tape.leaf(&self.beta);
        bind.push(format!("{name}.gamma"), gamma);
        bind.push(format!("{name}.beta"), beta);
        match pass {
            BnPass::Train {
                bounds,
                scope,
                update_running,
            } => {
                let y = tape.batch_norm(x, gamma, beta, eps, BnMode::Train { bounds, scope: *scope })?;
                if *update_running {
                    let batch = tape.bn_batch_moments(y).expect("train mode").to_vec();
                    if self.accumulated {
                        for (run, new) in self.running.iter_mut().zip(&batch) {
                            run.0 = momentum * run.0 + (1.0 - momentum) * new.0;
                            run.1 = momentum * run.1 + (1.0 - momentum) * new.1;
                        }
                    } else {
                        self.running = batch;
                        self.accumulated = true;
                    }
                }
                Ok(y)
            }
            BnPass::Eval => {
                if !self.accumulated {
                    return Err(Error::state(format!(
                        "{name}: eval-mode batch norm before any running statistics were accumulated"
                    )));
                }
                tape.batch_norm(x, gamma, beta, eps, BnMode::Moments(&self.running))
            }
        }
    }
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    conv1: ConvLayer,
    bn1: BnLayer,
    conv2: ConvLayer,
    bn2: BnLayer,
    shortcut: Option<(ConvLayer, BnLayer)>,
}

impl ResidualBlock {
    fn init(rng: &mut ChaCha8Rng, in_c: usize, out_c: usize, stride: usize) -> Self {
        let shortcut = if in_c != out_c || stride != 1 {
            Some((
                ConvLayer::init(rng, out_c, in_c, 1, stride),
                BnLayer::init(out_c),
            ))
        } else {
            None
        };
        ResidualBlock {
            conv1: ConvLayer::init(rng, out_c, in_c, 3, stride),
            bn1: BnLayer::init(out_c),
            conv2: ConvLayer::init(rng, out_c, out_c, 3, 1),
            bn2: BnLayer::init(out_c),
            shortcut,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &mut self,
        tape: &mut Tape,
        x: Var,
        pass: &BnPass,
        eps: f64,
        momentum: f64,
        name: &str,
        bind: &mut Bindings,
    ) -> Result<Var> {
        let c1 = self.conv1.forward(tape, x, &format!("{name}.conv1"), bind)?;
        let b1 = self
            .bn1
            .forward(tape, c1, pass, eps, momentum, &format!("{name}.bn1"), bind)?;
        let r1 = tape.relu(b1);
        let c2 = self.conv2.forward(tape, r1, &format!("{name}.conv2"), bind)?;
        let b2 = self
            .bn2
            .forward(tape, c2, pass, eps, momentum, &format!("{name}.bn2"), bind)?;
        let skip = match &mut self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(tape, x, &format!("{name}.short.conv"), bind)?;
                bn.forward(tape, s, pass, eps, momentum, &format!("{name}.short.bn"), bind)?
            }
            None => x,
        };
        let sum = tape.add(b2, skip)?;
        Ok(tape.relu(sum))
    }
}

/// Residual convolutional encoder; h is the post-pool activation.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    stem_conv: ConvLayer,
    stem_bn: BnLayer,
    stages: Vec<Vec<ResidualBlock>>,
}

impl Encoder {
    /// He-initialized network; identical seeds give identical parameters.
    pub fn build(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w0 = config.scaled_width(0);
        let stem_conv = match config.stem {
            StemKind::CifarStyle => ConvLayer::init(&mut rng, w0, 3, 3, 1),
            StemKind::ImagenetStyle => ConvLayer::init(&mut rng, w0, 3, 7, 2),
        };
        let stem_bn = BnLayer::init(w0);
        let mut stages = Vec::new();
        let mut in_c = w0;
        for (stage, &blocks) in config.blocks_per_stage.iter().enumerate() {
            let out_c = config.scaled_width(stage);
            let mut list = Vec::new();
            for block in 0..blocks {
                let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                list.push(ResidualBlock::init(&mut rng, in_c, out_c, stride));
                in_c = out_c;
            }
            stages.push(list);
        }
        Ok(Encoder {
            config: config.clone(),
            stem_conv,
            stem_bn,
            stages,
        })
    }

    /// Forward pass producing h `[B, d]`.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        x: Var,
        pass: &BnPass,
        bind: &mut Bindings,
    ) -> Result<Var> {
        let eps = self.config.bn_epsilon;
        let momentum = self.config.bn_momentum;
        let c = self.stem_conv.forward(tape, x, "enc.stem.conv", bind)?;
        let b = self
            .stem_bn
            .forward(tape, c, pass, eps, momentum, "enc.stem.bn", bind)?;
        let mut cur = tape.relu(b);
        if matches!(self.config.stem, StemKind::ImagenetStyle) {
            cur = tape.max_pool2d(cur, 3, 2, Padding::Same)?;
        }
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                cur = block.forward(
                    tape,
                    cur,
                    pass,
                    eps,
                    momentum,
                    &format!("enc.stage{si}.block{bi}"),
                    bind,
                )?;
            }
        }
        tape.global_avg_pool(cur)
    }

    /// Runs training-mode forwards over `data` purely to populate BN
    /// running statistics (no gradients, no parameter changes).
    pub fn calibrate_bn(&mut self, data: &ImageBatch, batch: usize) -> Result<()> {
        let mut start = 0;
        while start < data.count {
            let end = (start + batch).min(data.count);
            let idx: Vec<usize> = (start..end).collect();
            let slice = data.select(&idx);
            let mut tape = Tape::new();
            let x = tape.constant(slice.to_tensor());
            let mut bind = Bindings::default();
            let bounds = [0..slice.count];
            self.forward(
                &mut tape,
                x,
                &BnPass::Train {
                    bounds: &bounds,
                    scope: BnScope::Global,
                    update_running: true,
                },
                &mut bind,
            )?;
            start = end;
        }
        Ok(())
    }

    pub fn has_bn_stats(&self) -> bool {
        self.stem_bn.accumulated
    }

    pub fn visit_params<F: FnMut(String, &mut Tensor, ParamKind)>(&mut self, f: &mut F) {
        f(
            "enc.stem.conv.w".into(),
            &mut self.stem_conv.w,
            ParamKind::weight(),
        );
        f("enc.stem.bn.gamma".into(), &mut self.stem_bn.gamma, ParamKind::bias_or_bn());
        f("enc.stem.bn.beta".into(), &mut self.stem_bn.beta, ParamKind::bias_or_bn());
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                let p = format!("enc.stage{si}.block{bi}");
                f(format!("{p}.conv1.w"), &mut block.conv1.w, ParamKind::weight());
                f(format!("{p}.bn1.gamma"), &mut block.bn1.gamma, ParamKind::bias_or_bn());
                f(format!("{p}.bn1.beta"), &mut block.bn1.beta, ParamKind::bias_or_bn());
                f(format!("{p}.conv2.w"), &mut block.conv2.w, ParamKind::weight());
                f(format!("{p}.bn2.gamma"), &mut block.bn2.gamma, ParamKind::bias_or_bn());
                f(format!("{p}.bn2.beta"), &mut block.bn2.beta, ParamKind::bias_or_bn());
                if let Some((conv, bn)) = &mut block.shortcut {
                    f(format!("{p}.short.conv.w"), &mut conv.w, ParamKind::weight());
                    f(format!("{p}.short.bn.gamma"), &mut bn.gamma, ParamKind::bias_or_bn());
                    f(format!("{p}.short.bn.beta"), &mut bn.beta, ParamKind::bias_or_bn());
                }
            }
        }
    }

    /// Number of learnable parameter elements.
    pub fn param_count(&mut self) -> usize {
        let mut count = 0;
        self.visit_params(&mut |_, t, _| count += t.len());
        count
    }

    /// Running BN statistics as named tensors (for checkpoints).
    pub fn visit_bn_state<F: FnMut(String, Vec<f64>)>(&self, f: &mut F) {
        let emit = |name: String, bn: &BnLayer, f: &mut F| {
            let mut flat = Vec::with_capacity(2 * bn.running.len() + 1);
            flat.push(if bn.accumulated { 1.0 } else { 0.0 });
            for (m, v) in &bn.running {
                flat.push(*m);
                flat.push(*v);
            }
            f(name, flat);
        };
        emit("enc.stem.bn.running".into(), &self.stem_bn, f);
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, block) in stage.iter().enumerate() {
                let p = format!("enc.stage{si}.block{bi}");
                emit(format!("{p}.bn1.running"), &block.bn1, f);
                emit(format!("{p}.bn2.running"), &block.bn2, f);
                if let Some((_, bn)) = &block.shortcut {
                    emit(format!("{p}.short.bn.running"), bn, f);
                }
            }
        }
    }

    pub fn restore_bn_state(&mut self, name: &str, flat: &[f64]) -> Result<()> {
        let bn = self.bn_by_name(name)?;
        if flat.len() != 1 + 2 * bn.running.len() {
            return Err(Error::format(format!(
                "bn state '{name}' has {} values, expected {}",
                flat.len(),
                1 + 2 * bn.running.len()
            )));
        }
        bn.accumulated = flat[0] != 0.0;
        for (i, pair) in bn.running.iter_mut().enumerate() {
            pair.0 = flat[1 + 2 * i];
            pair.1 = flat[2 + 2 * i];
        }
        Ok(())
    }

    fn bn_by_name(&mut self, name: &str) -> Result<&mut BnLayer> {
        if name == "enc.stem.bn.running" {
            return Ok(&mut self.stem_bn);
        }
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                let p = format!("enc.stage{si}.block{bi}");
                if name == format!("{p}.bn1.running") {
                    return Ok(&mut block.bn1);
                }
                if name == format!("{p}.bn2.running") {
                    return Ok(&mut block.bn2);
                }
                if name == format!("{p}.short.bn.running") {
                    if let Some((_, bn)) = &mut block.shortcut {
                        return Ok(bn);
                    }
                }
            }
        }
        Err(Error::format(format!("unknown bn state '{name}'")))
    }
}

/// Projection head kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    None,
    Linear,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl HeadConfig {
    pub fn mlp(input_dim: usize, output_dim: usize) -> Self {
        HeadConfig {
            kind: HeadKind::Mlp,
            hidden_dim: input_dim,
            output_dim,
        }
    }
}

/// g(.): none, a single matrix, or one hidden ReLU layer; weights only,
/// no biases and no batch norm.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub config: HeadConfig,
    pub input_dim: usize,
    w1: Option<Tensor>,
    w2: Option<Tensor>,
}

impl ProjectionHead {
    pub fn build(config: &HeadConfig, input_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w1, w2) = match config.kind {
            HeadKind::None => (None, None),
            HeadKind::Linear => (
                Some(he_tensor(&mut rng, &[input_dim, config.output_dim], input_dim)),
                None,
            ),
            HeadKind::Mlp => {
                if config.hidden_dim == 0 {
                    return Err(Error::contract("mlp head needs a positive hidden dim"));
                }
                (
                    Some(he_tensor(&mut rng, &[input_dim, config.hidden_dim], input_dim)),
                    Some(he_tensor(
                        &mut rng,
                        &[config.hidden_dim, config.output_dim],
                        config.hidden_dim,
                    )),
                )
            }
        };
        if config.output_dim == 0 && !matches!(config.kind, HeadKind::None) {
            return Err(Error::contract("head output dim must be positive"));
        }
        Ok(ProjectionHead {
            config: config.clone(),
            input_dim,
            w1,
            w2,
        })
    }

    /// Output dimension of z.
    pub fn output_dim(&self) -> usize {
        match self.config.kind {
            HeadKind::None => self.input_dim,
            _ => self.config.output_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, h: Var, bind: &mut Bindings) -> Result<Var> {
        let hdim = tape.value(h).shape()[1];
        if hdim != self.input_dim {
            return Err(Error::dimension(
                "projection_head",
                1,
                format!("h has {hdim} columns, head expects {}", self.input_dim),
            ));
        }
        match self.config.kind {
            HeadKind::None => Ok(h),
            HeadKind::Linear => {
                let w = tape.leaf(self.w1.as_ref().expect("linear head weight"));
                bind.push("head.w1".into(), w);
                tape.dense(h, w, None)
            }
            HeadKind::Mlp => {
                let w1 = tape.leaf(self.w1.as_ref().expect("mlp w1"));
                bind.push("head.w1".into(), w1);
                let a = tape.dense(h, w1, None)?;
                let r = tape.relu(a);
                let w2 = tape.leaf(self.w2.as_ref().expect("mlp w2"));
                bind.push("head.w2".into(), w2);
                tape.dense(r, w2, None)
            }
        }
    }

    /// The projection matrix of a linear head (spectrum analysis).
    pub fn linear_matrix(&self) -> Option<&Tensor> {
        match self.config.kind {
            HeadKind::Linear => self.w1.as_ref(),
            _ => None,
        }
    }

    pub fn visit_params<F: FnMut(String, &mut Tensor, ParamKind)>(&mut self, f: &mut F) {
        if let Some(w1) = &mut self.w1 {
            f("head.w1".into(), w1, ParamKind::weight());
        }
        if let Some(w2) = &mut self.w2 {
            f("head.w2".into(), w2, ParamKind::weight());
        }
    }
}

/// Linear classifier head (supervised mode, probes, linear eval).
#[derive(Debug, Clone)]
pub struct LinearClassifier {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearClassifier {
    pub fn build(input_dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LinearClassifier {
            w: he_tensor(&mut rng, &[input_dim, classes], input_dim),
            b: Tensor::zeros(&[classes]).set_requires_grad(true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, h: Var, bind: &mut Bindings) -> Result<Var> {
        let w = tape.leaf(&self.w);
        let b = tape.leaf(&self.b);
        bind.push("clf.w".into(), w);
        bind.push("clf.b".into(), b);
        tape.dense(h, w, Some(b))
    }

    pub fn visit_params<F: FnMut(String, &mut Tensor, ParamKind)>(&mut self, f: &mut F) {
        f("clf.w".into(), &mut self.w, ParamKind::weight());
        f("clf.b".into(), &mut self.b, ParamKind::bias_or_bn());
    }
}

/// Runs the paired forward pass: interleaves the two views as rows
/// (2k, 2k+1) and pushes the combined batch through the shared encoder
/// and head, returning (h, z).
pub fn encode_pair(
    views: (&ImageBatch, &ImageBatch),
    encoder: &mut Encoder,
    head: &ProjectionHead,
    tape: &mut Tape,
    pass: &BnPass,
    bind: &mut Bindings,
) -> Result<(Var, Var)> {
    if views.0.count != views.1.count {
        return Err(Error::contract(format!(
            "view batches differ in count: {} vs {}",
            views.0.count, views.1.count
        )));
    }
    let combined = ImageBatch::interleave(views.0, views.1)?;
    let x = tape.constant(combined.to_tensor());
    let h = encoder.forward(tape, x, pass, bind)?;
    let z = head.forward(tape, h, bind)?;
    Ok((h, z))
}
