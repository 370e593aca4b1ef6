//! Convolutional feature extractor and linear classifier.
//!
//! Each block is conv → norm → ReLU → max-pool (→ dropout when `p > 0`),
//! followed by adaptive average pooling and a dense classification layer.

use std::fs;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::normalization::{self, Affine, BatchNormState, NormPhase};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub channels: usize,
    pub kernel: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl ConvBlockSpec {
    pub fn new(channels: usize, kernel: usize, dropout: f64) -> Self {
        Self {
            channels,
            kernel,
            dropout,
        }
    }
}

/// Which normalization the network uses once source pretraining is done.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Bn,
    Cbn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub conv_blocks: Vec<ConvBlockSpec>,
    pub in_channels: usize,
    pub input_len: usize,
    pub pool_window: usize,
    pub adaptive_out: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub norm_mode: NormKind,
    pub epsilon: f64,
    pub ema_momentum: f64,
}

impl ModelSpec {
    /// Three blocks of 128/256/128 channels on length-1024 windows.
    pub fn paper_default(num_classes: usize) -> Self {
        Self {
            conv_blocks: vec![
                ConvBlockSpec::new(128, 5, 0.5),
                ConvBlockSpec::new(256, 8, 0.0),
                ConvBlockSpec::new(128, 8, 0.0),
            ],
            in_channels: 1,
            input_len: 1024,
            pool_window: 2,
            adaptive_out: 1,
            feature_dim: 128,
            num_classes,
            norm_mode: NormKind::Cbn,
            epsilon: 1e-5,
            ema_momentum: 0.1,
        }
    }

    /// Two narrow blocks on length-128 windows.
    pub fn desk_default(num_classes: usize) -> Self {
        Self {
            conv_blocks: vec![ConvBlockSpec::new(8, 5, 0.0), ConvBlockSpec::new(16, 5, 0.0)],
            in_channels: 1,
            input_len: 128,
            pool_window: 2,
            adaptive_out: 1,
            feature_dim: 16,
            num_classes,
            norm_mode: NormKind::Cbn,
            epsilon: 1e-5,
            ema_momentum: 0.1,
        }
    }

    /// Sequence length after every block, checked against the spec.
    pub fn validate(&self) -> Result<Vec<usize>> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.conv_blocks.is_empty() {
            return bad("at least one conv block is required".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.in_channels == 0 || self.pool_window == 0 || self.adaptive_out == 0 {
            return bad("in_channels, pool_window and adaptive_out must be positive".into());
        }
        let mut lens = Vec::new();
        let mut len = self.input_len;
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.channels == 0 || b.kernel == 0 {
                return bad(format!("block {i}: channels and kernel must be positive"));
            }
            if !(0.0..1.0).contains(&b.dropout) {
                return bad(format!("block {i}: dropout {} outside [0, 1)", b.dropout));
            }
            let padded = len + 2 * (b.kernel / 2);
            if padded < b.kernel {
                return bad(format!("block {i}: kernel {} longer than input {len}", b.kernel));
            }
            let conv_len = padded - b.kernel + 1;
            if conv_len < self.pool_window {
                return bad(format!("block {i}: length {conv_len} shorter than pool window"));
            }
            len = (conv_len - self.pool_window) / self.pool_window + 1;
            lens.push(len);
        }
        if self.adaptive_out > len {
            return bad(format!(
                "adaptive_out {} exceeds final length {len}",
                self.adaptive_out
            ));
        }
        let last = self.conv_blocks.last().expect("non-empty").channels;
        if self.feature_dim != last * self.adaptive_out {
            return bad(format!(
                "feature_dim {} != last channels {last} x adaptive_out {}",
                self.feature_dim, self.adaptive_out
            ));
        }
        Ok(lens)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub weight: Tensor,
    pub bias: Tensor,
    pub norm: BatchNormState,
    pub kernel: usize,
    pub dropout: f64,
}

impl ConvBlock {
    fn padding(&self) -> usize {
        self.kernel / 2
    }
}

/// `f_θ`: signal segments to feature vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    pub blocks: Vec<ConvBlock>,
    pub pool_window: usize,
    pub adaptive_out: usize,
}

/// `h_θ`: feature vectors to class logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    spec: ModelSpec,
    pub extractor: FeatureExtractor,
    pub classifier: Classifier,
    training: bool,
}

/// Graph handles for every parameter, in [`Model::parameters_mut`] order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    nodes: Vec<NodeId>,
}

impl BoundParams {
    /// Wraps existing leaves; they must follow [`Model::parameters`] order.
    pub fn from_nodes(nodes: Vec<NodeId>) -> Self {
        Self { nodes }
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }
}

/// Per-call normalization override.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StatsOverride {
    /// Use whatever each layer's mode dictates.
    #[default]
    None,
    /// Normalize by batch statistics without touching running estimates.
    BatchNoUpdate,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Builds a model with weights drawn uniformly in `±√(1/fan_in)`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::with_capacity(spec.conv_blocks.len());
    let mut cin = spec.in_channels;
    for b in &spec.conv_blocks {
        let bound = (1.0 / (cin * b.kernel) as f64).sqrt();
        blocks.push(ConvBlock {
            weight: uniform(&mut rng, &[b.channels, cin, b.kernel], bound),
            bias: uniform(&mut rng, &[b.channels], bound),
            norm: BatchNormState::new(b.channels, spec.epsilon, spec.ema_momentum)?,
            kernel: b.kernel,
            dropout: b.dropout,
        });
        cin = b.channels;
    }
    let bound = (1.0 / spec.feature_dim as f64).sqrt();
    let classifier = Classifier {
        weight: uniform(&mut rng, &[spec.num_classes, spec.feature_dim], bound),
        bias: uniform(&mut rng, &[spec.num_classes], bound),
    };
    Ok(Model {
        spec: spec.clone(),
        extractor: FeatureExtractor {
            blocks,
            pool_window: spec.pool_window,
            adaptive_out: spec.adaptive_out,
        },
        classifier,
        training: true,
    })
}

/// Feature vectors `[B, feature_dim]` for a `[B, C, L]` batch.
pub fn extract_features<R: RngCore + ?Sized>(
    model: &mut Model,
    g: &mut Graph,
    params: &BoundParams,
    batch: NodeId,
    stats: StatsOverride,
    rng: &mut R,
) -> Result<NodeId> {
    model.check_input(g.value(batch))?;
    let training = model.training;
    let pool = model.extractor.pool_window;
    let mut x = batch;
    for (i, block) in model.extractor.blocks.iter_mut().enumerate() {
        let [w, b, gamma, beta] = params.nodes[4 * i..4 * i + 4] else {
            unreachable!("four parameters per block")
        };
        x = g.conv1d(x, w, b, 1, block.padding())?;
        let affine = Affine { gamma, beta };
        x = match stats {
            StatsOverride::BatchNoUpdate => {
                normalization::batch_stats_forward(g, x, affine, &block.norm)?
            }
            StatsOverride::None => normalization::bn_forward(g, x, affine, &mut block.norm)?,
        };
        x = g.relu(x);
        x = g.maxpool1d(x, pool, pool)?;
        x = g.dropout(x, block.dropout, training, rng)?;
    }
    x = g.adaptive_avg_pool1d(x, model.extractor.adaptive_out)?;
    let b = g.value(x).shape()[0];
    g.reshape(x, vec![b, model.spec.feature_dim])
}

/// Class logits `[B, num_classes]`.
pub fn classify(model: &Model, g: &mut Graph, params: &BoundParams, features: NodeId) -> Result<NodeId> {
    let f = g.value(features);
    if f.ndim() != 2 || f.shape()[1] != model.spec.feature_dim {
        return Err(Error::Dimension(format!(
            "classifier expects [B, {}], got {:?}",
            model.spec.feature_dim,
            f.shape()
        )));
    }
    let n = params.nodes.len();
    g.dense(features, params.nodes[n - 2], params.nodes[n - 1])
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        match *x.shape() {
            [_, c, l] if c == self.spec.in_channels && l == self.spec.input_len => Ok(()),
            _ => Err(Error::Dimension(format!(
                "model expects [B, {}, {}], got {:?}",
                self.spec.in_channels,
                self.spec.input_len,
                x.shape()
            ))),
        }
    }

    /// Training phase: dropout active; non-frozen layers use batch statistics.
    pub fn train(&mut self) {
        self.training = true;
        self.set_norm_phase(NormPhase::TrainBn);
    }

    /// Evaluation phase: dropout off; non-frozen layers use running estimates.
    pub fn eval(&mut self) {
        self.training = false;
        self.set_norm_phase(NormPhase::EvalBn);
    }

    fn set_norm_phase(&mut self, phase: NormPhase) {
        for s in self.norm_states_mut() {
            if s.mode() != NormPhase::Cbn {
                s.set_mode(phase);
            }
        }
    }

    /// Freezes the source running estimates when the spec asks for continual
    /// normalization. Returns whether the layers were switched.
    pub fn activate_continual_norm(&mut self) -> Result<bool> {
        if self.spec.norm_mode != NormKind::Cbn {
            return Ok(false);
        }
        if self.norm_states().any(|s| s.updates() == 0) {
            return Err(Error::Lifecycle(
                "cannot freeze running statistics before they are estimated".into(),
            ));
        }
        for s in self.norm_states_mut() {
            s.set_mode(NormPhase::Cbn);
        }
        Ok(true)
    }

    pub fn norm_states(&self) -> impl Iterator<Item = &BatchNormState> {
        self.extractor.blocks.iter().map(|b| &b.norm)
    }

    pub fn norm_states_mut(&mut self) -> impl Iterator<Item = &mut BatchNormState> {
        self.extractor.blocks.iter_mut().map(|b| &mut b.norm)
    }

    /// Every trainable tensor: per block weight, bias, γ, β; then the classifier.
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.extractor.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
            out.push(&mut b.norm.gamma);
            out.push(&mut b.norm.beta);
        }
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for b in &self.extractor.blocks {
            out.extend([&b.weight, &b.bias, &b.norm.gamma, &b.norm.beta]);
        }
        out.push(&self.classifier.weight);
        out.push(&self.classifier.bias);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            nodes: self.parameters().into_iter().map(|p| g.param(p)).collect(),
        }
    }

    /// Registers every parameter as a constant.
    pub fn bind_constants(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            nodes: self
                .parameters()
                .into_iter()
                .map(|p| g.constant(p.detached()))
                .collect(),
        }
    }

    /// Copies gradients of the bound leaves into the parameters' gradient slots.
    pub fn collect_grads(&mut self, g: &Graph, params: &BoundParams) -> Result<()> {
        for (p, &id) in self.parameters_mut().into_iter().zip(&params.nodes) {
            match g.grad(id) {
                Some(gr) => p.accumulate_grad(gr)?,
                None => p.accumulate_grad(&vec![0.0; p.len()])?,
            }
        }
        Ok(())
    }

    /// Logits for `x` in evaluation phase, in chunks of `chunk` samples.
    /// The model's phase is restored afterwards.
    pub fn predict_logits(&mut self, x: &Tensor, chunk: usize) -> Result<Tensor> {
        self.check_input(x)?;
        let was_training = self.training;
        self.eval();
        let n = x.shape()[0];
        let mut out = Vec::with_capacity(n * self.spec.num_classes);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut start = 0;
        let result: Result<()> = (|| {
            while start < n {
                let end = (start + chunk.max(1)).min(n);
                let rows: Vec<usize> = (start..end).collect();
                let mut g = Graph::new();
                let params = self.bind_constants(&mut g);
                let xb = g.constant(x.select_rows(&rows)?);
                let f = extract_features(self, &mut g, &params, xb, StatsOverride::None, &mut rng)?;
                let logits = classify(self, &mut g, &params, f)?;
                out.extend_from_slice(g.value(logits).data());
                start = end;
            }
            Ok(())
        })();
        if was_training {
            self.train();
        }
        result?;
        Tensor::new(vec![n, self.spec.num_classes], out)
    }

    /// Inputs to every normalization layer for `x`, in evaluation phase.
    pub fn pre_norm_activations(&mut self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let mut acts = Vec::new();
        let mut g = Graph::new();
        let params = self.bind_constants(&mut g);
        let mut h = g.constant(x.detached());
        let pool = self.extractor.pool_window;
        for (i, block) in self.extractor.blocks.iter().enumerate() {
            let n = &params.nodes[4 * i..4 * i + 4];
            h = g.conv1d(h, n[0], n[1], 1, block.padding())?;
            acts.push(g.value(h).detached());
            let out = g.channel_norm(
                h,
                n[2],
                n[3],
                crate::autodiff::NormStats::Fixed {
                    mean: block.norm.running_mean(),
                    var: block.norm.running_var(),
                },
                block.norm.epsilon(),
            )?;
            h = g.relu(out.output);
            h = g.maxpool1d(h, pool, pool)?;
        }
        Ok(acts)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        crate::io::write_atomic(path, serde_json::to_string(&ckpt)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 0,
                message: format!("unsupported checkpoint {} v{}", ckpt.format, ckpt.version),
            });
        }
        ckpt.model.spec.validate()?;
        Ok(ckpt.model)
    }
}

const CHECKPOINT_FORMAT: &str = "everadapt-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: Model,
}
