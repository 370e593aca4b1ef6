//! Batch normalization and continual batch normalization.
//!
//! Conventional BN standardizes every batch by its own statistics while
//! training and by running estimates at evaluation. In continual mode the
//! running estimates accumulated during source pretraining are frozen and
//! used for every later batch, whatever domain it comes from; only the
//! affine parameters keep learning.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, NormStats};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How a normalization layer treats incoming batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPhase {
    /// Batch statistics, running estimates updated by EMA.
    TrainBn,
    /// Running estimates, no update.
    EvalBn,
    /// Frozen source running estimates for every batch.
    Cbn,
}

/// Graph handles of a layer's affine parameters.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub gamma: NodeId,
    pub beta: NodeId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    mu_ema: Vec<f64>,
    var_ema: Vec<f64>,
    epsilon: f64,
    ema_momentum: f64,
    mode: NormPhase,
    updates: u64,
}

impl BatchNormState {
    /// Fresh layer: `γ = 1`, `β = 0`, running mean 0 and variance 1.
    pub fn new(channels: usize, epsilon: f64, ema_momentum: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::Parameter(format!("epsilon must be positive, got {epsilon}")));
        }
        if !(0.0..=1.0).contains(&ema_momentum) {
            return Err(Error::Parameter(format!(
                "ema momentum {ema_momentum} outside [0, 1]"
            )));
        }
        Ok(Self {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            mu_ema: vec![0.0; channels],
            var_ema: vec![1.0; channels],
            epsilon,
            ema_momentum,
            mode: NormPhase::TrainBn,
            updates: 0,
        })
    }

    pub fn channels(&self) -> usize {
        self.mu_ema.len()
    }

    pub fn mode(&self) -> NormPhase {
        self.mode
    }

    pub fn set_mode(&mut self, mode: NormPhase) {
        self.mode = mode;
    }

    pub fn running_mean(&self) -> &[f64] {
        &self.mu_ema
    }

    pub fn running_var(&self) -> &[f64] {
        &self.var_ema
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn ema_momentum(&self) -> f64 {
        self.ema_momentum
    }

    /// Number of EMA updates folded into the running estimates.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Overwrites the running estimates, e.g. when restoring a checkpoint.
    pub fn set_running_stats(&mut self, mean: Vec<f64>, var: Vec<f64>, updates: u64) -> Result<()> {
        if mean.len() != self.channels() || var.len() != self.channels() {
            return Err(Error::Dimension("running statistics length mismatch".into()));
        }
        if var.iter().any(|v| *v < 0.0) {
            return Err(Error::Parameter("running variance must be non-negative".into()));
        }
        self.mu_ema = mean;
        self.var_ema = var;
        self.updates = updates;
        Ok(())
    }

    /// Applies the frozen (pre-affine) normalization to `x` without a graph.
    pub fn normalize_with_running(&self, x: &Tensor) -> Result<Tensor> {
        let ch = self.channels();
        let (batch, spatial) = match *x.shape() {
            [b, c] if c == ch => (b, 1),
            [b, c, l] if c == ch => (b, l),
            _ => {
                return Err(Error::Dimension(format!(
                    "input {:?} does not have {ch} channels",
                    x.shape()
                )))
            }
        };
        let mut out = x.data().to_vec();
        for b in 0..batch {
            for c in 0..ch {
                let inv = 1.0 / (self.var_ema[c] + self.epsilon).sqrt();
                let off = (b * ch + c) * spatial;
                for v in &mut out[off..off + spatial] {
                    *v = (*v - self.mu_ema[c]) * inv;
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }
}

/// `μ_EMA ← (1−α)·μ_EMA + α·μ_B`, likewise for the variance.
pub fn ema_update(state: &mut BatchNormState, mu_batch: &[f64], var_batch: &[f64]) -> Result<()> {
    if state.mode == NormPhase::Cbn {
        return Err(Error::Lifecycle(
            "running statistics are frozen in continual mode".into(),
        ));
    }
    if mu_batch.len() != state.channels() || var_batch.len() != state.channels() {
        return Err(Error::Dimension("batch statistics length mismatch".into()));
    }
    let a = state.ema_momentum;
    for c in 0..state.channels() {
        state.mu_ema[c] = (1.0 - a) * state.mu_ema[c] + a * mu_batch[c];
        state.var_ema[c] = (1.0 - a) * state.var_ema[c] + a * var_batch[c];
    }
    state.updates += 1;
    Ok(())
}

fn batch_dim(g: &Graph, input: NodeId) -> usize {
    g.value(input).shape().first().copied().unwrap_or(0)
}

/// Normalization dispatched on `state.mode()`.
pub fn bn_forward(
    g: &mut Graph,
    input: NodeId,
    affine: Affine,
    state: &mut BatchNormState,
) -> Result<NodeId> {
    match state.mode {
        NormPhase::TrainBn => {
            let b = batch_dim(g, input);
            if b < 2 {
                return Err(Error::BatchSize(format!(
                    "training-mode batch normalization needs at least 2 samples, got {b}"
                )));
            }
            let out = g.channel_norm(input, affine.gamma, affine.beta, NormStats::Batch, state.epsilon)?;
            ema_update(state, &out.mean, &out.var)?;
            Ok(out.output)
        }
        NormPhase::EvalBn => {
            let out = g.channel_norm(
                input,
                affine.gamma,
                affine.beta,
                NormStats::Fixed {
                    mean: &state.mu_ema,
                    var: &state.var_ema,
                },
                state.epsilon,
            )?;
            Ok(out.output)
        }
        NormPhase::Cbn => cbn_forward(g, input, affine, state),
    }
}

/// Standardizes by the frozen source estimates; `γ`, `β` stay differentiable.
pub fn cbn_forward(
    g: &mut Graph,
    input: NodeId,
    affine: Affine,
    state: &BatchNormState,
) -> Result<NodeId> {
    if state.mode != NormPhase::Cbn {
        return Err(Error::Lifecycle(format!(
            "continual normalization requested while layer is in {:?}",
            state.mode
        )));
    }
    if state.updates == 0 {
        return Err(Error::Lifecycle(
            "running statistics were never estimated; pretrain first".into(),
        ));
    }
    let out = g.channel_norm(
        input,
        affine.gamma,
        affine.beta,
        NormStats::Fixed {
            mean: &state.mu_ema,
            var: &state.var_ema,
        },
        state.epsilon,
    )?;
    Ok(out.output)
}

/// Batch-statistics normalization that leaves the running estimates alone.
pub fn batch_stats_forward(
    g: &mut Graph,
    input: NodeId,
    affine: Affine,
    state: &BatchNormState,
) -> Result<NodeId> {
    let b = batch_dim(g, input);
    if b < 2 {
        return Err(Error::BatchSize(format!(
            "batch statistics need at least 2 samples, got {b}"
        )));
    }
    Ok(g.channel_norm(input, affine.gamma, affine.beta, NormStats::Batch, state.epsilon)?
        .output)
}
