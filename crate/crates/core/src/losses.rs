//! Training objectives.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sum of Gaussian RBF kernels `Σ_k exp(−‖x−y‖² / (2σ_k²))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub bandwidths: Vec<f64>,
}

impl KernelConfig {
    pub fn new(bandwidths: Vec<f64>) -> Result<Self> {
        let k = Self { bandwidths };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bandwidths.is_empty() || self.bandwidths.iter().any(|b| !(*b > 0.0)) {
            return Err(Error::Parameter(format!(
                "kernel bandwidths must be non-empty and positive: {:?}",
                self.bandwidths
            )));
        }
        Ok(())
    }

    /// Scales `multipliers` by the median pairwise distance of the rows of
    /// `a` and `b` together. Falls back to a unit median for degenerate sets.
    pub fn median_heuristic(a: &Tensor, b: &Tensor, multipliers: &[f64]) -> Result<Self> {
        let d = a.shape().get(1).copied().unwrap_or(0);
        let rows: Vec<&[f64]> = (0..a.shape()[0])
            .map(|i| a.row(i))
            .chain((0..b.shape()[0]).map(|i| b.row(i)))
            .collect();
        let mut dists = Vec::with_capacity(rows.len() * rows.len() / 2);
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let s: f64 = (0..d).map(|k| (rows[i][k] - rows[j][k]).powi(2)).sum();
                dists.push(s.sqrt());
            }
        }
        let median = if dists.is_empty() {
            1.0
        } else {
            dists.sort_by(f64::total_cmp);
            let n = dists.len();
            let m = if n % 2 == 1 {
                dists[n / 2]
            } else {
                0.5 * (dists[n / 2 - 1] + dists[n / 2])
            };
            if m > 1e-12 {
                m
            } else {
                1.0
            }
        };
        Self::new(multipliers.iter().map(|m| m * median).collect())
    }
}

/// Weighting of the adaptation objective. During adaptation the trainer
/// sets `total_steps` to the domain's step budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub total_steps: usize,
    pub beta_replay: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_start: 1.0,
            alpha_end: 0.1,
            total_steps: 1,
            beta_replay: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.alpha_start) || !unit.contains(&self.alpha_end) {
            return Err(Error::Config("alpha_start and alpha_end must lie in [0, 1]".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        if !(self.beta_replay >= 0.0) {
            return Err(Error::Config("beta_replay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Mean cross-entropy of `logits` against integer `labels`.
pub fn cross_entropy(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let lp = g.log_softmax(logits)?;
    g.nll(lp, labels)
}

/// Mean Shannon entropy of the softmax predictions.
pub fn entropy_loss(g: &mut Graph, logits: NodeId) -> Result<NodeId> {
    let b = g.value(logits).shape()[0];
    if b == 0 {
        return Err(Error::SetSize("entropy of an empty batch".into()));
    }
    let p = g.softmax(logits)?;
    let lp = g.log_softmax(logits)?;
    let plp = g.mul(p, lp)?;
    let s = g.sum(plp);
    Ok(g.scale(s, -1.0 / b as f64))
}

/// Biased squared MMD: `mean k(a,a') + mean k(b,b') − 2·mean k(a,b)`.
pub fn mmd(g: &mut Graph, set_a: NodeId, set_b: NodeId, kernel: &KernelConfig) -> Result<NodeId> {
    kernel.validate()?;
    let (na, nb) = (g.value(set_a).shape()[0], g.value(set_b).shape()[0]);
    if na == 0 || nb == 0 {
        return Err(Error::SetSize(format!("mmd needs non-empty sets, got {na} and {nb}")));
    }
    let daa = g.sq_dist(set_a, set_a)?;
    let dbb = g.sq_dist(set_b, set_b)?;
    let dab = g.sq_dist(set_a, set_b)?;
    let kaa = kernel_sum(g, daa, kernel)?;
    let kbb = kernel_sum(g, dbb, kernel)?;
    let kab = kernel_sum(g, dab, kernel)?;
    let maa = g.mean(kaa)?;
    let mbb = g.mean(kbb)?;
    let mab = g.mean(kab)?;
    let within = g.add(maa, mbb)?;
    let cross = g.scale(mab, 2.0);
    g.sub(within, cross)
}

fn kernel_sum(g: &mut Graph, sq: NodeId, kernel: &KernelConfig) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for &s in &kernel.bandwidths {
        let scaled = g.scale(sq, -1.0 / (2.0 * s * s));
        let k = g.exp(scaled);
        total = Some(match total {
            Some(t) => g.add(t, k)?,
            None => k,
        });
    }
    Ok(total.expect("validated non-empty"))
}

fn class_rows(labels: &[usize], class: usize) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter_map(|(i, &l)| (l == class).then_some(i))
        .collect()
}

/// Per-class MMD summed over classes with at least `min_per_class` rows on
/// both sides. `target_rows` restricts which target rows take part (e.g.
/// confident pseudo-labels); `None` uses them all.
#[allow(clippy::too_many_arguments)]
pub fn class_conditional_mmd(
    g: &mut Graph,
    feat_s: NodeId,
    labels_s: &[usize],
    feat_t: NodeId,
    pseudo_t: &[usize],
    target_rows: Option<&[bool]>,
    kernel: &KernelConfig,
    num_classes: usize,
    min_per_class: usize,
) -> Result<NodeId> {
    for &l in labels_s.iter().chain(pseudo_t) {
        if l >= num_classes {
            return Err(Error::Label {
                label: l,
                classes: num_classes,
            });
        }
    }
    if labels_s.len() != g.value(feat_s).shape()[0] || pseudo_t.len() != g.value(feat_t).shape()[0] {
        return Err(Error::Dimension("label count does not match feature rows".into()));
    }
    let masked: Vec<usize> = match target_rows {
        Some(mask) => pseudo_t
            .iter()
            .zip(mask)
            .map(|(&l, &keep)| if keep { l } else { usize::MAX })
            .collect(),
        None => pseudo_t.to_vec(),
    };
    let min = min_per_class.max(1);
    let mut total: Option<NodeId> = None;
    for c in 0..num_classes {
        let rs = class_rows(labels_s, c);
        let rt = class_rows(&masked, c);
        if rs.len() < min || rt.len() < min {
            continue;
        }
        let zs = g.select_rows(feat_s, &rs)?;
        let zt = g.select_rows(feat_t, &rt)?;
        let d = mmd(g, zs, zt, kernel)?;
        total = Some(match total {
            Some(t) => g.add(t, d)?,
            None => d,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    })
}

/// Replay term and whether it was skipped for lack of memory.
#[derive(Clone, Copy, Debug)]
pub struct ReplayTerm {
    pub loss: NodeId,
    pub buffer_empty: bool,
}

/// Self-training loss on memory logits against their stored pseudo-labels.
/// An empty memory yields a constant zero with `buffer_empty` set.
pub fn replay_loss(g: &mut Graph, memory_logits: Option<NodeId>, stored: &[usize]) -> Result<ReplayTerm> {
    match memory_logits {
        Some(l) if !stored.is_empty() => Ok(ReplayTerm {
            loss: cross_entropy(g, l, stored)?,
            buffer_empty: false,
        }),
        _ => Ok(ReplayTerm {
            loss: g.constant(Tensor::scalar(0.0)),
            buffer_empty: true,
        }),
    }
}

/// Linear ramp from `alpha_start` to `alpha_end` over `total_steps`.
pub fn alpha_schedule(step: usize, w: &LossWeights) -> f64 {
    let frac = (step as f64 / w.total_steps.max(1) as f64).min(1.0);
    w.alpha_start * (1.0 - frac) + w.alpha_end * frac
}

/// Scalar components of the adaptation objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub entropy: NodeId,
    pub alignment: NodeId,
    pub replay: NodeId,
    pub source: NodeId,
}

/// `α(t)·L_e + (1−α(t))·L_loc + β·L_m + L_s`.
pub fn overall_loss(g: &mut Graph, terms: LossTerms, step: usize, w: &LossWeights) -> Result<NodeId> {
    let a = alpha_schedule(step, w);
    weighted_sum(g, terms, a, w.beta_replay)
}

/// Same combination with an explicit entropy weight.
pub fn weighted_sum(g: &mut Graph, terms: LossTerms, alpha: f64, beta: f64) -> Result<NodeId> {
    let e = g.scale(terms.entropy, alpha);
    let l = g.scale(terms.alignment, 1.0 - alpha);
    let r = g.scale(terms.replay, beta);
    let s = g.add(e, l)?;
    let s = g.add(s, r)?;
    g.add(s, terms.source)
}
