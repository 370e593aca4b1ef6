//! Source pretraining, sequential adaptation over target domains, and the
//! replay memory that carries pseudo-labeled samples between them.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_in_place, Graph};
use crate::data::{DomainDataset, DomainSplit};
use crate::error::{Error, Result};
use crate::evaluation::{accuracy, argmax, AdaptMode, Metrics, ResultMatrix};
use crate::losses::{self, KernelConfig, LossTerms, LossWeights};
use crate::model::{build_model, classify, extract_features, Model, ModelSpec, NormKind, StatsOverride};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tensor::Tensor;

/// How the labeled source stream is normalized once statistics are frozen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CbnSourceStream {
    /// Frozen source statistics, like every other stream.
    #[default]
    Frozen,
    /// Batch statistics of the source batch itself, without touching the
    /// running estimates.
    Batch,
}

/// Which finished domains the memory batch is drawn from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayScope {
    Last,
    #[default]
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// Epochs per target domain.
    pub epochs: usize,
    /// Pretraining epochs; `None` uses `epochs`.
    pub pretrain_epochs: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub replay_fraction: f64,
    pub pseudo_threshold: f64,
    /// Gate the alignment term on confident pseudo-labels only.
    pub threshold_alignment: bool,
    pub weights: LossWeights,
    pub norm_mode: NormKind,
    pub cbn_source_stream: CbnSourceStream,
    pub replay_scope: ReplayScope,
    pub use_entropy: bool,
    pub use_replay: bool,
    pub use_alignment: bool,
    /// Bandwidth multipliers applied to the median pairwise distance.
    pub kernel_multipliers: Vec<f64>,
    pub min_per_class: usize,
    pub adapt_mode: AdaptMode,
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            weight_decay: 1e-4,
            epochs: 10,
            pretrain_epochs: None,
            batch_size: 32,
            seed: 0,
            replay_fraction: 0.01,
            pseudo_threshold: 0.8,
            threshold_alignment: true,
            weights: LossWeights::default(),
            norm_mode: NormKind::Cbn,
            cbn_source_stream: CbnSourceStream::Frozen,
            replay_scope: ReplayScope::All,
            use_entropy: true,
            use_replay: true,
            use_alignment: true,
            kernel_multipliers: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            min_per_class: 2,
            adapt_mode: AdaptMode::Corrected,
            eval_chunk: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs < 1 {
            return bad("train.epochs must be >= 1");
        }
        if self.batch_size < 2 {
            return bad("train.batch_size must be >= 2");
        }
        if !(0.0..1.0).contains(&self.pseudo_threshold) {
            return bad("train.pseudo_threshold must be in [0, 1)");
        }
        if !(self.replay_fraction > 0.0 && self.replay_fraction <= 1.0) {
            return bad("train.replay_fraction must be in (0, 1]");
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("train.lr and train.weight_decay must be >= 0");
        }
        if self.kernel_multipliers.is_empty() || self.kernel_multipliers.iter().any(|&m| !(m > 0.0)) {
            return bad("losses.kernel_multipliers must be non-empty and positive");
        }
        if self.eval_chunk == 0 {
            return bad("train.eval_chunk must be positive");
        }
        self.weights.validate()
    }

    pub fn pretrain_epochs(&self) -> usize {
        self.pretrain_epochs.unwrap_or(self.epochs)
    }
}

/// Stored segment with the pseudo-label assigned when it was buffered.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub segment: Vec<f64>,
    pub pseudo_label: usize,
    pub domain_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    entries: Vec<BufferEntry>,
    capacity_fraction: f64,
}

impl ReplayBuffer {
    pub fn new(capacity_fraction: f64) -> Result<Self> {
        if !(capacity_fraction > 0.0 && capacity_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "replay fraction {capacity_fraction} is outside (0, 1]"
            )));
        }
        Ok(Self {
            entries: Vec::new(),
            capacity_fraction,
        })
    }

    pub fn capacity_fraction(&self) -> f64 {
        self.capacity_fraction
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count_for(&self, domain_index: usize) -> usize {
        self.entries.iter().filter(|e| e.domain_index == domain_index).count()
    }

    pub fn domains(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.entries.iter().map(|e| e.domain_index).collect();
        d.dedup();
        d
    }

    /// Indices of entries eligible for replay under `scope`.
    pub fn pool(&self, scope: ReplayScope) -> Vec<usize> {
        let last = self.entries.last().map(|e| e.domain_index);
        (0..self.entries.len())
            .filter(|&i| scope == ReplayScope::All || Some(self.entries[i].domain_index) == last)
            .collect()
    }

    fn batch(&self, rows: &[usize], window: usize) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(rows.len() * window);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            data.extend_from_slice(&self.entries[r].segment);
            labels.push(self.entries[r].pseudo_label);
        }
        (Tensor::new(vec![rows.len(), 1, window], data).expect("consistent"), labels)
    }
}

/// Argmax pseudo-labels and a mask of predictions at least `threshold` confident.
pub fn pseudo_label(model: &mut Model, batch: &Tensor, threshold: f64) -> Result<(Vec<usize>, Vec<bool>)> {
    let logits = model.predict_logits(batch, 256)?;
    Ok(pseudo_label_from_logits(&logits, threshold))
}

pub fn pseudo_label_from_logits(logits: &Tensor, threshold: f64) -> (Vec<usize>, Vec<bool>) {
    let c = logits.shape()[1];
    let mut labels = Vec::with_capacity(logits.shape()[0]);
    let mut mask = Vec::with_capacity(logits.shape()[0]);
    for row in logits.data().chunks(c) {
        let mut p = row.to_vec();
        softmax_in_place(&mut p);
        let l = argmax(&p);
        labels.push(l);
        mask.push(p[l] >= threshold);
    }
    (labels, mask)
}

/// Adds `round(fraction · n)` segments of `finished` to the buffer,
/// balanced across pseudo-labels where the domain allows it.
pub fn update_buffer(
    buffer: &mut ReplayBuffer,
    model: &mut Model,
    finished: &DomainDataset,
    domain_index: usize,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    if buffer.entries.iter().any(|e| e.domain_index == domain_index) {
        return Err(Error::State(format!("domain {domain_index} is already buffered")));
    }
    let n = finished.len();
    let quota = (buffer.capacity_fraction * n as f64).round() as usize;
    if quota == 0 {
        return Ok(0);
    }
    let (labels, _) = pseudo_label(model, &finished.all(), 0.0)?;
    let classes = model.spec().num_classes;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for rows in &mut by_class {
        rows.shuffle(rng);
    }
    // round-robin over classes until the quota is met; exhausted classes drop out
    let mut take = vec![0usize; classes];
    let mut picked = 0;
    while picked < quota {
        for c in 0..classes {
            if picked < quota && take[c] < by_class[c].len() {
                take[c] += 1;
                picked += 1;
            }
        }
    }
    let mut chosen: Vec<usize> = (0..classes).flat_map(|c| by_class[c][..take[c]].to_vec()).collect();
    chosen.sort_unstable();
    for i in chosen {
        buffer.entries.push(BufferEntry {
            segment: finished.segment(i).to_vec(),
            pseudo_label: labels[i],
            domain_index,
        });
    }
    Ok(quota)
}

/// Shuffled pass over `0..n`, reshuffled whenever it runs out, so every
/// batch has the requested size.
#[derive(Clone, Debug)]
struct CyclicSampler {
    order: Vec<usize>,
    pos: usize,
}

impl CyclicSampler {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn next(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn steps_for(n: usize, epochs: usize, batch: usize) -> usize {
    epochs * n.div_ceil(batch)
}

/// Loss components of one adaptation step, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub source: f64,
    pub entropy: f64,
    pub alignment: f64,
    pub replay: f64,
    pub alpha: f64,
}

/// Mean step losses over one domain.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub steps: usize,
    pub mean: StepLosses,
    pub replay_skipped: bool,
}

/// Owns the optimizer state, the RNG stream and the replay memory of one run.
pub struct ContinualTrainer {
    cfg: TrainConfig,
    optimizer: Optimizer,
    rng: ChaCha8Rng,
    buffer: ReplayBuffer,
}

impl ContinualTrainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            optimizer: Optimizer::new(cfg.optimizer, cfg.lr, cfg.weight_decay),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15),
            buffer: ReplayBuffer::new(cfg.replay_fraction)?,
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    /// Supervised cross-entropy on the labeled source; the normalization
    /// layers estimate their running statistics along the way.
    pub fn pretrain_source(&mut self, model: &mut Model, source: &DomainDataset) -> Result<PhaseReport> {
        let labels = source
            .labels()
            .ok_or_else(|| Error::Dataset(format!("source domain {} is unlabeled", source.domain_id)))?
            .to_vec();
        if source.is_empty() {
            return Err(Error::Dataset("source domain is empty".into()));
        }
        model.train();
        let bs = self.cfg.batch_size.min(source.len()).max(2);
        let steps = steps_for(source.len(), self.cfg.pretrain_epochs(), self.cfg.batch_size);
        let mut sampler = CyclicSampler::new(source.len(), &mut self.rng);
        let mut total = 0.0;
        for _ in 0..steps {
            let rows = sampler.next(bs, &mut self.rng);
            let ys: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
            let mut g = Graph::new();
            let params = model.bind(&mut g);
            let x = g.constant(source.batch(&rows));
            let f = extract_features(model, &mut g, &params, x, StatsOverride::None, &mut self.rng)?;
            let logits = classify(model, &mut g, &params, f)?;
            let loss = losses::cross_entropy(&mut g, logits, &ys)?;
            total += g.value(loss).item();
            g.backward(loss)?;
            model.collect_grads(&g, &params)?;
            self.optimizer.step(&mut model.parameters_mut())?;
        }
        model.eval();
        Ok(PhaseReport {
            steps,
            mean: StepLosses {
                total: total / steps.max(1) as f64,
                source: total / steps.max(1) as f64,
                ..Default::default()
            },
            replay_skipped: true,
        })
    }

    /// One pass of the adaptation objective over `target` (unlabeled), with
    /// the labeled `source` anchoring the classifier and the replay memory
    /// guarding earlier domains.
    pub fn adapt_to_domain(
        &mut self,
        model: &mut Model,
        source: &DomainDataset,
        target: &DomainDataset,
    ) -> Result<PhaseReport> {
        let src_labels = source
            .labels()
            .ok_or_else(|| Error::Dataset(format!("source domain {} is unlabeled", source.domain_id)))?
            .to_vec();
        if target.is_empty() {
            return Err(Error::Dataset(format!("target domain {} is empty", target.domain_id)));
        }
        if source.len() < 2 || target.len() < 2 {
            return Err(Error::Dataset("adaptation needs at least two source and two target segments".into()));
        }
        let frozen = model.activate_continual_norm()?;
        model.train();
        let cfg = self.cfg.clone();
        let classes = model.spec().num_classes;
        let window = model.spec().input_len;
        let steps = steps_for(target.len(), cfg.epochs, cfg.batch_size);
        let weights = LossWeights {
            total_steps: steps,
            ..cfg.weights
        };
        let bs_s = cfg.batch_size.min(source.len());
        let bs_t = cfg.batch_size.min(target.len());
        let mut src_sampler = CyclicSampler::new(source.len(), &mut self.rng);
        let mut tgt_sampler = CyclicSampler::new(target.len(), &mut self.rng);
        let pool = if cfg.use_replay {
            self.buffer.pool(cfg.replay_scope)
        } else {
            Vec::new()
        };
        let mut mem_sampler = CyclicSampler::new(pool.len(), &mut self.rng);
        let bs_m = cfg.batch_size.min(pool.len());
        let source_stats = if frozen && cfg.cbn_source_stream == CbnSourceStream::Batch {
            StatsOverride::BatchNoUpdate
        } else {
            StatsOverride::None
        };

        let mut sum = StepLosses::default();
        for step in 0..steps {
            let s_rows = src_sampler.next(bs_s, &mut self.rng);
            let t_rows = tgt_sampler.next(bs_t, &mut self.rng);
            let ys: Vec<usize> = s_rows.iter().map(|&r| src_labels[r]).collect();
            let xt = target.batch(&t_rows);
            let (pseudo, confident) = if cfg.use_alignment {
                let logits = model.predict_logits(&xt, cfg.eval_chunk)?;
                pseudo_label_from_logits(&logits, cfg.pseudo_threshold)
            } else {
                (Vec::new(), Vec::new())
            };

            let mut g = Graph::new();
            let params = model.bind(&mut g);
            let xs = g.constant(source.batch(&s_rows));
            let fs = extract_features(model, &mut g, &params, xs, source_stats, &mut self.rng)?;
            let ls = classify(model, &mut g, &params, fs)?;
            let l_src = losses::cross_entropy(&mut g, ls, &ys)?;

            // memory and target share one forward pass, so with batch
            // statistics they are normalized (and tracked) together
            let mut mem_labels = Vec::new();
            let mut joint = xt;
            if bs_m >= 1 {
                let picks = mem_sampler.next(bs_m, &mut self.rng);
                let rows: Vec<usize> = picks.iter().map(|&p| pool[p]).collect();
                let (xm, ym) = self.buffer.batch(&rows, window);
                let mut data = xm.into_data();
                data.extend_from_slice(joint.data());
                joint = Tensor::new(vec![bs_m + bs_t, 1, window], data)?;
                mem_labels = ym;
            }
            let xj = g.constant(joint);
            let fj = extract_features(model, &mut g, &params, xj, StatsOverride::None, &mut self.rng)?;
            let lj = classify(model, &mut g, &params, fj)?;
            let (ft, lt, mem_logits) = if mem_labels.is_empty() {
                (fj, lj, None)
            } else {
                let m: Vec<usize> = (0..bs_m).collect();
                let t: Vec<usize> = (bs_m..bs_m + bs_t).collect();
                (g.select_rows(fj, &t)?, g.select_rows(lj, &t)?, Some(g.select_rows(lj, &m)?))
            };
            let replay = losses::replay_loss(&mut g, mem_logits, &mem_labels)?;
            let l_ent = if cfg.use_entropy {
                losses::entropy_loss(&mut g, lt)?
            } else {
                g.constant(Tensor::scalar(0.0))
            };
            let l_loc = if cfg.use_alignment {
                let kernel = KernelConfig::median_heuristic(g.value(fs), g.value(ft), &cfg.kernel_multipliers)?;
                let mask = cfg.threshold_alignment.then_some(confident.as_slice());
                losses::class_conditional_mmd(
                    &mut g,
                    fs,
                    &ys,
                    ft,
                    &pseudo,
                    mask,
                    &kernel,
                    classes,
                    cfg.min_per_class,
                )?
            } else {
                g.constant(Tensor::scalar(0.0))
            };
            let alpha = if cfg.use_entropy {
                losses::alpha_schedule(step, &weights)
            } else {
                0.0
            };
            let terms = LossTerms {
                entropy: l_ent,
                alignment: l_loc,
                replay: replay.loss,
                source: l_src,
            };
            let total = losses::weighted_sum(&mut g, terms, alpha, weights.beta_replay)?;
            sum.total += g.value(total).item();
            sum.source += g.value(l_src).item();
            sum.entropy += g.value(l_ent).item();
            sum.alignment += g.value(l_loc).item();
            sum.replay += g.value(replay.loss).item();
            sum.alpha += alpha;
            g.backward(total)?;
            model.collect_grads(&g, &params)?;
            self.optimizer.step(&mut model.parameters_mut())?;
        }
        model.eval();
        let k = steps.max(1) as f64;
        Ok(PhaseReport {
            steps,
            mean: StepLosses {
                total: sum.total / k,
                source: sum.source / k,
                entropy: sum.entropy / k,
                alignment: sum.alignment / k,
                replay: sum.replay / k,
                alpha: sum.alpha / k,
            },
            replay_skipped: bs_m == 0,
        })
    }

    /// Buffers the just-finished target domain.
    pub fn update_buffer(&mut self, model: &mut Model, finished: &DomainDataset, domain_index: usize) -> Result<usize> {
        update_buffer(&mut self.buffer, model, finished, domain_index, &mut self.rng)
    }
}

/// Snapshot taken after each target domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub domain_id: String,
    /// `R[stage][0..=stage]`.
    pub row: Vec<f64>,
    pub losses: PhaseReport,
    pub buffer_size: usize,
    pub millis: u128,
}

/// Everything produced by one pass over a scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationRun {
    /// Source first, then targets in adaptation order.
    pub scenario: Vec<String>,
    pub result_matrix: ResultMatrix,
    pub metrics: Metrics,
    /// Source-test accuracy right after pretraining.
    pub source_accuracy: f64,
    /// Accuracy of the pretrained model on each target test set, before any
    /// adaptation.
    pub source_only: Vec<f64>,
    pub pretrain: PhaseReport,
    pub stages: Vec<StageRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Pretrains on `source`, then adapts to each of `targets` in order,
/// evaluating the current and every earlier domain after each stage. With
/// `run_dir`, `stage_<k>.ckpt` is written after every stage (stage 0 being
/// the pretrained model) along with `run.json`.
pub fn run_sequence(
    source: &DomainSplit,
    targets: &[DomainSplit],
    spec: &ModelSpec,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<AdaptationRun> {
    if targets.is_empty() {
        return Err(Error::Config("scenario needs at least one target domain".into()));
    }
    let mut spec = spec.clone();
    spec.norm_mode = cfg.norm_mode;
    let mut model = build_model(&spec, cfg.seed)?;
    let mut trainer = ContinualTrainer::new(cfg.clone())?;
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir)?;
    }
    let mut checkpoints = Vec::new();
    let mut checkpoint = |model: &Model, k: usize| -> Result<()> {
        if let Some(dir) = run_dir {
            let p = dir.join(format!("stage_{k}.ckpt"));
            model.save(&p)?;
            checkpoints.push(p);
        }
        Ok(())
    };

    let pretrain = trainer.pretrain_source(&mut model, &source.train)?;
    let source_accuracy = accuracy(&mut model, &source.test)?;
    let source_only = targets
        .iter()
        .map(|t| accuracy(&mut model, &t.test))
        .collect::<Result<Vec<_>>>()?;
    checkpoint(&model, 0)?;

    let mut r = ResultMatrix::new(targets.len())?;
    let mut stages = Vec::with_capacity(targets.len());
    for (i, target) in targets.iter().enumerate() {
        let started = Instant::now();
        let unlabeled = target.train.without_labels();
        let losses = trainer.adapt_to_domain(&mut model, &source.train, &unlabeled)?;
        let mut row = Vec::with_capacity(i + 1);
        for (j, seen) in targets[..=i].iter().enumerate() {
            let a = accuracy(&mut model, &seen.test)?;
            r.set(i, j, a)?;
            row.push(a);
        }
        if i + 1 < targets.len() {
            trainer.update_buffer(&mut model, &unlabeled, i)?;
        }
        log::debug!("stage {} on {}: row {:?}", i + 1, target.domain_id(), row);
        checkpoint(&model, i + 1)?;
        stages.push(StageRecord {
            stage: i + 1,
            domain_id: target.domain_id().to_string(),
            row,
            losses,
            buffer_size: trainer.buffer().len(),
            millis: started.elapsed().as_millis(),
        });
    }
    let run = AdaptationRun {
        scenario: std::iter::once(source.domain_id().to_string())
            .chain(targets.iter().map(|t| t.domain_id().to_string()))
            .collect(),
        metrics: Metrics::from_matrix(&r, cfg.adapt_mode)?,
        result_matrix: r,
        source_accuracy,
        source_only,
        pretrain,
        stages,
        checkpoints,
    };
    if let Some(dir) = run_dir {
        let record = RunRecord { config: cfg, run: &run };
        crate::io::write_atomic(&dir.join("run.json"), serde_json::to_string_pretty(&record)?.as_bytes())?;
    }
    Ok(run)
}

#[derive(Serialize)]
struct RunRecord<'a> {
    config: &'a TrainConfig,
    run: &'a AdaptationRun,
}
