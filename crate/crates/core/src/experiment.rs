//! Multi-seed runs, ablation variants, the replay-size and stability
//! studies, and their CSV / JSON reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::data::DomainSplit;
use crate::error::{Error, Result};
use crate::evaluation::{Metrics, ResultMatrix};
use crate::io::write_atomic;
use crate::model::NormKind;
use crate::trainer::{run_sequence, AdaptationRun, TrainConfig};

/// Method variants compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Class-conditional alignment only, conventional normalization.
    CcaOnly,
    /// Alignment plus replay, conventional normalization.
    CcaReplay,
    /// Frozen source statistics, alignment and replay, no entropy term.
    CbnNoEntropy,
    /// The full method.
    Everadapt,
    /// The full objective with conventional normalization.
    BnBaseline,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Everadapt,
        Variant::BnBaseline,
        Variant::CcaOnly,
        Variant::CcaReplay,
        Variant::CbnNoEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::CcaOnly => "cca_only",
            Variant::CcaReplay => "cca_replay",
            Variant::CbnNoEntropy => "cbn_no_entropy",
            Variant::Everadapt => "everadapt",
            Variant::BnBaseline => "bn_baseline",
        }
    }

    pub fn apply(self, cfg: &mut TrainConfig) {
        let (norm, entropy, replay) = match self {
            Variant::CcaOnly => (NormKind::Bn, false, false),
            Variant::CcaReplay => (NormKind::Bn, false, true),
            Variant::CbnNoEntropy => (NormKind::Cbn, false, true),
            Variant::Everadapt => (NormKind::Cbn, true, true),
            Variant::BnBaseline => (NormKind::Bn, true, true),
        };
        cfg.norm_mode = norm;
        cfg.use_entropy = entropy;
        cfg.use_replay = replay;
        cfg.use_alignment = true;
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown mode {s:?} (expected one of {})", names.join(", ")))
            })
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Seeds `0..k`.
pub fn seed_list(k: usize) -> Vec<u64> {
    (0..k as u64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub metrics: Metrics,
    pub matrix: ResultMatrix,
    pub source_accuracy: f64,
    pub source_only: Vec<f64>,
    pub stage_rows: Vec<Vec<f64>>,
    pub millis: u128,
}

impl SeedRun {
    fn from_run(seed: u64, run: &AdaptationRun, millis: u128) -> Self {
        Self {
            seed,
            metrics: run.metrics,
            matrix: run.result_matrix.clone(),
            source_accuracy: run.source_accuracy,
            source_only: run.source_only.clone(),
            stage_rows: run.stages.iter().map(|s| s.row.clone()).collect(),
            millis,
        }
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub acc: (f64, f64),
    pub bwt: Option<(f64, f64)>,
    pub adapt: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub scenario: String,
    pub variant: Variant,
    pub replay_fraction: f64,
    pub runs: Vec<SeedRun>,
}

impl VariantReport {
    pub fn summary(&self) -> Summary {
        let acc: Vec<f64> = self.runs.iter().map(|r| r.metrics.acc).collect();
        let adapt: Vec<f64> = self.runs.iter().map(|r| r.metrics.adapt).collect();
        let bwt: Option<Vec<f64>> = self.runs.iter().map(|r| r.metrics.bwt).collect();
        Summary {
            acc: mean_std(&acc),
            bwt: bwt.map(|b| mean_std(&b)),
            adapt: mean_std(&adapt),
        }
    }

    pub fn accs(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.metrics.acc).collect()
    }

    /// Mean over seeds of the mean target accuracy before and right after
    /// adaptation (the diagonal).
    pub fn adaptation_gain(&self) -> (f64, f64) {
        let k = self.runs.len() as f64;
        let before = self
            .runs
            .iter()
            .map(|r| r.source_only.iter().sum::<f64>() / r.source_only.len() as f64)
            .sum::<f64>()
            / k;
        let after = self.runs.iter().map(|r| r.metrics.adapt).sum::<f64>() / k;
        (before, after)
    }
}

/// Runs `variant` once per seed. With `run_root`, per-seed checkpoints go
/// to `<run_root>/<variant>/seed_<s>/`.
pub fn run_variant(
    cfg: &ExperimentConfig,
    splits: &[DomainSplit],
    variant: Variant,
    seeds: &[u64],
    run_root: Option<&Path>,
) -> Result<VariantReport> {
    run_variant_with(cfg, splits, variant, seeds, run_root, |_| {})
}

/// [`run_variant`] with a hook to adjust each seed's training settings.
pub fn run_variant_with(
    cfg: &ExperimentConfig,
    splits: &[DomainSplit],
    variant: Variant,
    seeds: &[u64],
    run_root: Option<&Path>,
    tweak: impl Fn(&mut TrainConfig),
) -> Result<VariantReport> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let (source, targets) = cfg.arrange(splits)?;
    let targets: Vec<DomainSplit> = targets.into_iter().cloned().collect();
    let mut runs = Vec::with_capacity(seeds.len());
    let mut fraction = cfg.train.replay_fraction;
    for &seed in seeds {
        let mut tc = cfg.train_config(seed);
        variant.apply(&mut tc);
        tweak(&mut tc);
        fraction = tc.replay_fraction;
        let spec = cfg.model_spec(tc.norm_mode);
        let dir = run_root.map(|r| r.join(variant.name()).join(format!("seed_{seed}")));
        let started = Instant::now();
        let run = run_sequence(source, &targets, &spec, &tc, dir.as_deref())?;
        let millis = started.elapsed().as_millis();
        log::info!(
            "{} seed {seed}: ACC {:.2} BWT {} ADAPT {:.2} ({millis} ms)",
            variant,
            run.metrics.acc,
            run.metrics.bwt.map_or("-".into(), |b| format!("{b:.2}")),
            run.metrics.adapt
        );
        runs.push(SeedRun::from_run(seed, &run, millis));
    }
    Ok(VariantReport {
        scenario: cfg.scenario.name.clone(),
        variant,
        replay_fraction: fraction,
        runs,
    })
}

fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt6).unwrap_or_default()
}

/// Per-seed rows plus one `summary` row per variant.
pub fn metrics_csv(reports: &[VariantReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scenario", "mode", "seed", "acc", "acc_std", "bwt", "bwt_std", "adapt", "adapt_std"])?;
    for rep in reports {
        for r in &rep.runs {
            w.write_record([
                rep.scenario.clone(),
                rep.variant.name().into(),
                r.seed.to_string(),
                fmt6(r.metrics.acc),
                String::new(),
                fmt_opt(r.metrics.bwt),
                String::new(),
                fmt6(r.metrics.adapt),
                String::new(),
            ])?;
        }
        let s = rep.summary();
        w.write_record([
            rep.scenario.clone(),
            rep.variant.name().into(),
            "summary".into(),
            fmt6(s.acc.0),
            fmt6(s.acc.1),
            fmt_opt(s.bwt.map(|b| b.0)),
            fmt_opt(s.bwt.map(|b| b.1)),
            fmt6(s.adapt.0),
            fmt6(s.adapt.1),
        ])?;
    }
    finish_csv(w)
}

/// Every defined `R[i][j]` cell, one per row.
pub fn matrix_csv(reports: &[VariantReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scenario", "mode", "seed", "after_domain", "eval_domain", "accuracy"])?;
    for rep in reports {
        for r in &rep.runs {
            for (i, row) in r.matrix.to_rows().iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    if let Some(v) = v {
                        w.write_record([
                            rep.scenario.clone(),
                            rep.variant.name().into(),
                            r.seed.to_string(),
                            i.to_string(),
                            j.to_string(),
                            fmt6(*v),
                        ])?;
                    }
                }
            }
        }
    }
    finish_csv(w)
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Human-readable mean ± std table.
pub fn render_table(reports: &[VariantReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<16} {:>5} {:>18} {:>18} {:>18}", "mode", "seeds", "ACC", "BWT", "ADAPT");
    for rep in reports {
        let s = rep.summary();
        let pm = |(m, sd): (f64, f64)| format!("{m:.2} ± {sd:.2}");
        let _ = writeln!(
            out,
            "{:<16} {:>5} {:>18} {:>18} {:>18}",
            rep.variant.name(),
            rep.runs.len(),
            pm(s.acc),
            s.bwt.map_or("-".into(), pm),
            pm(s.adapt)
        );
    }
    out
}

/// Files written by [`write_run_outputs`].
pub const METRICS_CSV: &str = "metrics.csv";
pub const MATRIX_CSV: &str = "result_matrix.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const MANIFEST_JSON: &str = "manifest.json";

pub fn write_run_outputs(reports: &[VariantReport], out: &Path) -> Result<Vec<PathBuf>> {
    let files = [
        (METRICS_CSV, metrics_csv(reports)?),
        (MATRIX_CSV, matrix_csv(reports)?),
        (METRICS_JSON, serde_json::to_string_pretty(reports)? + "\n"),
    ];
    files
        .into_iter()
        .map(|(name, body)| {
            let p = out.join(name);
            write_atomic(&p, body.as_bytes())?;
            Ok(p)
        })
        .collect()
}

pub fn read_reports(out: &Path) -> Result<Vec<VariantReport>> {
    let p = out.join(METRICS_JSON);
    if !p.exists() {
        return Err(Error::Missing(p));
    }
    Ok(serde_json::from_str(&fs::read_to_string(&p)?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayRow {
    pub fraction: f64,
    pub cbn: bool,
    pub variant: Variant,
    pub bwt_mean: f64,
    pub bwt_std: f64,
    pub acc_mean: f64,
    pub adapt_mean: f64,
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.01, 0.05, 0.10];

pub fn check_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.is_empty() {
        return Err(Error::Config("at least one replay fraction is required".into()));
    }
    if let Some(f) = fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::Config(format!("replay fraction {f} is outside (0, 1]")));
    }
    Ok(())
}

/// BWT against replay size, with frozen statistics ([`Variant::Everadapt`])
/// and without ([`Variant::CcaReplay`]).
pub fn replay_study(
    cfg: &ExperimentConfig,
    splits: &[DomainSplit],
    fractions: &[f64],
    seeds: &[u64],
) -> Result<(Vec<ReplayRow>, Vec<VariantReport>)> {
    check_fractions(fractions)?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for (cbn, variant) in [(true, Variant::Everadapt), (false, Variant::CcaReplay)] {
        for &f in fractions {
            let rep = run_variant_with(cfg, splits, variant, seeds, None, |tc| tc.replay_fraction = f)?;
            let s = rep.summary();
            let (bwt_mean, bwt_std) = s.bwt.unwrap_or((0.0, 0.0));
            rows.push(ReplayRow {
                fraction: f,
                cbn,
                variant,
                bwt_mean,
                bwt_std,
                acc_mean: s.acc.0,
                adapt_mean: s.adapt.0,
            });
            reports.push(rep);
        }
    }
    Ok((rows, reports))
}

pub fn replay_csv(rows: &[ReplayRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["fraction", "cbn", "mode", "bwt", "bwt_std", "acc", "adapt"])?;
    for r in rows {
        w.write_record([
            fmt6(r.fraction),
            r.cbn.to_string(),
            r.variant.name().into(),
            fmt6(r.bwt_mean),
            fmt6(r.bwt_std),
            fmt6(r.acc_mean),
            fmt6(r.adapt_mean),
        ])?;
    }
    finish_csv(w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityGroup {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub accs: Vec<f64>,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl StabilityGroup {
    pub fn from_report(rep: &VariantReport) -> Self {
        let accs = rep.accs();
        let mut sorted = accs.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Self {
            variant: rep.variant,
            seeds: rep.runs.iter().map(|r| r.seed).collect(),
            min: sorted[0],
            median,
            max: sorted[n - 1],
            accs,
        }
    }

    pub fn range(&self) -> f64 {
        self.max - self.min
    }
}

pub const STABILITY_VARIANTS: [Variant; 3] = [Variant::Everadapt, Variant::CbnNoEntropy, Variant::CcaReplay];

/// ACC spread across seeds for the full method, the entropy-free variant
/// and the variant without frozen statistics, on identical seeds.
pub fn stability_study(
    cfg: &ExperimentConfig,
    splits: &[DomainSplit],
    seeds: &[u64],
) -> Result<(Vec<StabilityGroup>, Vec<VariantReport>)> {
    let reports = STABILITY_VARIANTS
        .iter()
        .map(|&v| run_variant(cfg, splits, v, seeds, None))
        .collect::<Result<Vec<_>>>()?;
    Ok((reports.iter().map(StabilityGroup::from_report).collect(), reports))
}

pub fn stability_csv(groups: &[StabilityGroup]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["mode", "seeds", "min", "median", "max", "range"])?;
    for g in groups {
        w.write_record([
            g.variant.name().into(),
            g.seeds.len().to_string(),
            fmt6(g.min),
            fmt6(g.median),
            fmt6(g.max),
            fmt6(g.range()),
        ])?;
    }
    finish_csv(w)
}

/// Record of one command invocation. The only file carrying wall-clock data.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: String,
    pub seeds: Vec<u64>,
    pub scenario: Vec<String>,
    pub input_hash: String,
    pub stages: Vec<StageSnapshot>,
    pub started_unix: u64,
    pub elapsed_ms: u128,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageSnapshot {
    pub mode: String,
    pub seed: u64,
    pub rows: Vec<Vec<f64>>,
    pub millis: u128,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &ExperimentConfig, seeds: &[u64], input_hash: String) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: cfg.to_toml(),
            seeds: seeds.to_vec(),
            scenario: std::iter::once(cfg.scenario.source.clone())
                .chain(cfg.scenario.targets.iter().cloned())
                .collect(),
            input_hash,
            stages: Vec::new(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            elapsed_ms: 0,
        }
    }

    pub fn record(&mut self, reports: &[VariantReport]) {
        for rep in reports {
            for r in &rep.runs {
                self.stages.push(StageSnapshot {
                    mode: rep.variant.name().into(),
                    seed: r.seed,
                    rows: r.stage_rows.clone(),
                    millis: r.millis,
                });
            }
        }
    }

    pub fn write(&mut self, out: &Path, started: Instant) -> Result<PathBuf> {
        self.elapsed_ms = started.elapsed().as_millis();
        let p = out.join(MANIFEST_JSON);
        write_atomic(&p, (serde_json::to_string_pretty(self)? + "\n").as_bytes())?;
        Ok(p)
    }
}

/// SHA-256 over the config text and every file in the scenario's dataset
/// directories, in a fixed order.
pub fn hash_inputs(cfg: &ExperimentConfig, data_dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    h.update(cfg.to_toml().as_bytes());
    for id in std::iter::once(&cfg.scenario.source).chain(&cfg.scenario.targets) {
        for split in ["train", "test"] {
            let dir = data_dir.join(id).join(split);
            let mut names: Vec<PathBuf> = fs::read_dir(&dir)
                .map_err(|_| Error::Missing(dir.clone()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .collect();
            names.sort();
            for p in names {
                h.update(p.file_name().map(|n| n.as_encoded_bytes()).unwrap_or_default());
                h.update(fs::read(&p)?);
            }
        }
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
