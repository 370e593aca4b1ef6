use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use everadapt_core::config::{ExperimentConfig, Preset};
use everadapt_core::experiment::{
    self, hash_inputs, read_reports, render_table, replay_csv, replay_study, run_variant, seed_list,
    stability_csv, stability_study, write_run_outputs, RunManifest, Variant, DEFAULT_FRACTIONS,
};
use everadapt_core::io::write_atomic;
use everadapt_core::Error;

#[derive(Parser)]
#[command(name = "everadapt", version, about = "Continual domain adaptation experiments on fault signals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in defaults to start from.
    #[arg(long, default_value = "desk", value_parser = parse_preset)]
    preset: Preset,
    /// Output root; falls back to $EVERADAPT_OUT, then ./everadapt-out.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Number of seeds (0..N).
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    /// Dataset directory written by gen-data; defaults to <out>/data.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate every domain of the configured scenario.
    GenData(Common),
    /// Run the adaptation sequence per seed and per mode.
    Run {
        #[command(flatten)]
        args: RunArgs,
        /// Variants to run: everadapt, bn_baseline, cca_only, cca_replay, cbn_no_entropy.
        #[arg(long, value_delimiter = ',', default_value = "everadapt")]
        mode: Vec<String>,
    },
    /// Sweep the replay fraction with and without frozen statistics.
    ReplayStudy {
        #[command(flatten)]
        args: RunArgs,
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
    },
    /// Accuracy spread across seeds for three variants.
    StabilityStudy(RunArgs),
    /// Print the summary table of a finished run.
    Report(Common),
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Common {
    fn out_root(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os("EVERADAPT_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("everadapt-out"))
    }

    fn load(&self) -> everadapt_core::Result<ExperimentConfig> {
        match &self.config {
            Some(p) => ExperimentConfig::load(p, self.preset),
            None => Ok(ExperimentConfig::preset(self.preset)),
        }
    }
}

impl RunArgs {
    fn data_dir(&self) -> PathBuf {
        self.data.clone().unwrap_or_else(|| self.common.out_root().join("data"))
    }

    fn seed_list(&self) -> everadapt_core::Result<Vec<u64>> {
        if self.seeds == 0 {
            return Err(Error::Config("--seeds must be at least 1".into()));
        }
        Ok(seed_list(self.seeds))
    }

    /// Config, seeds, datasets and input hash.
    fn prepare(&self) -> everadapt_core::Result<Prepared> {
        let cfg = self.common.load()?;
        let seeds = self.seed_list()?;
        let data = self.data_dir();
        let splits = cfg.load_datasets(&data)?;
        let hash = hash_inputs(&cfg, &data)?;
        Ok(Prepared {
            cfg,
            seeds,
            splits,
            hash,
        })
    }
}

struct Prepared {
    cfg: ExperimentConfig,
    seeds: Vec<u64>,
    splits: Vec<everadapt_core::data::DomainSplit>,
    hash: String,
}

fn write_text(path: &Path, text: &str) -> everadapt_core::Result<()> {
    write_atomic(path, text.as_bytes())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn gen_data(common: &Common) -> everadapt_core::Result<()> {
    let cfg = common.load()?;
    let dir = common.out_root().join("data");
    let splits = cfg.generate()?;
    cfg.save_datasets(&splits, &dir)?;
    for s in &splits {
        println!(
            "{}: {} train / {} test segments of {}",
            s.domain_id(),
            s.train.len(),
            s.test.len(),
            cfg.data.window_len
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn run(args: &RunArgs, modes: &[String]) -> everadapt_core::Result<()> {
    let started = Instant::now();
    let variants = modes.iter().map(|m| m.parse()).collect::<everadapt_core::Result<Vec<Variant>>>()?;
    let p = args.prepare()?;
    let out = args.common.out_root().join("run");
    let mut reports = Vec::new();
    for v in variants {
        reports.push(run_variant(&p.cfg, &p.splits, v, &p.seeds, Some(&out.join("runs")))?);
    }
    for f in write_run_outputs(&reports, &out)? {
        println!("wrote {}", f.display());
    }
    let mut manifest = RunManifest::new("run", &p.cfg, &p.seeds, p.hash);
    manifest.record(&reports);
    manifest.write(&out, started)?;
    print!("{}", render_table(&reports));
    Ok(())
}

fn replay(args: &RunArgs, fractions: Option<&[f64]>) -> everadapt_core::Result<()> {
    let started = Instant::now();
    let fractions = fractions.unwrap_or(&DEFAULT_FRACTIONS);
    experiment::check_fractions(fractions)?;
    let p = args.prepare()?;
    let out = args.common.out_root().join("replay_study");
    let (rows, reports) = replay_study(&p.cfg, &p.splits, fractions, &p.seeds)?;
    write_text(&out.join("replay_study.csv"), &replay_csv(&rows)?)?;
    write_run_outputs(&reports, &out)?;
    let mut manifest = RunManifest::new("replay-study", &p.cfg, &p.seeds, p.hash);
    manifest.record(&reports);
    manifest.write(&out, started)?;
    println!("{:>9} {:>5} {:>16}", "fraction", "cbn", "BWT");
    for r in &rows {
        println!("{:>9.3} {:>5} {:>16}", r.fraction, r.cbn, format!("{:.2} ± {:.2}", r.bwt_mean, r.bwt_std));
    }
    Ok(())
}

fn stability(args: &RunArgs) -> everadapt_core::Result<()> {
    let started = Instant::now();
    let p = args.prepare()?;
    let out = args.common.out_root().join("stability_study");
    let (groups, reports) = stability_study(&p.cfg, &p.splits, &p.seeds)?;
    write_text(&out.join("stability.csv"), &stability_csv(&groups)?)?;
    write_run_outputs(&reports, &out)?;
    let mut manifest = RunManifest::new("stability-study", &p.cfg, &p.seeds, p.hash);
    manifest.record(&reports);
    manifest.write(&out, started)?;
    println!("{:<16} {:>8} {:>8} {:>8} {:>8}", "mode", "min", "median", "max", "range");
    for g in &groups {
        println!(
            "{:<16} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
            g.variant.name(),
            g.min,
            g.median,
            g.max,
            g.range()
        );
    }
    Ok(())
}

fn report(common: &Common) -> everadapt_core::Result<()> {
    let reports = read_reports(&common.out_root().join("run"))?;
    print!("{}", render_table(&reports));
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Spec(_) => 2,
        Error::Missing(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Run { args, mode } => run(args, mode),
        Command::ReplayStudy { args, fractions } => replay(args, fractions.as_deref()),
        Command::StabilityStudy(args) => stability(args),
        Command::Report(c) => report(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
