use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use tracing::{info, warn};
use tracing_subscriber::EnvFilter;

use segadapt::config::{HeadConfig, RunConfig};
use segadapt::container::Container;
use segadapt::data::{generate_split, Dataset, Split};
use segadapt::engine::{adaptation_sweep, adapt_stream, evaluate, pretrain_sweep, LossRow, SweepKind, Trainer};
use segadapt::losses::{Discrepancy, Method};
use segadapt::model::{Head, Network};
use segadapt::report::{self, RunManifest};
use segadapt::rng::Seeds;

/// Environment variable holding the log filter (e.g. `debug`, `segadapt=trace`).
const LOG_ENV: &str = "SEGADAPT_LOG";
const CHECKPOINT: &str = "model.ckpt";
const SUMMARY: &str = "summary.json";

#[derive(Parser)]
#[command(name = "segadapt", version, about = "Segmentation pretraining and online test-time adaptation")]
struct Cli {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source-train, source-val and target-stream splits.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain on the labeled source split.
    Pretrain {
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train the single-head network without the transfer module.
        #[arg(long)]
        no_transformer: bool,
        /// Resume from a checkpoint written by an earlier pretrain run.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Stop after this many completed epochs, leaving a resumable checkpoint.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Adapt a checkpoint online to the target stream and score it.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target split directory.
        #[arg(long)]
        stream: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: AdaptOpts,
    },
    /// Compare settings: heads, K and metric adapt one checkpoint; lambda,
    /// layers and tap pretrain one network per value.
    Sweep {
        /// heads | K | lambda | layers | metric | tap
        #[arg(long)]
        kind: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// gen-data directory; required for lambda, layers and tap.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Target split directory; defaults to DATA/target-stream.
        #[arg(long)]
        stream: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: AdaptOpts,
    },
    /// Regenerate CSV and SVG output of run directories from their raw data.
    Report {
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        /// Also write one evolution chart overlaying every run.
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
}

#[derive(Args)]
struct AdaptOpts {
    #[arg(long)]
    method: Option<String>,
    /// Transformations per family per step.
    #[arg(long = "K")]
    k: Option<usize>,
    /// Update and inference heads, e.g. US or SS.
    #[arg(long)]
    heads: Option<String>,
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    /// Reset the model before every sample instead of carrying state.
    #[arg(long)]
    episodic: bool,
}

impl AdaptOpts {
    fn apply(&self, run: &mut RunConfig) -> Result<()> {
        let a = &mut run.adapt;
        if let Some(m) = &self.method {
            a.method = Method::parse(m)?;
        }
        if let Some(k) = self.k {
            a.k = k;
        }
        if let Some(h) = &self.heads {
            a.heads = HeadConfig::parse(h)?;
        }
        if let Some(m) = &self.metric {
            a.metric = Discrepancy::parse(m)?;
        }
        if let Some(lr) = self.lr {
            a.lr = lr;
        }
        if self.episodic {
            a.continual = false;
        }
        Ok(())
    }
}

fn main() -> ExitCode {
    let filter = EnvFilter::try_from_env(LOG_ENV).unwrap_or_else(|_| EnvFilter::new("info"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::GenData { out } => {
            cfg.validate()?;
            gen_data(&cfg, &out)
        }
        Command::Pretrain {
            data,
            out,
            no_transformer,
            from,
            epochs,
            stop_after,
        } => {
            cfg.pretrain.no_transformer |= no_transformer;
            if let Some(e) = epochs {
                cfg.pretrain.epochs = e;
            }
            cfg.validate()?;
            pretrain(&cfg, &data, &out, from.as_deref(), stop_after)
        }
        Command::Adapt {
            checkpoint,
            stream,
            out,
            opts,
        } => {
            opts.apply(&mut cfg)?;
            cfg.validate()?;
            adapt(&mut cfg, opts.heads.is_some(), &checkpoint, &stream, &out)
        }
        Command::Sweep {
            kind,
            checkpoint,
            data,
            stream,
            out,
            opts,
        } => {
            opts.apply(&mut cfg)?;
            cfg.validate()?;
            let kind = SweepKind::parse(&kind)?;
            let stream = match (stream, &data) {
                (Some(s), _) => s,
                (None, Some(d)) => d.join(Split::TargetStream.name()),
                (None, None) => bail!("--stream or --data is required"),
            };
            sweep(&cfg, kind, checkpoint.as_deref(), data.as_deref(), &stream, &out)
        }
        Command::Report { runs, overlay } => report_cmd(&runs, overlay.as_deref()),
    }
}

/// Writes the resolved config and an incomplete manifest before any work.
fn start(cfg: &RunConfig, out: &Path, command: &str) -> Result<RunManifest> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    cfg.write_resolved(out)?;
    let m = RunManifest::new(command, cfg.seed);
    m.write(out)?;
    Ok(m)
}

fn finish(mut m: RunManifest, out: &Path, mut files: Vec<String>) -> Result<()> {
    files.push(segadapt::config::RESOLVED_CONFIG.into());
    files.sort();
    m.files = files;
    m.complete = true;
    m.write(out)?;
    Ok(())
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let m = start(cfg, out, "gen-data")?;
    let mut files = Vec::new();
    for split in Split::ALL {
        let (domain, n) = cfg.data.split(split);
        let dir = out.join(split.name());
        generate_split(domain, n, split.seed(cfg.seed), &dir)?;
        info!(split = split.name(), n, dir = %dir.display(), "split written");
        files.push(split.name().to_string());
    }
    finish(m, out, files)
}

#[derive(Serialize)]
struct PretrainSummary {
    steps: usize,
    final_loss: Option<f64>,
    source_val_miou: f64,
    checkpoint_hash: String,
    wall_clock_secs: f64,
}

fn pretrain(cfg: &RunConfig, data: &Path, out: &Path, from: Option<&Path>, stop_after: Option<usize>) -> Result<()> {
    let train = Dataset::load(&data.join(Split::SourceTrain.name()))?;
    let val = Dataset::load(&data.join(Split::SourceVal.name()))?;
    let (domain, _) = cfg.data.split(Split::SourceTrain);
    if train.manifest.config_hash != domain.hash() {
        warn!("source split was generated with a different domain configuration");
    }
    let mut m = start(cfg, out, "pretrain")?;
    let started = Instant::now();
    let seeds = Seeds::new(cfg.seed);
    let loss_path = out.join(report::LOSS_CSV);
    let (mut trainer, mut rows) = match from {
        Some(p) => {
            let c = Container::load(p)?;
            let t = Trainer::resume(&c, cfg.pretrain.clone(), seeds)?;
            let mut rows: Vec<LossRow> = if loss_path.is_file() {
                report::read_loss_csv(&loss_path)?
            } else {
                Vec::new()
            };
            rows.retain(|r| r.step < t.step);
            info!(step = t.step, "resuming pretraining");
            (t, rows)
        }
        None => {
            let net = Network::new(cfg.pretrain.model(&cfg.model), &seeds)?;
            (Trainer::new(net, cfg.pretrain.clone(), seeds)?, Vec::new())
        }
    };
    let per_epoch = train.len().div_ceil(cfg.pretrain.batch_size);
    let total = trainer.total_steps(train.len());
    let ckpt = out.join(CHECKPOINT);
    while trainer.step < total {
        let stop = (trainer.step / per_epoch + 1) * per_epoch;
        let new = trainer
            .run_until(&train.scenes, stop, &mut |_| {})
            .context("pretraining aborted")?;
        rows.extend(new);
        trainer.checkpoint()?.save(&ckpt)?;
        report::write_loss_csv(&loss_path, &rows)?;
        info!(epoch = trainer.step / per_epoch, "epoch checkpoint written");
        if stop_after.is_some_and(|e| trainer.step < total && trainer.step >= e * per_epoch) {
            info!(step = trainer.step, "stopping early; resume with --from");
            return Ok(());
        }
    }
    if !ckpt.is_file() {
        trainer.checkpoint()?.save(&ckpt)?;
        report::write_loss_csv(&loss_path, &rows)?;
    }
    let head = if trainer.net.has_transformer() { Head::Sup } else { Head::Unsup };
    let val_miou = evaluate(&trainer.net, &val.scenes, head)?.miou()?;
    info!(source_val_miou = val_miou, "pretraining done");
    let hash = trainer.net.content_hash()?;
    report::write_json(
        &out.join(SUMMARY),
        &PretrainSummary {
            steps: trainer.step,
            final_loss: rows.last().map(|r| r.loss),
            source_val_miou: val_miou,
            checkpoint_hash: hash.clone(),
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
    )?;
    m.checkpoint_hash = Some(hash);
    finish(m, out, vec![CHECKPOINT.into(), report::LOSS_CSV.into(), SUMMARY.into()])
}

#[derive(Serialize)]
struct AdaptSummary {
    run_id: String,
    final_miou: f64,
    skipped_updates: usize,
    wall_clock_secs: f64,
}

fn adapt(cfg: &mut RunConfig, heads_given: bool, checkpoint: &Path, stream: &Path, out: &Path) -> Result<()> {
    let net = Network::load(checkpoint)?;
    // a single-head checkpoint can only run UU; an explicit --heads is left to fail
    if !net.has_transformer() && !heads_given && !cfg.adapt.heads.single_head() {
        info!("checkpoint has no transfer head; adapting with UU");
        cfg.adapt.heads = HeadConfig::ALL[0];
    }
    let cfg = &*cfg;
    let stream = Dataset::load(stream)?;
    let mut m = start(cfg, out, "adapt")?;
    let a = &cfg.adapt;
    let run_id = format!("{}-{}-K{}-seed{}", a.method.name(), a.heads, a.k, cfg.seed);
    let r = adapt_stream(&net, &stream.scenes, a, cfg.seed, &run_id)?;
    info!(run = %run_id, final_miou = r.final_miou, "adaptation done");
    let mut files = report::emit_adapt_report(&r, out)?;
    report::write_json(
        &out.join(SUMMARY),
        &AdaptSummary {
            run_id,
            final_miou: r.final_miou,
            skipped_updates: r.trace.iter().filter(|t| t.skipped).count(),
            wall_clock_secs: r.wall_clock_secs,
        },
    )?;
    files.push(SUMMARY.into());
    m.checkpoint_hash = Some(r.checkpoint_hash);
    finish(m, out, files)
}

fn sweep(
    cfg: &RunConfig,
    kind: SweepKind,
    checkpoint: Option<&Path>,
    data: Option<&Path>,
    stream: &Path,
    out: &Path,
) -> Result<()> {
    let stream = Dataset::load(stream)?;
    let table = if kind.needs_pretraining() {
        let data = data.with_context(|| format!("--data is required for the {kind} sweep"))?;
        let source = Dataset::load(&data.join(Split::SourceTrain.name()))?;
        let m = start(cfg, out, &format!("sweep {kind}"))?;
        let t = pretrain_sweep(kind, cfg, &source.scenes, &stream.scenes)?;
        (m, t)
    } else {
        let ckpt = checkpoint.with_context(|| format!("--checkpoint is required for the {kind} sweep"))?;
        let net = Network::load(ckpt)?;
        let mut m = start(cfg, out, &format!("sweep {kind}"))?;
        m.checkpoint_hash = Some(net.content_hash()?);
        let t = adaptation_sweep(kind, &net, &stream.scenes, &cfg.adapt, &cfg.sweep)?;
        (m, t)
    };
    let (m, table) = table;
    for r in &table.rows {
        info!(row = %r.row, col = %r.col, mean = r.mean, "sweep result");
    }
    let files = report::emit_sweep(&table, out)?;
    finish(m, out, files)
}

fn report_cmd(runs: &[PathBuf], overlay: Option<&Path>) -> Result<()> {
    for dir in runs {
        let files = report::regenerate(dir).with_context(|| format!("regenerating {}", dir.display()))?;
        info!(dir = %dir.display(), files = files.len(), "report regenerated");
    }
    if let Some(path) = overlay {
        report::write_overlay(runs, path)?;
        info!(path = %path.display(), "overlay written");
    }
    Ok(())
}
