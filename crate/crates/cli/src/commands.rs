//! Subcommand implementations.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde_json::json;

use dm_core::data::io::{load_dataset, save_dataset};
use dm_core::data::stats::dataset_stats;
use dm_core::data::synth::{generate as synth_generate, SynthConfig};
use dm_core::data::{Dataset, VideoRecord};
use dm_core::error::{DmError, Result};
use dm_core::eval::sliding::{sliding_window_baseline, SlidingWinConfig};
use dm_core::eval::evaluate;
use dm_core::matching::{embed_sfx_index, infer_with_index, write_predictions, read_predictions, Prediction};
use dm_core::model::{DmModel, ModalityMask, ModelConfig};
use dm_core::train::negatives::NegSampling;
use dm_core::train::{run_pretrain, run_train, TrainConfig};
use dm_core::gradcheck as gc;

fn parse_pair(s: &str) -> std::result::Result<(u32, u32), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected LO,HI but got {s}"));
    }
    let lo = parts[0].trim().parse().map_err(|e| format!("{e}"))?;
    let hi = parts[1].trim().parse().map_err(|e| format!("{e}"))?;
    Ok((lo, hi))
}

fn parse_f64_list(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{e}")))
        .collect()
}

fn parse_u32_list(s: &str) -> std::result::Result<Vec<u32>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<u32>().map_err(|e| format!("{e}")))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MaskKind {
    Subtitles,
    Frames,
    Audio,
    Description,
    Tag,
}

fn mask_from(kinds: &[MaskKind]) -> ModalityMask {
    let mut m = ModalityMask::default();
    for k in kinds {
        match k {
            MaskKind::Subtitles => m.subtitles = true,
            MaskKind::Frames => m.frames = true,
            MaskKind::Audio => m.audio = true,
            MaskKind::Description => m.description = true,
            MaskKind::Tag => m.tag = true,
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplingArg {
    Tans,
    Uniform,
    Hard,
    OneSide,
}

impl From<SamplingArg> for NegSampling {
    fn from(v: SamplingArg) -> Self {
        match v {
            SamplingArg::Tans => NegSampling::Tans,
            SamplingArg::Uniform => NegSampling::Uniform,
            SamplingArg::Hard => NegSampling::Hard,
            SamplingArg::OneSide => NegSampling::OneSide,
        }
    }
}

fn echo_config(out_dir: Option<&Path>, value: &serde_json::Value) -> Result<()> {
    let rendered = serde_json::to_string_pretty(value)?;
    println!("{rendered}");
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("run_config.json"), rendered)?;
    }
    Ok(())
}

fn require_exists(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(DmError::Config(format!("{what} not found: {}", path.display())));
    }
    Ok(())
}

// ---------------------------------------------------------------- generate

#[derive(Args)]
pub struct GenerateArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    videos: usize,
    #[arg(long, default_value_t = 32)]
    sfx: usize,
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Frames per video as LO,HI.
    #[arg(long, value_parser = parse_pair, default_value = "20,60")]
    frames: (u32, u32),
    /// Moments per video as LO,HI.
    #[arg(long, value_parser = parse_pair, default_value = "1,4")]
    moments: (u32, u32),
    /// Moment length in frames as LO,HI.
    #[arg(long, value_parser = parse_pair, default_value = "2,6")]
    moment_len: (u32, u32),
    #[arg(long, default_value_t = 512)]
    dv: usize,
    #[arg(long, default_value_t = 512)]
    dt: usize,
    #[arg(long, default_value_t = 768)]
    da: usize,
}

pub fn generate(args: GenerateArgs) -> Result<()> {
    let cfg = SynthConfig {
        num_videos: args.videos,
        sfx_count: args.sfx,
        sigma: args.sigma,
        alpha: args.alpha,
        frames: args.frames,
        moments_per_video: args.moments,
        moment_len: args.moment_len,
        d_v: args.dv,
        d_t: args.dt,
        d_a: args.da,
        ..SynthConfig::default()
    };
    echo_config(
        Some(&args.out),
        &json!({"command": "generate", "seed": args.seed, "synth": cfg}),
    )?;
    let dataset = synth_generate(&cfg, args.seed)?;
    let manifest = save_dataset(&dataset, &args.out)?;
    println!("wrote {}", manifest.display());
    Ok(())
}

// ------------------------------------------------------------- model flags

#[derive(Args)]
pub struct ModelFlags {
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
    #[arg(long, default_value_t = 2)]
    enc_layers: usize,
    #[arg(long, default_value_t = 2)]
    dec_layers: usize,
    #[arg(long, default_value_t = 10)]
    queries: usize,
    #[arg(long, default_value_t = 64)]
    max_frames: usize,
    #[arg(long, default_value_t = 40)]
    max_subtitles: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
}

impl ModelFlags {
    fn build(&self, ds: &Dataset) -> ModelConfig {
        ModelConfig {
            d_v: ds.d_v,
            d_t: ds.d_t,
            d_a: ds.d_a,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            n_queries: self.queries,
            max_frames: self.max_frames,
            max_subtitles: self.max_subtitles,
            dropout: self.dropout,
            seed: self.model_seed,
            ..ModelConfig::default()
        }
    }
}

#[derive(Args)]
pub struct TrainFlags {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.07)]
    tau: f64,
    #[arg(long, default_value_t = 0.1)]
    tau_s: f64,
    #[arg(long, default_value_t = 15)]
    negatives: usize,
    #[arg(long, value_enum, default_value_t = SamplingArg::Tans)]
    neg_sampling: SamplingArg,
    /// Zero out input modalities (repeatable).
    #[arg(long, value_enum)]
    mask: Vec<MaskKind>,
}

impl TrainFlags {
    fn build(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            tau: self.tau,
            tau_s: self.tau_s,
            negatives: self.negatives,
            neg_sampling: self.neg_sampling.into(),
            mask: mask_from(&self.mask),
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

// ------------------------------------------------------------------ pretrain

#[derive(Args)]
pub struct PretrainArgs {
    /// Dataset manifest path.
    #[arg(long)]
    data: PathBuf,
    /// Output directory (checkpoint + training log).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    /// Moment-SFX pairs per step.
    #[arg(long, default_value_t = 512)]
    batch_pairs: usize,
    /// Continue from an existing checkpoint instead of a fresh model.
    #[arg(long)]
    init_ckpt: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

pub fn pretrain(args: PretrainArgs) -> Result<()> {
    require_exists(&args.data, "dataset manifest")?;
    let dataset = load_dataset(&args.data)?;
    let mut model = match &args.init_ckpt {
        Some(p) => DmModel::load(p)?,
        None => DmModel::new(args.model.build(&dataset)),
    };
    let mut cfg = args.train.build();
    cfg.pretrain_steps = args.steps;
    cfg.batch_size_pretrain = args.batch_pairs;
    echo_config(
        Some(&args.out),
        &json!({
            "command": "pretrain",
            "data": args.data,
            "model": model.cfg,
            "train": cfg,
        }),
    )?;
    let log = run_pretrain(&mut model, &dataset, &cfg)?;
    std::fs::write(args.out.join("pretrain_log.csv"), log.to_csv())?;
    let ckpt = args.out.join("pretrained.dmck");
    model.save(&ckpt)?;
    println!(
        "pretrain done: loss {:.4} -> {:.4}; wrote {}",
        log.rows.first().map(|r| r.total).unwrap_or(0.0),
        log.last_total().unwrap_or(0.0),
        ckpt.display()
    );
    Ok(())
}

// --------------------------------------------------------------------- train

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    /// Videos per step.
    #[arg(long, default_value_t = 256)]
    batch_videos: usize,
    /// Start from a pre-trained checkpoint.
    #[arg(long, conflicts_with = "no_pretrain")]
    init_ckpt: Option<PathBuf>,
    /// Train from scratch (no pre-trained initialization).
    #[arg(long)]
    no_pretrain: bool,
    /// Keep the matching loss as an auxiliary task while training.
    #[arg(long)]
    msm_aux: bool,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

pub fn train(args: TrainArgs) -> Result<()> {
    require_exists(&args.data, "dataset manifest")?;
    if args.init_ckpt.is_none() && !args.no_pretrain {
        return Err(DmError::Config(
            "pass --init-ckpt <pretrained.dmck> or opt out explicitly with --no-pretrain".into(),
        ));
    }
    let dataset = load_dataset(&args.data)?;
    let mut model = match &args.init_ckpt {
        Some(p) => DmModel::load(p)?,
        None => DmModel::new(args.model.build(&dataset)),
    };
    let mut cfg = args.train.build();
    cfg.train_steps = args.steps;
    cfg.batch_size_train = args.batch_videos;
    cfg.msm_aux = args.msm_aux;
    echo_config(
        Some(&args.out),
        &json!({
            "command": "train",
            "data": args.data,
            "init_ckpt": args.init_ckpt,
            "model": model.cfg,
            "train": cfg,
        }),
    )?;
    let log = run_train(&mut model, &dataset, &cfg)?;
    std::fs::write(args.out.join("train_log.csv"), log.to_csv())?;
    let ckpt = args.out.join("model.dmck");
    model.save(&ckpt)?;
    println!(
        "train done: loss {:.4} -> {:.4}; wrote {}",
        log.rows.first().map(|r| r.total).unwrap_or(0.0),
        log.last_total().unwrap_or(0.0),
        ckpt.display()
    );
    Ok(())
}

// --------------------------------------------------------------------- infer

#[derive(Args)]
pub struct InferArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Output predictions file (JSONL).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "testing")]
    split: String,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

/// Run a per-video job over worker threads, keeping video order.
fn par_over_videos<F>(videos: &[&VideoRecord], threads: usize, job: F) -> Result<Vec<Prediction>>
where
    F: Fn(&VideoRecord) -> Result<Vec<Prediction>> + Sync,
{
    let threads = threads.max(1).min(videos.len().max(1));
    if threads <= 1 {
        let mut out = Vec::new();
        for v in videos {
            out.extend(job(v)?);
        }
        return Ok(out);
    }
    let results: Vec<std::sync::Mutex<Option<Result<Vec<Prediction>>>>> =
        (0..videos.len()).map(|_| std::sync::Mutex::new(None)).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= videos.len() {
                    break;
                }
                *results[i].lock().unwrap() = Some(job(videos[i]));
            });
        }
    });
    let mut out = Vec::new();
    for cell in results {
        out.extend(cell.into_inner().unwrap().expect("worker finished")?);
    }
    Ok(out)
}

pub fn infer(args: InferArgs) -> Result<()> {
    require_exists(&args.data, "dataset manifest")?;
    require_exists(&args.ckpt, "checkpoint")?;
    let dataset = load_dataset(&args.data)?;
    let model = DmModel::load(&args.ckpt)?;
    echo_config(
        None,
        &json!({
            "command": "infer",
            "data": args.data,
            "ckpt": args.ckpt,
            "split": args.split,
            "threads": args.threads,
            "model": model.cfg,
        }),
    )?;
    let videos = dataset.split_videos(&args.split)?;
    let index = embed_sfx_index(&model, &dataset.sfx, ModalityMask::default())?;
    let started = std::time::Instant::now();
    let preds = par_over_videos(&videos, args.threads, |v| {
        infer_with_index(&model, v, &index, ModalityMask::default())
    })?;
    let secs = started.elapsed().as_secs_f64();
    write_predictions(&args.out, &preds)?;
    println!(
        "wrote {} predictions for {} videos to {} ({:.1} videos/s)",
        preds.len(),
        videos.len(),
        args.out.display(),
        videos.len() as f64 / secs.max(1e-9),
    );
    Ok(())
}

// ---------------------------------------------------------------------- eval

#[derive(Args)]
pub struct EvalArgs {
    /// Predictions JSONL produced by `infer` or `baseline`.
    #[arg(long)]
    preds: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "testing")]
    split: String,
    /// IoU thresholds, comma separated.
    #[arg(long, value_parser = parse_f64_list, default_value = "0.5,0.75")]
    iou: Vec<f64>,
    /// Optional JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    require_exists(&args.preds, "predictions file")?;
    require_exists(&args.data, "dataset manifest")?;
    let dataset = load_dataset(&args.data)?;
    let preds = read_predictions(&args.preds)?;
    let videos = dataset.split_videos(&args.split)?;
    echo_config(
        None,
        &json!({
            "command": "eval",
            "preds": args.preds,
            "data": args.data,
            "split": args.split,
            "iou": args.iou,
            "threads": args.threads,
        }),
    )?;
    let report = evaluate(&preds, &videos, &args.iou)?;
    print!("{}", report.to_table("predictions"));
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_vec_pretty(&report)?)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

// ------------------------------------------------------------------ baseline

#[derive(Args)]
pub struct BaselineArgs {
    #[arg(long)]
    data: PathBuf,
    /// Pre-trained matching checkpoint (decoder unused).
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "testing")]
    split: String,
    /// Window lengths in frames.
    #[arg(long, value_parser = parse_u32_list, default_value = "2,3,4,5,6")]
    scales: Vec<u32>,
    #[arg(long, default_value_t = 1)]
    stride: u32,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

pub fn baseline(args: BaselineArgs) -> Result<()> {
    require_exists(&args.data, "dataset manifest")?;
    require_exists(&args.ckpt, "checkpoint")?;
    let dataset = load_dataset(&args.data)?;
    let model = DmModel::load(&args.ckpt)?;
    let cfg = SlidingWinConfig { scales: args.scales.clone(), stride: args.stride };
    echo_config(
        None,
        &json!({
            "command": "baseline",
            "data": args.data,
            "ckpt": args.ckpt,
            "split": args.split,
            "scales": args.scales,
            "stride": args.stride,
            "threads": args.threads,
        }),
    )?;
    let videos = dataset.split_videos(&args.split)?;
    let index = embed_sfx_index(&model, &dataset.sfx, ModalityMask::default())?;
    let preds = par_over_videos(&videos, args.threads, |v| {
        sliding_window_baseline(&model, v, &index, &cfg)
    })?;
    write_predictions(&args.out, &preds)?;
    println!("wrote {} baseline predictions to {}", preds.len(), args.out.display());
    Ok(())
}

// --------------------------------------------------------------------- stats

#[derive(Args)]
pub struct StatsArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the report, CSV and SVG charts.
    #[arg(long)]
    out: PathBuf,
}

pub fn stats(args: StatsArgs) -> Result<()> {
    require_exists(&args.data, "dataset manifest")?;
    let dataset = load_dataset(&args.data)?;
    echo_config(Some(&args.out), &json!({"command": "stats", "data": args.data}))?;
    let report = dataset_stats(&dataset);
    std::fs::write(args.out.join("stats.json"), serde_json::to_vec_pretty(&report)?)?;
    std::fs::write(args.out.join("stats.csv"), report.to_csv())?;
    std::fs::write(args.out.join("duration_hist.svg"), report.duration_svg())?;
    std::fs::write(args.out.join("center_hist.svg"), report.center_svg())?;
    println!(
        "{} videos, {} moments, {:.2} sfx/video; wrote stats to {}",
        report.num_videos,
        report.num_moments,
        report.sfx_per_video_mean,
        args.out.display()
    );
    Ok(())
}

// ----------------------------------------------------------------- gradcheck

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn gradcheck(args: GradcheckArgs) -> Result<()> {
    echo_config(
        None,
        &json!({"command": "gradcheck", "instances": args.instances, "seed": args.seed}),
    )?;
    let reports = gc::run_all(args.instances, args.seed);
    let mut worst_name = String::new();
    let mut worst = 0.0f64;
    for r in &reports {
        println!(
            "{:<22} max rel err {:.3e}  ({} instances)  {}",
            r.name,
            r.max_rel_err,
            r.instances,
            if r.passed() { "ok" } else { "FAIL" }
        );
        if r.max_rel_err > worst {
            worst = r.max_rel_err;
            worst_name = r.name.clone();
        }
    }
    if worst >= gc::THRESHOLD {
        return Err(DmError::NonFinite(format!(
            "gradient check failed: {worst_name} at {worst:.3e}"
        )));
    }
    println!("all gradient checks passed (worst {worst:.3e} in {worst_name})");
    Ok(())
}
