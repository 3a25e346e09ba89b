//! `dgn` — command-line harness for the depth-guided restoration network.
//!
//! Subcommands: `curate` (dataset dedup/filter/tiling), `degrade` (synthesize
//! LQ inputs and optional depth sidecars), `train`, `eval`, `infer`. All
//! numeric work runs in f32; every random decision derives from `--seed`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::Array3;
use serde::Deserialize;

use dgn_core::data::{
    self, awgn, bicubic_resize, curate, degrade_sr, entry, ingest_depth, load_image_tensor,
    mean_brightness, phash_gray, save_image_tensor, synth_depth_field, write_depth_sidecar,
    DepthSource, SamplePair, TrainImage, DEFAULT_BRIGHTNESS_THRESHOLD, DEFAULT_DEDUP_DELTA,
};
use dgn_core::eval::{center_crop_to_multiple, evaluate, infer, EvalItem, EvalOpts};
use dgn_core::net::{DgnConfig, Task};
use dgn_core::rng::{derive_seed, rng_from_seed};
use dgn_core::train::{load_checkpoint, train, AdamCfg, TrainOpts};

#[derive(Parser)]
#[command(name = "dgn", about = "Depth-guided image restoration toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Hash, dedup, brightness-filter and tile a directory of images.
    Curate(CurateArgs),
    /// Synthesize degraded inputs (and optional synthetic depth sidecars).
    Degrade(DegradeArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint against a directory of HQ images.
    Eval(EvalArgs),
    /// Restore a single image with a trained checkpoint.
    Infer(InferArgs),
}

#[derive(Args)]
struct CurateArgs {
    #[arg(long)]
    input_dir: PathBuf,
    /// CSV mapping `image_id,category`; unlisted images fall into `default`.
    #[arg(long)]
    categories_file: Option<PathBuf>,
    /// Hamming-distance threshold: strictly closer pairs are duplicates.
    #[arg(long, default_value_t = DEFAULT_DEDUP_DELTA)]
    delta: u32,
    #[arg(long, default_value_t = DEFAULT_BRIGHTNESS_THRESHOLD)]
    brightness_threshold: f64,
    /// Normalize brightness before hashing.
    #[arg(long)]
    normalize_brightness: bool,
    /// Patch size as WxH.
    #[arg(long, default_value = "1535x1151")]
    patch_size: String,
    #[arg(long)]
    manifest_out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DegradeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Also write synthetic `.lqdepth` / `.hqdepth` sidecars.
    #[arg(long)]
    synthetic_depth: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of HQ images (ids = file stems); depth sidecars may sit
    /// next to them.
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Use deterministic synthetic depth instead of sidecar files.
    #[arg(long)]
    synthetic_depth: bool,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override [train].total_iters.
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    eval_dir: PathBuf,
    /// Noise sigma (0-255) for denoising checkpoints.
    #[arg(long, default_value_t = 25.0)]
    sigma: f64,
    #[arg(long)]
    synthetic_depth: bool,
    #[arg(long)]
    report_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Explicit depth sidecar; defaults to `<image>.lqdepth` next to it.
    #[arg(long)]
    depth: Option<PathBuf>,
    /// Fall back to synthetic depth when no sidecar exists.
    #[arg(long)]
    synthetic_depth: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// On-disk config: `[model]` is the architecture, `[train]` the loop.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    model: Option<DgnConfig>,
    #[serde(default)]
    train: TrainSection,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainSection {
    total_iters: usize,
    batch_size: usize,
    patch_size: usize,
    base_lr: f64,
    lr_factor: f64,
    milestones: Option<Vec<usize>>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    augment: bool,
    log_every: usize,
    checkpoint_every: usize,
    sigma: f64,
    seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            total_iters: 300,
            batch_size: 2,
            patch_size: 64,
            base_lr: 3e-4,
            lr_factor: 0.5,
            milestones: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            augment: true,
            log_every: 1,
            checkpoint_every: 100,
            sigma: 25.0,
            seed: 0,
        }
    }
}

fn load_file_config(path: Option<&Path>) -> Result<(DgnConfig, TrainSection)> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            let fc: FileConfig =
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
            Ok((fc.model.unwrap_or_default(), fc.train))
        }
        None => Ok((DgnConfig::default(), TrainSection::default())),
    }
}

fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|s| s.to_str())
            .map(|s| s.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            out.push((id, path));
        }
    }
    out.sort();
    Ok(out)
}

fn parse_patch_size(s: &str) -> Result<(usize, usize)> {
    let (w, h) = s
        .split_once('x')
        .with_context(|| format!("patch size `{s}` must be WxH"))?;
    Ok((w.parse()?, h.parse()?))
}

fn run_curate(args: CurateArgs) -> Result<()> {
    let (patch_w, patch_h) = parse_patch_size(&args.patch_size)?;
    let mut categories: BTreeMap<String, String> = BTreeMap::new();
    if let Some(path) = &args.categories_file {
        for (ln, line) in std::fs::read_to_string(path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (id, cat) = line
                .split_once(',')
                .with_context(|| format!("categories line {}: expected `id,category`", ln + 1))?;
            categories.insert(id.trim().to_string(), cat.trim().to_string());
        }
    }
    let images = list_images(&args.input_dir)?;
    if images.is_empty() {
        bail!("no images found under {}", args.input_dir.display());
    }
    let mut entries = Vec::with_capacity(images.len());
    for (id, path) in &images {
        let gray = data::load_gray(path)?;
        let hash = phash_gray(gray.view(), args.normalize_brightness)?;
        let brightness = mean_brightness(gray.view());
        let (h, w) = gray.dim();
        let category = categories.get(id).cloned().unwrap_or_else(|| "default".into());
        entries.push(entry(id, &category, hash, brightness, w, h));
    }
    let manifest = curate(
        &entries,
        args.delta,
        args.brightness_threshold,
        patch_w,
        patch_h,
    )?;
    std::fs::write(&args.manifest_out, manifest.to_text())?;
    let kept = manifest.kept().count();
    let total = manifest.entries.len();
    let patches: usize = manifest.kept().map(|e| e.patches.len()).sum();
    println!(
        "curated {total} images: kept {kept}, dropped {}, {patches} patches -> {}",
        total - kept,
        args.manifest_out.display()
    );
    Ok(())
}

fn run_degrade(args: DegradeArgs) -> Result<()> {
    let (cfg, train_sec) = load_file_config(args.config.as_deref())?;
    cfg.validate()?;
    std::fs::create_dir_all(&args.out_dir)?;
    let images = list_images(&args.input_dir)?;
    if images.is_empty() {
        bail!("no images found under {}", args.input_dir.display());
    }
    for (id, path) in &images {
        let hq: Array3<f32> = load_image_tensor(path)?;
        let hq = center_crop_to_multiple(&hq, cfg.scale);
        let (_, h, w) = hq.dim();
        let (lh, lw) = (h / cfg.scale, w / cfg.scale);
        let lq = match cfg.task {
            Task::Sr => {
                bicubic_resize(&hq, lh, lw).mapv(|v| v.clamp(0.0, 1.0))
            }
            Task::Denoise => {
                let mut rng = rng_from_seed(derive_seed(args.seed, id));
                awgn(&hq, train_sec.sigma, &mut rng)?
            }
        };
        save_image_tensor(&args.out_dir.join(format!("{id}.lq.png")), &lq)?;
        if args.synthetic_depth {
            for (suffix, (dh, dw)) in [("lqdepth", (lh, lw)), ("hqdepth", (h, w))] {
                let field = synth_depth_field(args.seed, id, dh, dw);
                let (lo, hi) = field.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| {
                    (l.min(v), h.max(v))
                });
                let span = (hi - lo).max(1e-12);
                let quant = field.mapv(|v| (65535.0 * (v - lo) / span).round() as u16);
                write_depth_sidecar(&args.out_dir.join(format!("{id}.{suffix}")), &quant)?;
            }
        }
        println!("degraded {id}: {h}x{w} -> {lh}x{lw}");
    }
    Ok(())
}

fn build_dataset(
    dir: &Path,
    cfg: &DgnConfig,
    sigma: f64,
    seed: u64,
    synthetic_depth: bool,
) -> Result<Vec<TrainImage<f32>>> {
    let images = list_images(dir)?;
    if images.is_empty() {
        bail!("no images found under {}", dir.display());
    }
    let depth_source = if synthetic_depth {
        DepthSource::Synthetic {
            seed: derive_seed(seed, "depth"),
        }
    } else {
        DepthSource::Sidecar {
            dir: dir.to_path_buf(),
        }
    };
    let mut out = Vec::with_capacity(images.len());
    for (id, path) in &images {
        let hq: Array3<f32> = load_image_tensor(path)?;
        let hq = center_crop_to_multiple(&hq, cfg.scale);
        let (_, h, w) = hq.dim();
        let (lh, lw) = (h / cfg.scale, w / cfg.scale);
        let (lq_depth, hq_depth) = ingest_depth::<f32>(id, (lh, lw), (h, w), &depth_source)?;
        let pair: SamplePair<f32> = match cfg.task {
            Task::Sr => degrade_sr(&hq, hq_depth, lq_depth, cfg.scale)?,
            Task::Denoise => {
                let mut rng = rng_from_seed(derive_seed(seed, &format!("noise/{id}")));
                dgn_core::data::degrade_noise(&hq, hq_depth, lq_depth, sigma, &mut rng)?
            }
        };
        out.push(TrainImage {
            id: id.clone(),
            pair,
        });
    }
    Ok(out)
}

fn run_train(args: TrainArgs) -> Result<()> {
    let (cfg, train_sec) = load_file_config(args.config.as_deref())?;
    cfg.validate()?;
    let seed = args.seed.unwrap_or(train_sec.seed);
    let dataset = build_dataset(
        &args.data_dir,
        &cfg,
        train_sec.sigma,
        seed,
        args.synthetic_depth,
    )?;
    let opts = TrainOpts {
        total_iters: args.iters.unwrap_or(train_sec.total_iters),
        batch_size: train_sec.batch_size,
        patch_size: train_sec.patch_size,
        base_lr: train_sec.base_lr,
        milestones: train_sec.milestones.clone(),
        lr_factor: train_sec.lr_factor,
        adam: AdamCfg {
            beta1: train_sec.beta1,
            beta2: train_sec.beta2,
            eps: train_sec.eps,
        },
        seed,
        augment: train_sec.augment,
        log_every: train_sec.log_every,
        checkpoint_every: train_sec.checkpoint_every,
        out_dir: args.out_dir.clone(),
        resume: args.resume.clone(),
    };
    let outcome = train(&cfg, &dataset, &opts)?;
    let last = outcome.reports.last().expect("at least one iteration");
    println!(
        "trained {} iterations on {} images; final total loss {}; checkpoint {}",
        outcome.state.iteration,
        dataset.len(),
        last.total,
        outcome.checkpoint_path.display()
    );
    println!("loss log: {}", outcome.log_path.display());
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let (state, cfg) = load_checkpoint::<f32>(&args.checkpoint)?;
    let images = list_images(&args.eval_dir)?;
    if images.is_empty() {
        bail!("no images found under {}", args.eval_dir.display());
    }
    let items: Vec<EvalItem<f32>> = images
        .iter()
        .map(|(id, path)| {
            Ok(EvalItem {
                id: id.clone(),
                hq: load_image_tensor(path)?,
            })
        })
        .collect::<Result<_>>()?;
    let depth = if args.synthetic_depth {
        DepthSource::Synthetic {
            seed: derive_seed(args.seed, "depth"),
        }
    } else {
        DepthSource::Sidecar {
            dir: args.eval_dir.clone(),
        }
    };
    let report = evaluate(
        &state.params,
        &cfg,
        &items,
        &EvalOpts {
            sigma: args.sigma,
            seed: args.seed,
            depth,
        },
    )?;
    let text = report.to_text();
    print!("{text}");
    if let Some(path) = &args.report_out {
        std::fs::write(path, &text)?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

fn run_infer(args: InferArgs) -> Result<()> {
    let (state, cfg) = load_checkpoint::<f32>(&args.checkpoint)?;
    let synth = args
        .synthetic_depth
        .then(|| derive_seed(args.seed, "depth"));
    let info = infer(
        &state.params,
        &cfg,
        &args.image,
        args.depth.as_deref(),
        synth,
        &args.out,
    )?;
    println!(
        "restored {} -> {} ({}x{}) in {:.1} ms",
        args.image.display(),
        info.out_path.display(),
        info.width,
        info.height,
        info.elapsed_ms
    );
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Curate(args) => run_curate(args),
        Command::Degrade(args) => run_degrade(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Infer(args) => run_infer(args),
    }
}
