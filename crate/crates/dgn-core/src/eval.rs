//! Evaluation and single-image inference.
//!
//! Evaluation degrades each high-quality image per the task (bicubic x4 for
//! super-resolution, seeded sigma-25 noise for denoising), runs the model
//! and reports PSNR/SSIM per image plus a no-model baseline row (bicubic
//! upsampling of the degraded input, or the noisy input itself at scale 1).
//! Images are center-cropped to dims divisible by the scale first.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array3, Array4, ArrayD, Axis};

use crate::data::{
    awgn, bicubic_resize, ingest_depth, load_image_tensor, save_image_tensor, DepthSource,
};
use crate::graph::Graph;
use crate::metrics::{format_metric_row, psnr, ssim};
use crate::net::{dgn_forward, DgnConfig, Params, Task};
use crate::rng::{derive_seed, rng_from_seed};
use crate::{invalid_arg, invalid_config, Result, Scalar};

/// One evaluation input: a high-quality image with an id (for depth lookup
/// and reporting).
#[derive(Clone, Debug)]
pub struct EvalItem<F: Scalar> {
    pub id: String,
    pub hq: Array3<F>,
}

#[derive(Clone, Debug)]
pub struct EvalOpts {
    /// Noise sigma (0-255 scale) for the denoising task.
    pub sigma: f64,
    pub seed: u64,
    pub depth: DepthSource,
}

#[derive(Clone, Debug)]
pub struct EvalRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub baseline_rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub baseline_mean_psnr: f64,
    pub baseline_mean_ssim: f64,
}

impl EvalReport {
    /// Line-oriented text: one `id,psnr,ssim` record per image, the matching
    /// `id#bicubic` baseline record, then `mean` / `mean#bicubic`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (row, base) in self.rows.iter().zip(self.baseline_rows.iter()) {
            out.push_str(&format_metric_row(&row.id, row.psnr, row.ssim));
            out.push('\n');
            out.push_str(&format_metric_row(
                &format!("{}#bicubic", base.id),
                base.psnr,
                base.ssim,
            ));
            out.push('\n');
        }
        out.push_str(&format_metric_row("mean", self.mean_psnr, self.mean_ssim));
        out.push('\n');
        out.push_str(&format_metric_row(
            "mean#bicubic",
            self.baseline_mean_psnr,
            self.baseline_mean_ssim,
        ));
        out.push('\n');
        out
    }
}

/// Center-crop a `[3,H,W]` tensor so both spatial dims divide `s`.
pub fn center_crop_to_multiple<F: Scalar>(img: &Array3<F>, s: usize) -> Array3<F> {
    let (c, h, w) = img.dim();
    let (th, tw) = (h - h % s, w - w % s);
    if (th, tw) == (h, w) {
        return img.clone();
    }
    let (y0, x0) = ((h - th) / 2, (w - tw) / 2);
    let mut out = Array3::<F>::zeros((c, th, tw));
    for ch in 0..c {
        for y in 0..th {
            for x in 0..tw {
                out[[ch, y, x]] = img[[ch, y0 + y, x0 + x]];
            }
        }
    }
    out
}

fn to_batch1<F: Scalar>(img: &Array3<F>) -> ArrayD<F> {
    let (c, h, w) = img.dim();
    let mut out = Array4::<F>::zeros((1, c, h, w));
    out.index_axis_mut(Axis(0), 0).assign(img);
    out.into_dyn()
}

fn from_batch1<F: Scalar>(t: &ArrayD<F>) -> Array3<F> {
    let sh = t.shape();
    let (c, h, w) = (sh[1], sh[2], sh[3]);
    let mut out = Array3::<F>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[ch, y, x]] = t[[0, ch, y, x]];
            }
        }
    }
    out
}

fn clamp01<F: Scalar>(t: &mut Array3<F>) {
    for v in t.iter_mut() {
        *v = F::of_f64(v.to_f64().clamp(0.0, 1.0));
    }
}

/// Run the model on one low-quality image (plus its depth) and return the
/// clamped restored image.
pub fn run_model<F: Scalar>(
    params: &Params<F>,
    cfg: &DgnConfig,
    lq: &Array3<F>,
    lq_depth: &Array3<F>,
) -> Result<Array3<F>> {
    let mut g = Graph::<F>::new();
    let bind = params.bind(&mut g);
    let x = g.input(to_batch1(lq));
    let xd = g.input(to_batch1(lq_depth));
    let (y, _) = dgn_forward(&mut g, &bind, cfg, x, xd, None)?;
    let mut out = from_batch1(&g.value(y).to_owned());
    clamp01(&mut out);
    Ok(out)
}

/// Degrade per task, run inference and compute PSNR/SSIM against the HQ
/// reference for every item; also emit the no-model baseline rows.
pub fn evaluate<F: Scalar>(
    params: &Params<F>,
    cfg: &DgnConfig,
    items: &[EvalItem<F>],
    opts: &EvalOpts,
) -> Result<EvalReport> {
    cfg.validate()?;
    if items.is_empty() {
        return invalid_arg("evaluate: no items");
    }
    let mut rows = Vec::with_capacity(items.len());
    let mut baseline_rows = Vec::with_capacity(items.len());
    for item in items {
        let hq = center_crop_to_multiple(&item.hq, cfg.scale.max(1));
        let (_, h, w) = hq.dim();
        let (lh, lw) = (h / cfg.scale, w / cfg.scale);
        let (lq, baseline) = match cfg.task {
            Task::Sr => {
                let mut lq = bicubic_resize(&hq, lh, lw);
                for v in lq.iter_mut() {
                    *v = F::of_f64(v.to_f64().clamp(0.0, 1.0));
                }
                let mut up = bicubic_resize(&lq, h, w);
                clamp01(&mut up);
                (lq, up)
            }
            Task::Denoise => {
                let mut rng = rng_from_seed(derive_seed(opts.seed, &item.id));
                let lq = awgn(&hq, opts.sigma, &mut rng)?;
                (lq.clone(), lq)
            }
        };
        let (lq_depth, _) = ingest_depth::<F>(&item.id, (lh, lw), (h, w), &opts.depth)?;
        let restored = run_model(params, cfg, &lq, &lq_depth)?;

        let hq_dyn = hq.clone().into_dyn();
        let restored_dyn = restored.into_dyn();
        let baseline_dyn = baseline.into_dyn();
        rows.push(EvalRow {
            id: item.id.clone(),
            psnr: psnr(&restored_dyn, &hq_dyn, 1.0)?,
            ssim: ssim(&restored_dyn, &hq_dyn)?,
        });
        baseline_rows.push(EvalRow {
            id: item.id.clone(),
            psnr: psnr(&baseline_dyn, &hq_dyn, 1.0)?,
            ssim: ssim(&baseline_dyn, &hq_dyn)?,
        });
    }
    let mean = |rows: &[EvalRow], f: fn(&EvalRow) -> f64| -> f64 {
        rows.iter().map(f).sum::<f64>() / rows.len() as f64
    };
    Ok(EvalReport {
        mean_psnr: mean(&rows, |r| r.psnr),
        mean_ssim: mean(&rows, |r| r.ssim),
        baseline_mean_psnr: mean(&baseline_rows, |r| r.psnr),
        baseline_mean_ssim: mean(&baseline_rows, |r| r.ssim),
        rows,
        baseline_rows,
    })
}

#[derive(Clone, Debug)]
pub struct InferInfo {
    pub out_path: PathBuf,
    pub width: usize,
    pub height: usize,
    pub elapsed_ms: f64,
}

/// Restore a single image file. Depth comes from `<image stem>.lqdepth` next
/// to the image, an explicit sidecar path, or the synthetic fallback.
pub fn infer<F: Scalar>(
    params: &Params<F>,
    cfg: &DgnConfig,
    image_path: &Path,
    depth_path: Option<&Path>,
    synthetic_depth_seed: Option<u64>,
    out_path: &Path,
) -> Result<InferInfo> {
    cfg.validate()?;
    let lq: Array3<F> = load_image_tensor(image_path)?;
    let (_, h, w) = lq.dim();
    let id = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image")
        .to_string();

    let lq_depth: Array3<F> = if let Some(dp) = depth_path {
        let raw = crate::data::read_depth_sidecar(dp)?;
        if raw.dim() != (h, w) {
            return invalid_arg(format!(
                "infer: depth {:?} does not match image {h}x{w}",
                raw.dim()
            ));
        }
        crate::data::normalize_depth_raw(&raw)
    } else {
        let implicit = image_path.with_extension("lqdepth");
        if implicit.exists() {
            let raw = crate::data::read_depth_sidecar(&implicit)?;
            if raw.dim() != (h, w) {
                return invalid_arg(format!(
                    "infer: depth {:?} does not match image {h}x{w}",
                    raw.dim()
                ));
            }
            crate::data::normalize_depth_raw(&raw)
        } else if let Some(seed) = synthetic_depth_seed {
            let field = crate::data::synth_depth_field(seed, &id, h, w);
            crate::data::normalize_depth_raw(&field)
        } else if !cfg.depth_enabled {
            Array3::<F>::zeros((3, h, w))
        } else {
            return Err(crate::DgnError::MissingDepth(id));
        }
    };

    let start = Instant::now();
    let restored = run_model(params, cfg, &lq, &lq_depth)?;
    let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    let (_, oh, ow) = restored.dim();
    save_image_tensor(out_path, &restored)?;
    Ok(InferInfo {
        out_path: out_path.to_path_buf(),
        width: ow,
        height: oh,
        elapsed_ms,
    })
}

/// Guard used by the CLI: a checkpoint trained for one task cannot evaluate
/// the other.
pub fn check_task(cfg: &DgnConfig, requested: Task) -> Result<()> {
    if cfg.task != requested {
        return invalid_config(format!(
            "checkpoint was trained for {:?}, requested {:?}",
            cfg.task, requested
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_from_seed, standard_normal};

    fn rand_img(h: usize, w: usize, seed: u64) -> Array3<f32> {
        let mut rng = rng_from_seed(seed);
        let mut img = Array3::<f32>::zeros((3, h, w));
        for v in img.iter_mut() {
            *v = (0.5 + 0.2 * standard_normal::<f64>(&mut rng) as f32).clamp(0.0, 1.0);
        }
        img
    }

    fn tiny_cfg(task: Task) -> DgnConfig {
        DgnConfig {
            num_groups: 1,
            blocks_per_group: 1,
            channels: 8,
            base_window: 8,
            ratios: vec![0.5],
            scale: if task == Task::Sr { 4 } else { 1 },
            task,
            lsh: crate::inter::LshConfig {
                num_rounds: 1,
                num_buckets: 4,
                chunk_size: 32,
                seed: 0,
                lookback: false,
            },
            ..DgnConfig::default()
        }
    }

    #[test]
    fn center_crop_rounds_down_to_scale() {
        let img = rand_img(34, 61, 1);
        let cropped = center_crop_to_multiple(&img, 4);
        assert_eq!(cropped.dim(), (3, 32, 60));
        // centered: one row off the top, one off the bottom
        assert_eq!(cropped[[0, 0, 0]], img[[0, 1, 0]]);
    }

    #[test]
    fn identity_degradation_hits_psnr_cap() {
        // sigma 0 noise and a denoise head with zeroed conv + input skip:
        // output == input == reference, PSNR sentinel 100
        let cfg = tiny_cfg(Task::Denoise);
        let mut params = Params::<f32>::init(&cfg, 2).unwrap();
        params.get_mut("recon_i.out.w").unwrap().fill(0.0);
        params.get_mut("recon_i.out.b").unwrap().fill(0.0);
        // groups are identity at init; zero the trunk conv too
        params.get_mut("trunk.conv_i.w").unwrap().fill(0.0);
        let items = vec![EvalItem {
            id: "flat".into(),
            hq: rand_img(16, 16, 3),
        }];
        let opts = EvalOpts {
            sigma: 0.0,
            seed: 0,
            depth: DepthSource::Synthetic { seed: 1 },
        };
        let report = evaluate(&params, &cfg, &items, &opts).unwrap();
        assert_eq!(report.rows[0].psnr, 100.0);
        assert_eq!(report.baseline_rows[0].psnr, 100.0);
    }

    #[test]
    fn report_emits_baseline_and_means() {
        let cfg = tiny_cfg(Task::Sr);
        let params = Params::<f32>::init(&cfg, 4).unwrap();
        let items: Vec<EvalItem<f32>> = (0..3)
            .map(|i| EvalItem {
                id: format!("img{i}"),
                hq: rand_img(32, 32, 5 + i),
            })
            .collect();
        let opts = EvalOpts {
            sigma: 25.0,
            seed: 9,
            depth: DepthSource::Synthetic { seed: 2 },
        };
        let report = evaluate(&params, &cfg, &items, &opts).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert_eq!(report.baseline_rows.len(), 3);
        // mean equals arithmetic mean of rows
        let m = report.rows.iter().map(|r| r.psnr).sum::<f64>() / 3.0;
        assert!((report.mean_psnr - m).abs() < 1e-6);
        let text = report.to_text();
        assert_eq!(text.lines().count(), 8);
        assert!(text.lines().any(|l| l.starts_with("img0#bicubic,")));
        assert!(text.lines().last().unwrap().starts_with("mean#bicubic,"));
    }

    #[test]
    fn eval_is_deterministic_given_seed() {
        let cfg = tiny_cfg(Task::Denoise);
        let params = Params::<f32>::init(&cfg, 6).unwrap();
        let items = vec![EvalItem {
            id: "a".into(),
            hq: rand_img(16, 16, 7),
        }];
        let opts = EvalOpts {
            sigma: 25.0,
            seed: 42,
            depth: DepthSource::Synthetic { seed: 3 },
        };
        let a = evaluate(&params, &cfg, &items, &opts).unwrap();
        let b = evaluate(&params, &cfg, &items, &opts).unwrap();
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn infer_writes_expected_resolution_and_is_byte_stable() {
        let cfg = tiny_cfg(Task::Sr);
        let params = Params::<f32>::init(&cfg, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let in_path = dir.path().join("in.png");
        crate::data::save_image_tensor(&in_path, &rand_img(16, 16, 9)).unwrap();

        let out1 = dir.path().join("out1.png");
        let info = infer(&params, &cfg, &in_path, None, Some(5), &out1).unwrap();
        assert_eq!((info.width, info.height), (64, 64));

        let out2 = dir.path().join("out2.png");
        infer(&params, &cfg, &in_path, None, Some(5), &out2).unwrap();
        assert_eq!(
            std::fs::read(&out1).unwrap(),
            std::fs::read(&out2).unwrap(),
            "repeated inference must be byte-identical"
        );
    }

    #[test]
    fn infer_denoise_preserves_resolution() {
        let cfg = tiny_cfg(Task::Denoise);
        let params = Params::<f32>::init(&cfg, 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let in_path = dir.path().join("noisy.png");
        crate::data::save_image_tensor(&in_path, &rand_img(20, 24, 13)).unwrap();
        let out = dir.path().join("out.png");
        let info = infer(&params, &cfg, &in_path, None, Some(1), &out).unwrap();
        assert_eq!((info.width, info.height), (24, 20));
    }

    #[test]
    fn infer_missing_depth_is_an_error() {
        let cfg = tiny_cfg(Task::Sr);
        let params = Params::<f32>::init(&cfg, 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let in_path = dir.path().join("in.png");
        crate::data::save_image_tensor(&in_path, &rand_img(8, 8, 11)).unwrap();
        let err = infer(
            &params,
            &cfg,
            &in_path,
            None,
            None,
            &dir.path().join("out.png"),
        )
        .unwrap_err();
        assert!(matches!(err, crate::DgnError::MissingDepth(_)));
    }

    #[test]
    fn task_mismatch_rejected() {
        let cfg = tiny_cfg(Task::Sr);
        assert!(check_task(&cfg, Task::Denoise).is_err());
        assert!(check_task(&cfg, Task::Sr).is_ok());
    }
}
