//! Training batch sampling: seeded random crops with rotation/flip
//! augmentation applied identically to the image pair and both depth maps.
//!
//! Crop origins are drawn in low-quality coordinates and scaled by `s` for
//! the high-quality tensors, so the pair always stays aligned.

use ndarray::{Array3, Array4};

use crate::data::SamplePair;
use crate::rng::{uniform_index, DgnRng};
use crate::{invalid_arg, Result, Scalar};

/// One dataset element, already degraded.
#[derive(Clone, Debug)]
pub struct TrainImage<F: Scalar> {
    pub id: String,
    pub pair: SamplePair<F>,
}

#[derive(Clone, Copy, Debug)]
pub struct BatchCfg {
    pub batch_size: usize,
    /// Patch side in high-quality pixels; must be divisible by `scale`.
    pub patch_size: usize,
    pub scale: usize,
    pub augment: bool,
}

/// Stacked batch, `[B,3,h,w]` each.
#[derive(Clone, Debug)]
pub struct Batch<F: Scalar> {
    pub hq: Array4<F>,
    pub lq: Array4<F>,
    pub hq_depth: Array4<F>,
    pub lq_depth: Array4<F>,
}

/// Rotate a `[3,H,W]` tensor 90 degrees clockwise, exactly.
pub fn rot90<F: Scalar>(t: &Array3<F>) -> Array3<F> {
    let (c, h, w) = t.dim();
    let mut out = Array3::<F>::zeros((c, w, h));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[ch, x, h - 1 - y]] = t[[ch, y, x]];
            }
        }
    }
    out
}

/// Mirror a `[3,H,W]` tensor horizontally, exactly.
pub fn flip_h<F: Scalar>(t: &Array3<F>) -> Array3<F> {
    let (c, h, w) = t.dim();
    let mut out = Array3::<F>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[ch, y, w - 1 - x]] = t[[ch, y, x]];
            }
        }
    }
    out
}

fn crop<F: Scalar>(t: &Array3<F>, y0: usize, x0: usize, size: usize) -> Array3<F> {
    let (c, _, _) = t.dim();
    let mut out = Array3::<F>::zeros((c, size, size));
    for ch in 0..c {
        for y in 0..size {
            for x in 0..size {
                out[[ch, y, x]] = t[[ch, y0 + y, x0 + x]];
            }
        }
    }
    out
}

fn augment_one<F: Scalar>(t: &Array3<F>, rot: usize, flip: bool) -> Array3<F> {
    let mut out = t.clone();
    for _ in 0..rot {
        out = rot90(&out);
    }
    if flip {
        out = flip_h(&out);
    }
    out
}

/// Draw a batch: per sample a uniform image index, a uniform crop origin (in
/// LQ coordinates, scaled by `s` for the HQ pair), a rotation in
/// {0, 90, 180, 270} and a horizontal flip, all applied identically to the
/// four tensors.
pub fn sample_batch<F: Scalar>(
    images: &[TrainImage<F>],
    cfg: &BatchCfg,
    rng: &mut DgnRng,
) -> Result<Batch<F>> {
    if images.is_empty() {
        return invalid_arg("sample_batch: empty dataset");
    }
    if cfg.patch_size == 0 || !cfg.patch_size.is_multiple_of(cfg.scale) {
        return invalid_arg(format!(
            "sample_batch: patch {} must be a positive multiple of scale {}",
            cfg.patch_size, cfg.scale
        ));
    }
    let lq_patch = cfg.patch_size / cfg.scale;
    let b = cfg.batch_size;
    let mut hq = Array4::<F>::zeros((b, 3, cfg.patch_size, cfg.patch_size));
    let mut lq = Array4::<F>::zeros((b, 3, lq_patch, lq_patch));
    let mut hq_d = Array4::<F>::zeros((b, 3, cfg.patch_size, cfg.patch_size));
    let mut lq_d = Array4::<F>::zeros((b, 3, lq_patch, lq_patch));
    for bi in 0..b {
        let img = &images[uniform_index(rng, images.len())];
        let (_, lh, lw) = img.pair.lq.dim();
        if lq_patch > lh || lq_patch > lw {
            return invalid_arg(format!(
                "sample_batch: crop {lq_patch} exceeds image `{}` ({lh}x{lw} lq)",
                img.id
            ));
        }
        let y_l = uniform_index(rng, lh - lq_patch + 1);
        let x_l = uniform_index(rng, lw - lq_patch + 1);
        let (rot, flip) = if cfg.augment {
            (uniform_index(rng, 4), uniform_index(rng, 2) == 1)
        } else {
            (0, false)
        };
        let views = [
            (&img.pair.hq, y_l * cfg.scale, x_l * cfg.scale, cfg.patch_size),
            (&img.pair.lq, y_l, x_l, lq_patch),
            (&img.pair.hq_depth, y_l * cfg.scale, x_l * cfg.scale, cfg.patch_size),
            (&img.pair.lq_depth, y_l, x_l, lq_patch),
        ];
        for (k, (src, y0, x0, size)) in views.into_iter().enumerate() {
            let patch = augment_one(&crop(src, y0, x0, size), rot, flip);
            let dst = match k {
                0 => &mut hq,
                1 => &mut lq,
                2 => &mut hq_d,
                _ => &mut lq_d,
            };
            for c in 0..3 {
                for y in 0..size {
                    for x in 0..size {
                        dst[[bi, c, y, x]] = patch[[c, y, x]];
                    }
                }
            }
        }
    }
    Ok(Batch {
        hq,
        lq,
        hq_depth: hq_d,
        lq_depth: lq_d,
    })
}
