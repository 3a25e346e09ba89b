//! Depth sidecar ingestion.
//!
//! Depth maps arrive as precomputed single-channel 16-bit rasters next to
//! each image: `<id>.lqdepth` at the low-quality resolution and
//! `<id>.hqdepth` at the high-quality resolution (PNG-encoded bytes; the
//! extension marks the role). Each map is min-max normalized to `[0,1]` per
//! image (a constant map normalizes to zeros) and replicated to 3 channels.
//! Synthetic mode replaces the files with a deterministic ramp-plus-blobs
//! field derived from the image id, for tests and depth-free corpora.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::rng::{derive_seed, rng_from_seed};
use crate::{invalid_arg, DgnError, Result, Scalar};

/// Where depth maps come from.
#[derive(Clone, Debug)]
pub enum DepthSource {
    /// Read `<dir>/<id>.lqdepth` and `<dir>/<id>.hqdepth`.
    Sidecar { dir: PathBuf },
    /// Deterministic synthetic fields seeded by (seed, id).
    Synthetic { seed: u64 },
}

/// Write a raw depth plane as a 16-bit grayscale PNG at `path`.
pub fn write_depth_sidecar(path: &Path, depth: &Array2<u16>) -> Result<()> {
    let (h, w) = depth.dim();
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, image::Luma([depth[[y, x]]]));
        }
    }
    image::DynamicImage::ImageLuma16(img)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| DgnError::DecodeError {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    Ok(())
}

/// Read a 16-bit raster regardless of its extension (format sniffed from
/// content).
pub fn read_depth_sidecar(path: &Path) -> Result<Array2<u16>> {
    let img = image::ImageReader::open(path)
        .map_err(|_| DgnError::MissingDepth(path.display().to_string()))?
        .with_guessed_format()
        .map_err(|e| DgnError::DecodeError {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?
        .decode()
        .map_err(|e| DgnError::DecodeError {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?
        .to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array2::<u16>::zeros((h, w));
    for (x, y, p) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = p.0[0];
    }
    Ok(out)
}

/// Min-max normalize a raw depth plane to `[0,1]` and replicate to three
/// channels. A degenerate range (max = min) maps to all zeros.
pub fn normalize_depth_raw<F: Scalar, T: Copy + Into<f64>>(raw: &Array2<T>) -> Array3<F> {
    let (h, w) = raw.dim();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in raw.iter() {
        let v: f64 = v.into();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    let mut out = Array3::<F>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let v: f64 = raw[[y, x]].into();
            let n = if span > 0.0 { (v - lo) / span } else { 0.0 };
            for c in 0..3 {
                out[[c, y, x]] = F::of_f64(n);
            }
        }
    }
    out
}

/// Deterministic synthetic depth: an oriented linear ramp plus three
/// Gaussian blobs, all drawn from a ChaCha8 stream keyed by (seed, id).
pub fn synth_depth_field(seed: u64, id: &str, h: usize, w: usize) -> Array2<f64> {
    let mut rng = rng_from_seed(derive_seed(seed, &format!("depth/{id}")));
    let theta = rng.gen::<f64>() * std::f64::consts::PI;
    let (dy, dx) = (theta.sin(), theta.cos());
    let mut blobs = Vec::with_capacity(3);
    for _ in 0..3 {
        let cx = rng.gen::<f64>();
        let cy = rng.gen::<f64>();
        let sigma = 0.1 + 0.2 * rng.gen::<f64>();
        let amp = 0.5 + rng.gen::<f64>();
        blobs.push((cx, cy, sigma, amp));
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64;
            let v = (y as f64 + 0.5) / h as f64;
            let mut d = dx * u + dy * v;
            for &(cx, cy, sigma, amp) in &blobs {
                let r2 = (u - cx) * (u - cx) + (v - cy) * (v - cy);
                d += amp * (-r2 / (2.0 * sigma * sigma)).exp();
            }
            out[[y, x]] = d;
        }
    }
    out
}

/// Load (or synthesize) the low/high-quality depth pair for one image id.
/// Expected dims are `(h, w)` per resolution; a sidecar whose dims disagree
/// is rejected.
pub fn ingest_depth<F: Scalar>(
    id: &str,
    lq_dims: (usize, usize),
    hq_dims: (usize, usize),
    source: &DepthSource,
) -> Result<(Array3<F>, Array3<F>)> {
    match source {
        DepthSource::Sidecar { dir } => {
            let lq_path = dir.join(format!("{id}.lqdepth"));
            let hq_path = dir.join(format!("{id}.hqdepth"));
            if !lq_path.exists() || !hq_path.exists() {
                return Err(DgnError::MissingDepth(id.to_string()));
            }
            let lq_raw = read_depth_sidecar(&lq_path)?;
            let hq_raw = read_depth_sidecar(&hq_path)?;
            if lq_raw.dim() != lq_dims || hq_raw.dim() != hq_dims {
                return invalid_arg(format!(
                    "depth sidecars for `{id}`: dims {:?}/{:?}, expected {:?}/{:?}",
                    lq_raw.dim(),
                    hq_raw.dim(),
                    lq_dims,
                    hq_dims
                ));
            }
            Ok((normalize_depth_raw(&lq_raw), normalize_depth_raw(&hq_raw)))
        }
        DepthSource::Synthetic { seed } => {
            let lq = synth_depth_field(*seed, id, lq_dims.0, lq_dims.1);
            let hq = synth_depth_field(*seed, id, hq_dims.0, hq_dims.1);
            Ok((normalize_depth_raw(&lq), normalize_depth_raw(&hq)))
        }
    }
}
