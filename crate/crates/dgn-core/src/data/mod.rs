//! Dataset tooling: curation (perceptual-hash dedup, brightness filter,
//! patch tiling), degradation synthesis (bicubic downsampling, additive
//! white Gaussian noise), depth-sidecar ingestion and training-batch
//! sampling.

mod curate;
mod degrade;
mod depth;
mod sample;

pub use curate::{
    brightness_verdict, curate, dedup, entry, hamming, mean_brightness, phash_gray, tile,
    CurationEntry, CurationManifest, HashCode, ManifestEntry, PatchRect, Verdict,
    DEFAULT_BRIGHTNESS_THRESHOLD, DEFAULT_DEDUP_DELTA, DEFAULT_PATCH_H, DEFAULT_PATCH_W,
};
pub use degrade::{awgn, bicubic_resize, degrade_noise, degrade_sr, SamplePair};
pub use depth::{
    ingest_depth, normalize_depth_raw, read_depth_sidecar, synth_depth_field, write_depth_sidecar,
    DepthSource,
};
pub use sample::{flip_h, rot90, sample_batch, Batch, BatchCfg, TrainImage};

use ndarray::{Array2, Array3};

use crate::{DgnError, Result, Scalar};

/// Decode an RGB image file into a `[3,H,W]` tensor in `[0,1]`.
pub fn load_image_tensor<F: Scalar>(path: &std::path::Path) -> Result<Array3<F>> {
    let img = image::ImageReader::open(path)
        .map_err(|e| DgnError::DecodeError {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?
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
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::<F>::zeros((3, h, w));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = F::of_f64(p.0[c] as f64 / 255.0);
        }
    }
    Ok(out)
}

/// Encode a `[3,H,W]` tensor in `[0,1]` as an 8-bit PNG.
pub fn save_image_tensor<F: Scalar>(path: &std::path::Path, t: &Array3<F>) -> Result<()> {
    let (c, h, w) = t.dim();
    assert_eq!(c, 3, "save_image_tensor: expected [3,H,W]");
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|ch| {
                let v = t[[ch, y, x]].to_f64().clamp(0.0, 1.0);
                (v * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| DgnError::DecodeError {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    Ok(())
}

/// Grayscale plane in `[0,255]` from an image file (luma 0.299/0.587/0.114).
pub fn load_gray(path: &std::path::Path) -> Result<Array2<f64>> {
    let t: Array3<f64> = load_image_tensor(path)?;
    Ok(gray_from_tensor(&t))
}

/// Luma plane in `[0,255]` from a `[3,H,W]` tensor in `[0,1]`.
pub fn gray_from_tensor<F: Scalar>(t: &Array3<F>) -> Array2<f64> {
    let (_, h, w) = t.dim();
    let mut g = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            g[[y, x]] = 255.0
                * (0.299 * t[[0, y, x]].to_f64()
                    + 0.587 * t[[1, y, x]].to_f64()
                    + 0.114 * t[[2, y, x]].to_f64());
        }
    }
    g
}
