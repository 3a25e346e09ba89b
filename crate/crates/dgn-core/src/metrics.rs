//! Full-reference image quality metrics: PSNR and SSIM.
//!
//! Both accept `[C,H,W]` tensors with values on a known dynamic range and
//! compute in f64 regardless of the input precision. SSIM converts to luma
//! (0.299/0.587/0.114), slides an 11x11 Gaussian window (sigma 1.5) over the
//! valid region and averages the local map; constants are the standard
//! K1 = 0.01, K2 = 0.03 on a dynamic range of 1.0.

use ndarray::ArrayD;

use crate::{invalid_arg, Result, Scalar};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Reported for identical images (zero MSE).
pub const PSNR_CAP_DB: f64 = 100.0;

pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Peak signal-to-noise ratio in dB. Zero MSE returns the 100 dB sentinel so
/// results stay totally ordered.
pub fn psnr<F: Scalar>(a: &ArrayD<F>, b: &ArrayD<F>, max_val: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return invalid_arg(format!(
            "psnr: shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    if max_val <= 0.0 {
        return invalid_arg("psnr: max_val must be positive");
    }
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x.to_f64() - y.to_f64();
        acc += d * d;
    }
    let mse = acc / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Luma plane of a `[C,H,W]` tensor (C = 1 or 3), in f64.
fn to_luma<F: Scalar>(img: &ArrayD<F>) -> Result<(Vec<f64>, usize, usize)> {
    let sh = img.shape();
    if sh.len() != 3 || (sh[0] != 1 && sh[0] != 3) {
        return invalid_arg(format!("expected [1|3,H,W] image, got {sh:?}"));
    }
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let mut luma = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            luma[y * w + x] = if c == 1 {
                img[[0, y, x]].to_f64()
            } else {
                LUMA_WEIGHTS[0] * img[[0, y, x]].to_f64()
                    + LUMA_WEIGHTS[1] * img[[1, y, x]].to_f64()
                    + LUMA_WEIGHTS[2] * img[[2, y, x]].to_f64()
            };
        }
    }
    Ok((luma, h, w))
}

/// Mean structural similarity over the valid 11x11 window positions, on a
/// dynamic range of 1.0. Grayscale conversion happens first.
pub fn ssim<F: Scalar>(a: &ArrayD<F>, b: &ArrayD<F>) -> Result<f64> {
    if a.shape() != b.shape() {
        return invalid_arg(format!(
            "ssim: shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let (la, h, w) = to_luma(a)?;
    let (lb, _, _) = to_luma(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return invalid_arg(format!(
            "ssim: image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        ));
    }
    let k = gaussian_kernel();
    let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
    let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut acc = 0.0f64;
    for oy in 0..oh {
        for ox in 0..ow {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for ky in 0..SSIM_WINDOW {
                for kx in 0..SSIM_WINDOW {
                    let wgt = k[ky] * k[kx];
                    let va = la[(oy + ky) * w + ox + kx];
                    let vb = lb[(oy + ky) * w + ox + kx];
                    mu_a += wgt * va;
                    mu_b += wgt * vb;
                    aa += wgt * va * va;
                    bb += wgt * vb * vb;
                    ab += wgt * va * vb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            acc += num / den;
        }
    }
    Ok(acc / (oh * ow) as f64)
}

/// One line of the metric report: id, psnr, ssim, fixed 4-decimal formatting.
pub fn format_metric_row(id: &str, psnr_db: f64, ssim_val: f64) -> String {
    format!("{id},{psnr_db:.4},{ssim_val:.4}")
}
