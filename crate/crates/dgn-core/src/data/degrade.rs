//! Degradation synthesis: antialiased bicubic resampling (Keys kernel,
//! a = -0.5) and additive white Gaussian noise on the 0-255 sigma convention.

use ndarray::Array3;

use crate::rng::{standard_normal, DgnRng};
use crate::{invalid_arg, Result, Scalar};

/// One training example: low-quality/high-quality image pair with their
/// depth maps, everything in `[0,1]`, depth replicated to 3 channels.
#[derive(Clone, Debug)]
pub struct SamplePair<F: Scalar> {
    pub lq: Array3<F>,
    pub hq: Array3<F>,
    pub lq_depth: Array3<F>,
    pub hq_depth: Array3<F>,
}

impl<F: Scalar> SamplePair<F> {
    /// Dims must relate by exactly the scale factor; depth maps must carry
    /// three identical channels.
    pub fn validate(&self, scale: usize) -> Result<()> {
        let (c, hh, hw) = self.hq.dim();
        let (cl, lh, lw) = self.lq.dim();
        if c != 3 || cl != 3 {
            return invalid_arg("sample pair: images must have 3 channels");
        }
        if lh * scale != hh || lw * scale != hw {
            return invalid_arg(format!(
                "sample pair: lq {lh}x{lw} vs hq {hh}x{hw} does not match scale {scale}"
            ));
        }
        if self.lq_depth.dim() != self.lq.dim() || self.hq_depth.dim() != self.hq.dim() {
            return invalid_arg("sample pair: depth dims must match their images");
        }
        for d in [&self.lq_depth, &self.hq_depth] {
            let (_, h, w) = d.dim();
            for y in 0..h {
                for x in 0..w {
                    if d[[1, y, x]] != d[[0, y, x]] || d[[2, y, x]] != d[[0, y, x]] {
                        return invalid_arg("sample pair: depth channels must be identical");
                    }
                }
            }
        }
        Ok(())
    }
}

/// Keys cubic convolution kernel with a = -0.5.
fn cubic(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * (t * t * t - 5.0 * t * t + 8.0 * t - 4.0)
    } else {
        0.0
    }
}

/// Per-output-index tap weights for one axis. Antialiasing stretches the
/// kernel by the scale when shrinking; edges clamp (weights accumulate on
/// the clamped index); each tap set normalizes to sum 1.
fn axis_weights(in_len: usize, out_len: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = in_len as f64 / out_len as f64;
    let filter_scale = scale.max(1.0);
    let support = 2.0 * filter_scale;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let center = (i as f64 + 0.5) * scale - 0.5;
        let lo = (center - support).ceil() as isize;
        let hi = (center + support).floor() as isize;
        let start = (lo.max(0) as usize).min(in_len - 1);
        let end = (hi.max(0) as usize).min(in_len - 1);
        let mut weights = vec![0.0f64; end - start + 1];
        let mut sum = 0.0;
        for j in lo..=hi {
            let w = cubic((j as f64 - center) / filter_scale);
            if w == 0.0 {
                continue;
            }
            let idx = (j.max(0) as usize).min(in_len - 1);
            weights[idx - start] += w;
            sum += w;
        }
        for w in weights.iter_mut() {
            *w /= sum;
        }
        out.push((start, weights));
    }
    out
}

/// Separable bicubic resample of a `[3,H,W]` tensor to the given dims.
pub fn bicubic_resize<F: Scalar>(img: &Array3<F>, out_h: usize, out_w: usize) -> Array3<F> {
    let (c, h, w) = img.dim();
    let wy = axis_weights(h, out_h);
    let wx = axis_weights(w, out_w);
    // rows first
    let mut tmp = Array3::<f64>::zeros((c, out_h, w));
    for ch in 0..c {
        for (oy, (start, ws)) in wy.iter().enumerate() {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, wgt) in ws.iter().enumerate() {
                    acc += wgt * img[[ch, start + k, x]].to_f64();
                }
                tmp[[ch, oy, x]] = acc;
            }
        }
    }
    let mut out = Array3::<F>::zeros((c, out_h, out_w));
    for ch in 0..c {
        for y in 0..out_h {
            for (ox, (start, ws)) in wx.iter().enumerate() {
                let mut acc = 0.0;
                for (k, wgt) in ws.iter().enumerate() {
                    acc += wgt * tmp[[ch, y, start + k]];
                }
                out[[ch, y, ox]] = F::of_f64(acc);
            }
        }
    }
    out
}

/// Additive white Gaussian noise with `sigma` on the 0-255 scale, applied in
/// `[0,1]` space and clipped back to `[0,1]`.
pub fn awgn<F: Scalar>(img: &Array3<F>, sigma: f64, rng: &mut DgnRng) -> Result<Array3<F>> {
    if sigma < 0.0 {
        return invalid_arg("awgn: sigma must be non-negative");
    }
    let s = sigma / 255.0;
    let mut out = img.clone();
    for v in out.iter_mut() {
        let n: f64 = standard_normal::<f64>(rng);
        *v = F::of_f64((v.to_f64() + s * n).clamp(0.0, 1.0));
    }
    Ok(out)
}

/// Build a super-resolution pair: bicubic-downsample the HQ image by `s` and
/// attach the provided depth sidecars.
pub fn degrade_sr<F: Scalar>(
    hq: &Array3<F>,
    hq_depth: Array3<F>,
    lq_depth: Array3<F>,
    s: usize,
) -> Result<SamplePair<F>> {
    let (_, h, w) = hq.dim();
    if s == 0 || h % s != 0 || w % s != 0 {
        return invalid_arg(format!("degrade_sr: dims {h}x{w} not divisible by scale {s}"));
    }
    // the cubic kernel's negative lobes can overshoot; the pipeline
    // contract keeps every sample in [0,1]
    let lq = bicubic_resize(hq, h / s, w / s).mapv(|v| {
        F::of_f64(v.to_f64().clamp(0.0, 1.0))
    });
    let pair = SamplePair {
        lq,
        hq: hq.clone(),
        lq_depth,
        hq_depth,
    };
    pair.validate(s)?;
    Ok(pair)
}

/// Build a denoising pair: seeded AWGN at `sigma` (0-255 scale) on the HQ
/// image. Depth dims match the image on both sides (scale 1).
pub fn degrade_noise<F: Scalar>(
    hq: &Array3<F>,
    hq_depth: Array3<F>,
    lq_depth: Array3<F>,
    sigma: f64,
    rng: &mut DgnRng,
) -> Result<SamplePair<F>> {
    let lq = awgn(hq, sigma, rng)?;
    let pair = SamplePair {
        lq,
        hq: hq.clone(),
        lq_depth,
        hq_depth,
    };
    pair.validate(1)?;
    Ok(pair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn replicate(d: ndarray::Array2<f64>) -> Array3<f64> {
        let (h, w) = d.dim();
        let mut out = Array3::<f64>::zeros((3, h, w));
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[[c, y, x]] = d[[y, x]];
                }
            }
        }
        out
    }

    fn rand_img(h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = rng_from_seed(seed);
        let mut img = Array3::<f64>::zeros((3, h, w));
        for v in img.iter_mut() {
            *v = 0.5 + 0.15 * standard_normal::<f64>(&mut rng);
        }
        img
    }

    #[test]
    fn sr_pair_shapes() {
        let hq = rand_img(64, 64, 1);
        let hd = replicate(ndarray::Array2::zeros((64, 64)));
        let ld = replicate(ndarray::Array2::zeros((16, 16)));
        let pair = degrade_sr(&hq, hd, ld, 4).unwrap();
        assert_eq!(pair.lq.dim(), (3, 16, 16));
        assert_eq!(pair.hq.dim(), (3, 64, 64));
    }

    #[test]
    fn sr_pair_at_full_patch_scale() {
        let hq = rand_img(256, 256, 20).mapv(|v| v.clamp(0.0, 1.0));
        let hd = replicate(ndarray::Array2::zeros((256, 256)));
        let ld = replicate(ndarray::Array2::zeros((64, 64)));
        let pair = degrade_sr(&hq, hd, ld, 4).unwrap();
        assert_eq!(pair.lq.dim(), (3, 64, 64));
    }

    #[test]
    fn sr_rejects_indivisible_dims() {
        let hq = rand_img(30, 64, 2);
        let hd = replicate(ndarray::Array2::zeros((30, 64)));
        let ld = replicate(ndarray::Array2::zeros((7, 16)));
        assert!(degrade_sr(&hq, hd, ld, 4).is_err());
    }

    #[test]
    fn downsample_preserves_constants() {
        // kernel partition of unity: a constant image stays constant
        let hq = Array3::<f64>::from_elem((3, 32, 32), 0.42);
        let lq = bicubic_resize(&hq, 8, 8);
        for v in lq.iter() {
            assert!((v - 0.42).abs() < 1e-12);
        }
    }

    #[test]
    fn downsample_keeps_linear_ramp_linear_in_interior() {
        // horizontal ramp; clamped borders flatten the outermost taps, so
        // the analytic check covers interior columns
        let (h, w) = (16, 64);
        let mut hq = Array3::<f64>::zeros((3, h, w));
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    hq[[c, y, x]] = x as f64 / w as f64;
                }
            }
        }
        let lq = bicubic_resize(&hq, h / 4, w / 4);
        // analytic: output x maps to source center (x+0.5)*4-0.5
        for ox in 2..w / 4 - 2 {
            let center = (ox as f64 + 0.5) * 4.0 - 0.5;
            let expect = center / w as f64;
            let got = lq[[0, 2, ox]];
            assert!(
                (got - expect).abs() < 1e-4,
                "ramp at {ox}: {got} vs {expect}"
            );
        }
    }

    #[test]
    fn awgn_sigma_zero_is_identity() {
        let hq = rand_img(8, 8, 3);
        let mut rng = rng_from_seed(4);
        let lq = awgn(&hq, 0.0, &mut rng).unwrap();
        assert_eq!(lq, hq);
    }

    #[test]
    fn awgn_negative_sigma_rejected() {
        let hq = rand_img(8, 8, 5);
        let mut rng = rng_from_seed(6);
        assert!(awgn(&hq, -1.0, &mut rng).is_err());
    }

    #[test]
    fn awgn_sample_std_matches_sigma() {
        let hq = Array3::<f64>::from_elem((3, 64, 64), 0.5);
        let mut rng = rng_from_seed(7);
        let lq = awgn(&hq, 25.0, &mut rng).unwrap();
        let diffs: Vec<f64> = lq.iter().zip(hq.iter()).map(|(a, b)| a - b).collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>()
            / (diffs.len() - 1) as f64;
        let std = var.sqrt();
        let target = 25.0 / 255.0;
        assert!(
            (std - target).abs() / target < 0.05,
            "sample std {std} vs {target}"
        );
    }

    #[test]
    fn awgn_same_seed_same_field() {
        let hq = rand_img(16, 16, 8);
        let a = awgn(&hq, 25.0, &mut rng_from_seed(9)).unwrap();
        let b = awgn(&hq, 25.0, &mut rng_from_seed(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degraded_values_stay_in_unit_range() {
        let hq = rand_img(16, 16, 10).mapv(|v| v.clamp(0.0, 1.0));
        let mut rng = rng_from_seed(11);
        let noisy = awgn(&hq, 50.0, &mut rng).unwrap();
        assert!(noisy.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let hd = replicate(ndarray::Array2::zeros((16, 16)));
        let ld = replicate(ndarray::Array2::zeros((4, 4)));
        let pair = degrade_sr(&hq, hd, ld, 4).unwrap();
        assert!(pair.lq.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn upsample_then_check_shapes() {
        let lq = rand_img(8, 8, 12);
        let up = bicubic_resize(&lq, 32, 32);
        assert_eq!(up.dim(), (3, 32, 32));
    }
}
