//! Training objectives: image L1, depth L1, affine-invariant depth loss and
//! the weighted total.
//!
//! The affine-invariant term normalizes each depth map by its median and mean
//! absolute deviation before comparing, so any per-image scale/offset of
//! either argument leaves the loss unchanged. Median of an even-length set is
//! the lower middle element; an image whose deviation collapses below 1e-8
//! contributes zero rather than dividing by nothing.

use crate::graph::{Graph, Var};
use crate::{invalid_arg, invalid_config, Result, Scalar};

/// Deviation floor below which an image is skipped by the affine-invariant
/// term.
pub const AID_MAD_FLOOR: f64 = 1e-8;

/// Loss components for one batch, plus the weights that combined them.
/// `total` is composed as `image + l1 * depth_l1 + l2 * depth_aid`, in that
/// exact expression order.
#[derive(Clone, Copy, Debug)]
pub struct LossReport<F: Scalar> {
    pub image_loss: F,
    pub depth_l1: F,
    pub depth_aid: F,
    pub total: F,
    pub lambda1: F,
    pub lambda2: F,
}

/// Tape vars for the loss components.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub image: Var,
    pub depth_l1: Var,
    pub depth_aid: Var,
    pub total: Var,
}

/// Mean absolute error over all elements.
pub fn image_loss<F: Scalar>(g: &mut Graph<F>, y: Var, x: Var) -> Result<Var> {
    if g.shape(y) != g.shape(x) {
        return invalid_arg(format!(
            "image_loss: shapes {:?} vs {:?}",
            g.shape(y),
            g.shape(x)
        ));
    }
    let d = g.sub(y, x);
    let a = g.abs(d);
    Ok(g.mean_all(a))
}

/// Index of the median element (lower middle for even lengths) of a slice.
/// Non-finite values compare as equal so a diverged forward pass surfaces as
/// a non-finite loss downstream instead of a panic here.
fn median_index<F: Scalar>(values: &[F]) -> usize {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order[(values.len() - 1) / 2]
}

/// Normalize one flattened depth map by median and mean absolute deviation.
/// Returns `None` when the deviation collapses below the floor.
fn normalize_depth<F: Scalar>(g: &mut Graph<F>, flat: Var) -> Option<Var> {
    let values: Vec<F> = g.value(flat).iter().copied().collect();
    let med_idx = median_index(&values);
    let med = g.gather_scalar(flat, med_idx);
    let dev = g.sub_scalar(flat, med);
    let dev_abs = g.abs(dev);
    let mad = g.mean_all(dev_abs);
    if g.scalar_value(mad).to_f64() < AID_MAD_FLOOR {
        return None;
    }
    Some(g.div_scalar(dev, mad))
}

/// Affine-invariant depth loss over `[B,C,H,W]` tensors, computed on channel
/// 0 (depth channels are replicated). Mean over the batch.
pub fn aid_loss<F: Scalar>(g: &mut Graph<F>, pred: Var, target: Var) -> Result<Var> {
    let psh = g.shape(pred).to_vec();
    if psh != g.shape(target) {
        return invalid_arg(format!(
            "aid_loss: shapes {:?} vs {:?}",
            psh,
            g.shape(target)
        ));
    }
    if psh.len() != 4 {
        return invalid_arg("aid_loss: expected [B,C,H,W]");
    }
    let (b, h, w) = (psh[0], psh[2], psh[3]);
    let hw = h * w;
    let mut terms = Vec::with_capacity(b);
    for bi in 0..b {
        let p_img = g.slice_axis_range(pred, 0, bi, 1);
        let p_ch = g.slice_axis_range(p_img, 1, 0, 1);
        let p_flat = g.reshape(p_ch, &[hw]);
        let t_img = g.slice_axis_range(target, 0, bi, 1);
        let t_ch = g.slice_axis_range(t_img, 1, 0, 1);
        let t_flat = g.reshape(t_ch, &[hw]);
        let (Some(p_star), Some(t_star)) =
            (normalize_depth(g, p_flat), normalize_depth(g, t_flat))
        else {
            continue; // degenerate image contributes zero
        };
        let d = g.sub(p_star, t_star);
        let a = g.abs(d);
        terms.push(g.mean_all(a));
    }
    let total = if terms.is_empty() {
        g.input_scalar(F::zero())
    } else {
        g.add_n(&terms)
    };
    Ok(g.scale(total, F::of_f64(1.0 / b as f64)))
}

/// Weighted objective: `L1(y,x) + l1 * L1(y_d, x_d) + l2 * AID(y_d, aid_target)`.
/// `aid_against_image` switches the affine-invariant term's reference from
/// the depth target to the restored image.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<F: Scalar>(
    g: &mut Graph<F>,
    y: Var,
    x: Var,
    y_d: Var,
    x_d: Var,
    lambda1: F,
    lambda2: F,
    aid_against_image: bool,
) -> Result<LossVars> {
    if lambda1 < F::zero() || lambda2 < F::zero() {
        return invalid_config("total_loss: negative loss weights");
    }
    let image = image_loss(g, y, x)?;
    let depth_l1 = image_loss(g, y_d, x_d)?;
    let depth_aid = if aid_against_image {
        aid_loss(g, y_d, y)?
    } else {
        aid_loss(g, y_d, x_d)?
    };
    let t1 = g.scale(depth_l1, lambda1);
    let t2 = g.scale(depth_aid, lambda2);
    let s = g.add(image, t1);
    let total = g.add(s, t2);
    Ok(LossVars {
        image,
        depth_l1,
        depth_aid,
        total,
    })
}

/// Extract a [`LossReport`] from evaluated loss vars. The report recomposes
/// `total` with the same expression the tape used, so the identity
/// `total = image + l1*depth_l1 + l2*depth_aid` holds exactly.
pub fn loss_report<F: Scalar>(
    g: &Graph<F>,
    vars: &LossVars,
    lambda1: F,
    lambda2: F,
) -> LossReport<F> {
    let image_loss = g.scalar_value(vars.image);
    let depth_l1 = g.scalar_value(vars.depth_l1);
    let depth_aid = g.scalar_value(vars.depth_aid);
    let total = image_loss + depth_l1 * lambda1 + depth_aid * lambda2;
    LossReport {
        image_loss,
        depth_l1,
        depth_aid,
        total,
        lambda1,
        lambda2,
    }
}
