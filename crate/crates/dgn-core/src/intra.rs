//! Intra-object similarity mining: windowed correlation attention.
//!
//! A feature map is cut into non-overlapping `win_size x win_size` windows
//! (reflection-padded on the bottom/right edge so both dims divide evenly),
//! and two correlation aggregations run per window:
//!
//! * spatial self-correlation: `(Q V^T / sqrt(c) + B) V`, with `B` a learned
//!   relative positional bias shared by every window of the same size;
//! * channel self-correlation: `V (Q^T V / sqrt(area))`, correlating channels
//!   rather than positions.
//!
//! Neither uses softmax — raw correlation maps aggregate the values directly.
//! The dual-feature-extraction gate (`Conv(x) ⊙ L(x)`) feeds both.

use std::sync::Arc;

use crate::graph::{Graph, Var};
use crate::{invalid_arg, invalid_config, DgnError, Result, Scalar};

/// Bookkeeping for one partition: enough to merge exactly back.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowMeta {
    pub win_size: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub orig_h: usize,
    pub orig_w: usize,
    pub batch: usize,
    pub channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl WindowMeta {
    pub fn win_area(&self) -> usize {
        self.win_size * self.win_size
    }

    /// Windows per batch element times batch.
    pub fn num_windows(&self) -> usize {
        self.batch * self.grid_h * self.grid_w
    }
}

/// A partitioned feature map living on the tape: `windows` has shape
/// `[num_windows, win_area, channels]`.
#[derive(Clone, Debug)]
pub struct WindowSet {
    pub windows: Var,
    pub meta: WindowMeta,
}

/// Mirror an out-of-range coordinate back into `[0, n)` without repeating the
/// edge sample. Handles padding wider than the source extent.
fn mirror(t: usize, n: usize) -> usize {
    if t < n {
        return t;
    }
    if n == 1 {
        return 0;
    }
    let period = 2 * n - 2;
    let m = t % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Split `x: [B,C,H,W]` into non-overlapping windows, reflection-padding the
/// bottom/right edge to a multiple of `win_size`. Window order is row-major.
pub fn window_partition<F: Scalar>(
    g: &mut Graph<F>,
    x: Var,
    win_size: usize,
) -> Result<WindowSet> {
    if win_size == 0 {
        return invalid_arg("window_partition: win_size must be >= 1");
    }
    let sh = g.shape(x).to_vec();
    if sh.len() != 4 || sh[2] == 0 || sh[3] == 0 {
        return invalid_arg(format!(
            "window_partition: expected [B,C,H,W] with positive spatial dims, got {sh:?}"
        ));
    }
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let grid_h = h.div_ceil(win_size);
    let grid_w = w.div_ceil(win_size);
    let (ph, pw) = (grid_h * win_size - h, grid_w * win_size - w);
    let area = win_size * win_size;
    let num_windows = b * grid_h * grid_w;

    let mut idx = Vec::with_capacity(num_windows * area * c);
    for bi in 0..b {
        for wy in 0..grid_h {
            for wx in 0..grid_w {
                for iy in 0..win_size {
                    for ix in 0..win_size {
                        let sy = mirror(wy * win_size + iy, h);
                        let sx = mirror(wx * win_size + ix, w);
                        for ci in 0..c {
                            idx.push(((bi * c + ci) * h + sy) * w + sx);
                        }
                    }
                }
            }
        }
    }
    let windows = g.gather(x, Arc::new(idx), &[num_windows, area, c]);
    Ok(WindowSet {
        windows,
        meta: WindowMeta {
            win_size,
            pad_h: ph,
            pad_w: pw,
            orig_h: h,
            orig_w: w,
            batch: b,
            channels: c,
            grid_h,
            grid_w,
        },
    })
}

/// Reassemble a [`WindowSet`] into `[B,C,orig_h,orig_w]`, dropping padding.
pub fn window_merge<F: Scalar>(g: &mut Graph<F>, ws: &WindowSet) -> Result<Var> {
    let m = &ws.meta;
    let sh = g.shape(ws.windows).to_vec();
    let expect = [m.num_windows(), m.win_area(), m.channels];
    if sh != expect {
        return Err(DgnError::CorruptWindowSet(format!(
            "windows shape {sh:?} does not match recorded dims {expect:?}"
        )));
    }
    if m.grid_h * m.win_size != m.orig_h + m.pad_h || m.grid_w * m.win_size != m.orig_w + m.pad_w {
        return Err(DgnError::CorruptWindowSet(
            "grid/pad bookkeeping is inconsistent".into(),
        ));
    }
    let (b, c, h, w) = (m.batch, m.channels, m.orig_h, m.orig_w);
    let (win, gw) = (m.win_size, m.grid_w);
    let area = m.win_area();
    let mut idx = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let n = (bi * m.grid_h + y / win) * gw + x / win;
                    let a = (y % win) * win + (x % win);
                    idx.push((n * area + a) * c + ci);
                }
            }
        }
    }
    Ok(g.gather(ws.windows, Arc::new(idx), &[b, c, h, w]))
}

/// Relative positional bias for one window size: a learned table with one row
/// per distinct (dy,dx) offset and an index mapping each position pair to its
/// row. The bias matrix depends only on relative offsets, so it is identical
/// for every window wherever it was cut from.
#[derive(Clone, Debug)]
pub struct RelPosBias {
    pub win_size: usize,
    pub num_heads: usize,
    index: Arc<Vec<usize>>,
}

impl RelPosBias {
    pub fn new(win_size: usize) -> Self {
        let area = win_size * win_size;
        let span = 2 * win_size - 1;
        let mut index = Vec::with_capacity(area * area);
        for p in 0..area {
            let (py, px) = (p / win_size, p % win_size);
            for q in 0..area {
                let (qy, qx) = (q / win_size, q % win_size);
                let dy = py as isize - qy as isize + win_size as isize - 1;
                let dx = px as isize - qx as isize + win_size as isize - 1;
                index.push(dy as usize * span + dx as usize);
            }
        }
        RelPosBias {
            win_size,
            num_heads: 1,
            index: Arc::new(index),
        }
    }

    pub fn table_len(&self) -> usize {
        let span = 2 * self.win_size - 1;
        span * span
    }

    pub fn index(&self) -> &[usize] {
        &self.index
    }

    /// Expand the table (`[(2w-1)^2, num_heads]`, single head) into the
    /// `[area, area]` bias matrix on the tape.
    pub fn matrix<F: Scalar>(&self, g: &mut Graph<F>, table: Var) -> Result<Var> {
        let sh = g.shape(table).to_vec();
        if sh != [self.table_len(), self.num_heads] {
            return invalid_arg(format!(
                "bias table shape {sh:?}, expected [{}, {}]",
                self.table_len(),
                self.num_heads
            ));
        }
        let area = self.win_size * self.win_size;
        // single head: table column 0
        let v = g.gather(table, Arc::clone(&self.index), &[area * area]);
        Ok(g.reshape(v, &[area, area]))
    }
}

fn check_pair(q: &WindowSet, v: &WindowSet, op: &str) -> Result<()> {
    if q.meta.win_size != v.meta.win_size
        || q.meta.num_windows() != v.meta.num_windows()
        || q.meta.channels != v.meta.channels
    {
        return invalid_arg(format!(
            "{op}: window sets disagree (win {} vs {}, n {} vs {}, c {} vs {})",
            q.meta.win_size,
            v.meta.win_size,
            q.meta.num_windows(),
            v.meta.num_windows(),
            q.meta.channels,
            v.meta.channels
        ));
    }
    Ok(())
}

/// Spatial self-correlation: per window `(Q V^T / sqrt(c) + B) V`.
/// `bias`, when given, must be an `[area, area]` var.
pub fn ssc<F: Scalar>(
    g: &mut Graph<F>,
    q: &WindowSet,
    v: &WindowSet,
    bias: Option<Var>,
) -> Result<WindowSet> {
    check_pair(q, v, "ssc")?;
    let c = q.meta.channels;
    let area = q.meta.win_area();
    if let Some(b) = bias {
        let sh = g.shape(b);
        if sh != [area, area] {
            return invalid_arg(format!("ssc: bias shape {sh:?}, expected [{area}, {area}]"));
        }
    }
    let vt = g.transpose12(v.windows);
    let scores = g.bmm(q.windows, vt);
    let mut scores = g.scale(scores, F::of_f64(1.0 / (c as f64).sqrt()));
    if let Some(b) = bias {
        scores = g.add_bcast0(scores, b);
    }
    let out = g.bmm(scores, v.windows);
    Ok(WindowSet {
        windows: out,
        meta: q.meta.clone(),
    })
}

/// Channel self-correlation: per window `V (Q^T V / sqrt(area))`, correlating
/// channels. `spatial_mode` switches to the spatial operand order
/// `(Q V^T / sqrt(area)) V`, which correlates positions instead.
pub fn csc_with_mode<F: Scalar>(
    g: &mut Graph<F>,
    q: &WindowSet,
    v: &WindowSet,
    spatial_mode: bool,
) -> Result<WindowSet> {
    check_pair(q, v, "csc")?;
    let area = q.meta.win_area();
    let inv = F::of_f64(1.0 / (area as f64).sqrt());
    let out = if spatial_mode {
        let vt = g.transpose12(v.windows);
        let scores = g.bmm(q.windows, vt);
        let scores = g.scale(scores, inv);
        g.bmm(scores, v.windows)
    } else {
        let qt = g.transpose12(q.windows);
        let m = g.bmm(qt, v.windows); // [n, c, c]
        let m = g.scale(m, inv);
        g.bmm(v.windows, m)
    };
    Ok(WindowSet {
        windows: out,
        meta: q.meta.clone(),
    })
}

/// Channel self-correlation (default transposed-correlation reading).
pub fn csc<F: Scalar>(g: &mut Graph<F>, q: &WindowSet, v: &WindowSet) -> Result<WindowSet> {
    csc_with_mode(g, q, v, false)
}

/// Parameters of one dual-feature-extraction gate. The conv branch is a
/// bottleneck (1x1 reduce to half, 3x3, 1x1 expand back); the linear branch
/// is a per-pixel projection. Both are channel-preserving.
#[derive(Clone, Copy, Debug)]
pub struct DfeVars {
    pub c1_w: Var,
    pub c1_b: Var,
    pub c2_w: Var,
    pub c2_b: Var,
    pub c3_w: Var,
    pub c3_b: Var,
    pub lin_w: Var,
    pub lin_b: Var,
}

/// Gated feature extraction: `Conv(x) ⊙ L(x)`.
pub fn dfe<F: Scalar>(g: &mut Graph<F>, x: Var, p: &DfeVars) -> Result<Var> {
    let c_in = {
        let sh = g.shape(x);
        if sh.len() != 4 {
            return invalid_arg("dfe: expected [B,C,H,W]");
        }
        sh[1]
    };
    let conv_out = g.shape(p.c3_w)[0];
    let lin_out = g.shape(p.lin_w)[0];
    if conv_out != lin_out {
        return invalid_config(format!(
            "dfe: conv branch emits {conv_out} channels but linear branch emits {lin_out}"
        ));
    }
    if conv_out != c_in {
        return invalid_config(format!(
            "dfe: branches must be channel-preserving ({c_in} in, {conv_out} out)"
        ));
    }
    let h1 = g.conv2d(x, p.c1_w, Some(p.c1_b), 0);
    let h2 = g.conv2d(h1, p.c2_w, Some(p.c2_b), 1);
    let conv_path = g.conv2d(h2, p.c3_w, Some(p.c3_b), 0);
    let lin_path = g.conv2d(x, p.lin_w, Some(p.lin_b), 0);
    Ok(g.mul(conv_path, lin_path))
}

/// Per-block window sizes within one residual group: `base * ratio` for each
/// ratio, every product required to be a whole number of pixels.
pub fn window_schedule(base: usize, ratios: &[f64]) -> Result<Vec<usize>> {
    if base < 2 {
        return invalid_config(format!("window schedule: base {base} must be >= 2"));
    }
    let mut out = Vec::with_capacity(ratios.len());
    for &r in ratios {
        if r <= 0.0 {
            return invalid_config(format!("window schedule: ratio {r} must be positive"));
        }
        let v = base as f64 * r;
        let rounded = v.round();
        if (v - rounded).abs() > 1e-9 || rounded < 1.0 {
            return invalid_config(format!(
                "window schedule: base {base} * ratio {r} is not a whole window size"
            ));
        }
        out.push(rounded as usize);
    }
    Ok(out)
}
