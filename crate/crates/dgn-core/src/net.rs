//! Network assembly: dual-branch trunk, depth-guided enhancement blocks,
//! residual groups and reconstruction heads.
//!
//! The image branch runs at `C` channels, the depth branch at `C/2`. Inside
//! each enhancement block the image feature splits into `X1` (inter-object
//! path, `C/2`) and `X2` (intra-object path, `C/2`); `X2` and the depth
//! feature are gated by DFE and split into query/value halves (`C/4` each).
//! Cross-branch spatial correlation injects the depth query into the image
//! branch and vice versa; channel correlation stays within its branch.
//!
//! Block output channels: `[CSC, SSC sum, X1'] = C/4 + C/4 + C/2 = C` on the
//! image side (linear `C -> C`), `C/4 + C/4 = C/2` on the depth side (linear
//! `C/2 -> C/2`), both added residually to the block input.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::inter::{sparse_nonlocal_attention, LshConfig};
use crate::intra::{
    csc_with_mode, dfe, ssc, window_merge, window_partition, window_schedule, DfeVars, RelPosBias,
};
use crate::rng::{rng_from_seed, trunc_normal, DgnRng};
use crate::{invalid_arg, invalid_config, Result, Scalar};

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Sr,
    Denoise,
}

/// Architectural and training-relevant hyperparameters.
///
/// Reference-scale values are `num_groups = 6`, `blocks_per_group = 6`, an
/// 8x8 base window with ratios `[0.5, 1, 2, 4, 6, 8]`; the default here is a
/// desk-scale configuration that exercises every code path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgnConfig {
    pub num_groups: usize,
    pub blocks_per_group: usize,
    pub channels: usize,
    pub base_window: usize,
    pub ratios: Vec<f64>,
    pub scale: usize,
    pub task: Task,
    pub depth_enabled: bool,
    pub lsh: LshConfig,
    pub lambda1: f64,
    pub lambda2: f64,
    /// A/B switch: compute channel self-correlation with the printed spatial
    /// operand order instead of the transposed (channel) reading.
    #[serde(default)]
    pub csc_spatial: bool,
    /// Denoising head predicts a residual added to the input.
    #[serde(default = "default_true")]
    pub denoise_input_skip: bool,
    /// Literal objective reading: affine-invariant depth term compares the
    /// depth prediction against the restored image instead of the depth
    /// target.
    #[serde(default)]
    pub aid_against_image: bool,
}

fn default_true() -> bool {
    true
}

impl Default for DgnConfig {
    fn default() -> Self {
        DgnConfig {
            num_groups: 2,
            blocks_per_group: 2,
            channels: 16,
            base_window: 8,
            ratios: vec![0.5, 1.0],
            scale: 4,
            task: Task::Sr,
            depth_enabled: true,
            lsh: LshConfig::default(),
            lambda1: 0.01,
            lambda2: 0.01,
            csc_spatial: false,
            denoise_input_skip: true,
            aid_against_image: false,
        }
    }
}

impl DgnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_groups == 0 || self.blocks_per_group == 0 {
            return invalid_config("config: num_groups and blocks_per_group must be >= 1");
        }
        if self.channels == 0 || !self.channels.is_multiple_of(4) {
            return invalid_config(format!(
                "config: channels {} must be a positive multiple of 4",
                self.channels
            ));
        }
        if self.ratios.len() != self.blocks_per_group {
            return invalid_config(format!(
                "config: {} ratios but {} blocks per group",
                self.ratios.len(),
                self.blocks_per_group
            ));
        }
        match (self.task, self.scale) {
            (Task::Sr, 4) | (Task::Denoise, 1) => {}
            (task, scale) => {
                return invalid_config(format!(
                    "config: task {task:?} with scale {scale} is not supported (sr needs 4, denoise needs 1)"
                ))
            }
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return invalid_config("config: loss weights must be non-negative");
        }
        self.lsh.validate()?;
        self.window_schedule()?;
        Ok(())
    }

    pub fn window_schedule(&self) -> Result<Vec<usize>> {
        window_schedule(self.base_window, &self.ratios)
    }
}

/// Named parameter store. Iteration order is the lexicographic name order,
/// which fixes the optimizer's update order and the checkpoint layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<F: Scalar> {
    map: BTreeMap<String, ArrayD<F>>,
}

impl<F: Scalar> Params<F> {
    pub fn empty() -> Self {
        Params {
            map: BTreeMap::new(),
        }
    }

    /// Initialize all parameters for `cfg`: truncated-normal (std 0.02)
    /// projections, zeroed biases, unit layer-norm gains, and zeroed final
    /// convolutions in each residual group so every group starts as the
    /// identity.
    pub fn init(cfg: &DgnConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut p = Params::empty();
        let c = cfg.channels;
        let ch = c / 2;

        p.add_conv(&mut rng, "img.shallow", c, 3, 3);
        if cfg.depth_enabled {
            p.add_conv(&mut rng, "depth.shallow", ch, 3, 3);
        }

        for gi in 0..cfg.num_groups {
            for mi in 0..cfg.blocks_per_group {
                let pre = format!("g{gi}.b{mi}.");
                p.add_dfe(&mut rng, &format!("{pre}dfe_i"), ch);
                p.add_matrix(&mut rng, &format!("{pre}inter.proj"), ch, ch);
                p.add_layer_norm(&format!("{pre}ln_t"), c);
                p.add_conv(&mut rng, &format!("{pre}lin_t"), c, c, 1);
                p.add_layer_norm(&format!("{pre}post_ln_i"), c);
                if cfg.depth_enabled {
                    p.add_dfe(&mut rng, &format!("{pre}dfe_d"), ch);
                    p.add_layer_norm(&format!("{pre}ln_td"), ch);
                    p.add_conv(&mut rng, &format!("{pre}lin_td"), ch, ch, 1);
                    p.add_layer_norm(&format!("{pre}post_ln_d"), ch);
                }
            }
            p.add_zero_conv(&format!("g{gi}.conv_i"), c, c, 3);
            if cfg.depth_enabled {
                p.add_zero_conv(&format!("g{gi}.conv_d"), ch, ch, 3);
            }
        }

        p.add_conv(&mut rng, "trunk.conv_i", c, c, 3);
        if cfg.depth_enabled {
            p.add_conv(&mut rng, "trunk.conv_d", ch, ch, 3);
        }

        let mut sizes = cfg.window_schedule()?;
        sizes.sort_unstable();
        sizes.dedup();
        for win in sizes {
            let rp = RelPosBias::new(win);
            let table = Self::draw(&mut rng, &[rp.table_len(), 1], 0.02);
            p.map.insert(format!("bias.w{win}.table"), table);
        }

        match cfg.task {
            Task::Sr => {
                p.add_conv(&mut rng, "recon_i.up0", 4 * c, c, 3);
                p.add_conv(&mut rng, "recon_i.up1", 4 * c, c, 3);
                p.add_conv(&mut rng, "recon_i.out", 3, c, 3);
                if cfg.depth_enabled {
                    p.add_conv(&mut rng, "recon_d.up0", 4 * ch, ch, 3);
                    p.add_conv(&mut rng, "recon_d.up1", 4 * ch, ch, 3);
                    p.add_conv(&mut rng, "recon_d.out", 3, ch, 3);
                }
            }
            Task::Denoise => {
                p.add_conv(&mut rng, "recon_i.out", 3, c, 3);
                if cfg.depth_enabled {
                    p.add_conv(&mut rng, "recon_d.out", 3, ch, 3);
                }
            }
        }
        Ok(p)
    }

    fn draw(rng: &mut DgnRng, shape: &[usize], std: f64) -> ArrayD<F> {
        ArrayD::from_shape_vec(
            IxDyn(shape),
            (0..shape.iter().product::<usize>())
                .map(|_| trunc_normal::<F>(rng, std))
                .collect(),
        )
        .unwrap()
    }

    fn add_conv(&mut self, rng: &mut DgnRng, name: &str, co: usize, ci: usize, k: usize) {
        self.map
            .insert(format!("{name}.w"), Self::draw(rng, &[co, ci, k, k], 0.02));
        self.map
            .insert(format!("{name}.b"), ArrayD::zeros(IxDyn(&[co])));
    }

    fn add_zero_conv(&mut self, name: &str, co: usize, ci: usize, k: usize) {
        self.map
            .insert(format!("{name}.w"), ArrayD::zeros(IxDyn(&[co, ci, k, k])));
        self.map
            .insert(format!("{name}.b"), ArrayD::zeros(IxDyn(&[co])));
    }

    fn add_matrix(&mut self, rng: &mut DgnRng, name: &str, rows: usize, cols: usize) {
        self.map
            .insert(name.to_string(), Self::draw(rng, &[rows, cols], 0.02));
    }

    fn add_layer_norm(&mut self, name: &str, c: usize) {
        self.map
            .insert(format!("{name}.g"), ArrayD::ones(IxDyn(&[c])));
        self.map
            .insert(format!("{name}.b"), ArrayD::zeros(IxDyn(&[c])));
    }

    fn add_dfe(&mut self, rng: &mut DgnRng, name: &str, c: usize) {
        let mid = c / 2;
        self.map
            .insert(format!("{name}.c1.w"), Self::draw(rng, &[mid, c, 1, 1], 0.02));
        self.map
            .insert(format!("{name}.c1.b"), ArrayD::zeros(IxDyn(&[mid])));
        self.map.insert(
            format!("{name}.c2.w"),
            Self::draw(rng, &[mid, mid, 3, 3], 0.02),
        );
        self.map
            .insert(format!("{name}.c2.b"), ArrayD::zeros(IxDyn(&[mid])));
        self.map
            .insert(format!("{name}.c3.w"), Self::draw(rng, &[c, mid, 1, 1], 0.02));
        self.map
            .insert(format!("{name}.c3.b"), ArrayD::zeros(IxDyn(&[c])));
        self.map
            .insert(format!("{name}.lin.w"), Self::draw(rng, &[c, c, 1, 1], 0.02));
        self.map
            .insert(format!("{name}.lin.b"), ArrayD::zeros(IxDyn(&[c])));
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<F>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<F>> {
        self.map.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<F>) {
        self.map.insert(name.into(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<F>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<F>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn total_len(&self) -> usize {
        self.map.values().map(|v| v.len()).sum()
    }

    /// Same names and shapes, all zeros (optimizer moment buffers).
    pub fn zeros_like(&self) -> Self {
        Params {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
                .collect(),
        }
    }

    /// Redraw every tensor from a truncated normal. Structural tests use this
    /// to probe gradient flow away from the zero-initialized group convs.
    pub fn randomize(&mut self, rng: &mut DgnRng, std: f64) {
        for v in self.map.values_mut() {
            for x in v.iter_mut() {
                *x = trunc_normal::<F>(rng, std);
            }
        }
    }

    /// Register every parameter on the tape.
    pub fn bind(&self, g: &mut Graph<F>) -> Binding {
        let vars = self
            .map
            .iter()
            .map(|(k, v)| (k.clone(), g.input(v.clone())))
            .collect();
        Binding { vars }
    }
}

/// Parameter name -> tape var mapping for one forward pass.
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    /// Wiring errors (a missing name) are bugs, not user input; panic.
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter `{name}`"))
    }

    pub fn names(&self) -> impl Iterator<Item = (&String, Var)> {
        self.vars.iter().map(|(k, v)| (k, *v))
    }

    /// Rebind one parameter to a different var (gradient checks feed chosen
    /// parameters as probe inputs this way).
    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    fn dfe_vars(&self, prefix: &str) -> DfeVars {
        DfeVars {
            c1_w: self.var(&format!("{prefix}.c1.w")),
            c1_b: self.var(&format!("{prefix}.c1.b")),
            c2_w: self.var(&format!("{prefix}.c2.w")),
            c2_b: self.var(&format!("{prefix}.c2.b")),
            c3_w: self.var(&format!("{prefix}.c3.w")),
            c3_b: self.var(&format!("{prefix}.c3.b")),
            lin_w: self.var(&format!("{prefix}.lin.w")),
            lin_b: self.var(&format!("{prefix}.lin.b")),
        }
    }
}

/// Image/depth feature pair flowing through the trunk.
#[derive(Clone, Copy, Debug)]
pub struct BranchState {
    pub f: Var,
    pub f_d: Option<Var>,
}

/// Records which window size each block actually used.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    /// (group, block, window size)
    pub window_sizes: Vec<(usize, usize, usize)>,
}

/// One depth-guided enhancement block.
///
/// `x: [B,C,h,w]`, `x_d: [B,C/2,h,w]` (present iff the depth branch is on).
/// Returns the updated pair.
#[allow(clippy::too_many_arguments)]
pub fn dse_forward<F: Scalar>(
    g: &mut Graph<F>,
    bind: &Binding,
    prefix: &str,
    cfg: &DgnConfig,
    win_size: usize,
    rp: &RelPosBias,
    x: Var,
    x_d: Option<Var>,
) -> Result<(Var, Option<Var>)> {
    let sh = g.shape(x).to_vec();
    if sh.len() != 4 {
        return invalid_arg("dse_forward: expected [B,C,h,w]");
    }
    let c = sh[1];
    if !c.is_multiple_of(4) {
        return invalid_config(format!("dse_forward: channels {c} violate the C/4 budget"));
    }
    let ch = c / 2;
    let cq = c / 4;
    if cfg.depth_enabled {
        let dsh = g.shape(x_d.expect("depth branch input required")).to_vec();
        if dsh[1] != ch || dsh[2] != sh[2] || dsh[3] != sh[3] {
            return invalid_config(format!(
                "dse_forward: depth feature {dsh:?} must be [B,{ch},{},{}]",
                sh[2], sh[3]
            ));
        }
    }

    let x1 = g.slice_axis_range(x, 1, 0, ch);
    let x2 = g.slice_axis_range(x, 1, ch, ch);
    let x2p = dfe(g, x2, &bind.dfe_vars(&format!("{prefix}dfe_i")))?;
    let q = g.slice_axis_range(x2p, 1, 0, cq);
    let v = g.slice_axis_range(x2p, 1, cq, cq);

    let mut lsh = cfg.lsh;
    lsh.seed = crate::rng::derive_seed(cfg.lsh.seed, "intersim");
    let x1p = sparse_nonlocal_attention(g, x1, bind.var(&format!("{prefix}inter.proj")), &lsh)?;

    let qw = window_partition(g, q, win_size)?;
    let vw = window_partition(g, v, win_size)?;
    let bias_table = bind.var(&format!("bias.w{win_size}.table"));
    let bias = rp.matrix(g, bias_table)?;

    let csc_img = csc_with_mode(g, &qw, &vw, cfg.csc_spatial)?;
    let ssc_img = ssc(g, &qw, &vw, Some(bias))?;

    let (ssc_sum, depth_parts) = if cfg.depth_enabled {
        let xd = x_d.expect("depth branch input required");
        let xdp = dfe(g, xd, &bind.dfe_vars(&format!("{prefix}dfe_d")))?;
        let qd = g.slice_axis_range(xdp, 1, 0, cq);
        let vd = g.slice_axis_range(xdp, 1, cq, cq);
        let qdw = window_partition(g, qd, win_size)?;
        let vdw = window_partition(g, vd, win_size)?;
        // cross-branch: depth query against image values
        let ssc_cross = ssc(g, &qdw, &vw, Some(bias))?;
        let summed = g.add(ssc_img.windows, ssc_cross.windows);
        let ssc_sum = crate::intra::WindowSet {
            windows: summed,
            meta: ssc_img.meta.clone(),
        };
        (ssc_sum, Some((qdw, vdw)))
    } else {
        (ssc_img, None)
    };

    let csc_m = window_merge(g, &csc_img)?;
    let ssc_m = window_merge(g, &ssc_sum)?;
    let t = g.concat(1, &[csc_m, ssc_m, x1p]); // C/4 + C/4 + C/2 = C
    let t_ln = g.layer_norm_ch(
        t,
        bind.var(&format!("{prefix}ln_t.g")),
        bind.var(&format!("{prefix}ln_t.b")),
        LN_EPS,
    );
    let t_lin = g.conv2d(
        t_ln,
        bind.var(&format!("{prefix}lin_t.w")),
        Some(bind.var(&format!("{prefix}lin_t.b"))),
        0,
    );
    let x_out = g.add(t_lin, x);

    let xd_out = if let Some((qdw, vdw)) = depth_parts {
        let xd = x_d.expect("depth branch input required");
        let ssc_dd = ssc(g, &qdw, &vdw, Some(bias))?;
        // cross-branch: image query against depth values
        let ssc_cross = ssc(g, &qw, &vdw, Some(bias))?;
        let summed = g.add(ssc_dd.windows, ssc_cross.windows);
        let ssc_d = crate::intra::WindowSet {
            windows: summed,
            meta: ssc_dd.meta.clone(),
        };
        let csc_dd = csc_with_mode(g, &qdw, &vdw, cfg.csc_spatial)?;
        let csc_dm = window_merge(g, &csc_dd)?;
        let ssc_dm = window_merge(g, &ssc_d)?;
        let td = g.concat(1, &[csc_dm, ssc_dm]); // C/4 + C/4 = C/2
        let td_ln = g.layer_norm_ch(
            td,
            bind.var(&format!("{prefix}ln_td.g")),
            bind.var(&format!("{prefix}ln_td.b")),
            LN_EPS,
        );
        let td_lin = g.conv2d(
            td_ln,
            bind.var(&format!("{prefix}lin_td.w")),
            Some(bind.var(&format!("{prefix}lin_td.b"))),
            0,
        );
        Some(g.add(td_lin, xd))
    } else {
        None
    };

    Ok((x_out, xd_out))
}

/// One residual group: `M` enhancement blocks (window sizes from the
/// schedule), a normalization after each block, a 3x3 conv per branch and a
/// residual connection from the group input.
#[allow(clippy::too_many_arguments)]
pub fn residual_group<F: Scalar>(
    g: &mut Graph<F>,
    bind: &Binding,
    cfg: &DgnConfig,
    group_idx: usize,
    schedule: &[usize],
    biases: &BTreeMap<usize, RelPosBias>,
    state: BranchState,
    mut trace: Option<&mut ForwardTrace>,
) -> Result<BranchState> {
    let sh = g.shape(state.f);
    if sh[2] == 0 || sh[3] == 0 {
        return invalid_arg("residual_group: non-positive spatial dims");
    }
    let mut f = state.f;
    let mut f_d = state.f_d;
    for (mi, &win) in schedule.iter().enumerate() {
        if let Some(t) = trace.as_deref_mut() {
            t.window_sizes.push((group_idx, mi, win));
        }
        let prefix = format!("g{group_idx}.b{mi}.");
        let rp = &biases[&win];
        let (nf, nfd) = dse_forward(g, bind, &prefix, cfg, win, rp, f, f_d)?;
        f = g.layer_norm_ch(
            nf,
            bind.var(&format!("{prefix}post_ln_i.g")),
            bind.var(&format!("{prefix}post_ln_i.b")),
            LN_EPS,
        );
        f_d = nfd.map(|d| g.layer_norm_ch(
                d,
                bind.var(&format!("{prefix}post_ln_d.g")),
                bind.var(&format!("{prefix}post_ln_d.b")),
                LN_EPS,
            ));
    }
    let conv_f = g.conv2d(
        f,
        bind.var(&format!("g{group_idx}.conv_i.w")),
        Some(bind.var(&format!("g{group_idx}.conv_i.b"))),
        1,
    );
    let out_f = g.add(conv_f, state.f);
    let out_fd = match (f_d, state.f_d) {
        (Some(d), Some(d0)) => {
            let conv_d = g.conv2d(
                d,
                bind.var(&format!("g{group_idx}.conv_d.w")),
                Some(bind.var(&format!("g{group_idx}.conv_d.b"))),
                1,
            );
            Some(g.add(conv_d, d0))
        }
        _ => None,
    };
    Ok(BranchState {
        f: out_f,
        f_d: out_fd,
    })
}

fn upsample_x4<F: Scalar>(
    g: &mut Graph<F>,
    bind: &Binding,
    prefix: &str,
    feat: Var,
) -> Var {
    let u = g.conv2d(
        feat,
        bind.var(&format!("{prefix}.up0.w")),
        Some(bind.var(&format!("{prefix}.up0.b"))),
        1,
    );
    let u = g.pixel_shuffle(u, 2);
    let u = g.conv2d(
        u,
        bind.var(&format!("{prefix}.up1.w")),
        Some(bind.var(&format!("{prefix}.up1.b"))),
        1,
    );
    let u = g.pixel_shuffle(u, 2);
    g.conv2d(
        u,
        bind.var(&format!("{prefix}.out.w")),
        Some(bind.var(&format!("{prefix}.out.b"))),
        1,
    )
}

/// Full forward pass: shallow conv per branch, `N` residual groups, trailing
/// conv plus long residual, then the task head. Inputs are `[B,3,H/s,W/s]`
/// in `[0,1]`; outputs are `[B,3,H,W]` for both branches. With the depth
/// branch disabled the depth input is ignored entirely and the depth output
/// is all zeros.
#[allow(clippy::too_many_arguments)]
pub fn dgn_forward<F: Scalar>(
    g: &mut Graph<F>,
    bind: &Binding,
    cfg: &DgnConfig,
    x_lq: Var,
    xd_lq: Var,
    mut trace: Option<&mut ForwardTrace>,
) -> Result<(Var, Var)> {
    cfg.validate()?;
    let sh = g.shape(x_lq).to_vec();
    if sh.len() != 4 || sh[1] != 3 {
        return invalid_arg(format!("dgn_forward: image input {sh:?} must be [B,3,h,w]"));
    }
    if cfg.depth_enabled {
        let dsh = g.shape(xd_lq).to_vec();
        if dsh != sh {
            return invalid_arg(format!(
                "dgn_forward: depth input {dsh:?} must match image input {sh:?}"
            ));
        }
    }
    let schedule = cfg.window_schedule()?;
    let mut biases = BTreeMap::new();
    for &win in &schedule {
        biases.entry(win).or_insert_with(|| RelPosBias::new(win));
    }

    let f = g.conv2d(
        x_lq,
        bind.var("img.shallow.w"),
        Some(bind.var("img.shallow.b")),
        1,
    );
    let f_d = if cfg.depth_enabled {
        Some(g.conv2d(
            xd_lq,
            bind.var("depth.shallow.w"),
            Some(bind.var("depth.shallow.b")),
            1,
        ))
    } else {
        None
    };

    let mut state = BranchState { f, f_d };
    for gi in 0..cfg.num_groups {
        state = residual_group(
            g,
            bind,
            cfg,
            gi,
            &schedule,
            &biases,
            state,
            trace.as_deref_mut(),
        )?;
    }

    let trunk = g.conv2d(
        state.f,
        bind.var("trunk.conv_i.w"),
        Some(bind.var("trunk.conv_i.b")),
        1,
    );
    let f_prime = g.add(trunk, f);
    let fd_prime = match (state.f_d, f_d) {
        (Some(d), Some(d0)) => {
            let t = g.conv2d(
                d,
                bind.var("trunk.conv_d.w"),
                Some(bind.var("trunk.conv_d.b")),
                1,
            );
            Some(g.add(t, d0))
        }
        _ => None,
    };

    let (y, y_d) = match cfg.task {
        Task::Sr => {
            let y = upsample_x4(g, bind, "recon_i", f_prime);
            let y_d = fd_prime.map(|d| upsample_x4(g, bind, "recon_d", d));
            (y, y_d)
        }
        Task::Denoise => {
            let mut y = g.conv2d(
                f_prime,
                bind.var("recon_i.out.w"),
                Some(bind.var("recon_i.out.b")),
                1,
            );
            if cfg.denoise_input_skip {
                y = g.add(y, x_lq);
            }
            let y_d = fd_prime.map(|d| {
                let mut yd = g.conv2d(
                    d,
                    bind.var("recon_d.out.w"),
                    Some(bind.var("recon_d.out.b")),
                    1,
                );
                if cfg.denoise_input_skip {
                    yd = g.add(yd, xd_lq);
                }
                yd
            });
            (y, y_d)
        }
    };

    let y_d = match y_d {
        Some(d) => d,
        None => {
            let out_sh = g.shape(y).to_vec();
            g.input(ArrayD::zeros(IxDyn(&out_sh)))
        }
    };
    Ok((y, y_d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{max_grad_rel_err, Graph};
    use crate::rng::{rng_from_seed, standard_normal};

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = rng_from_seed(seed);
        ArrayD::from_shape_vec(
            IxDyn(shape),
            (0..shape.iter().product::<usize>())
                .map(|_| standard_normal::<f64>(&mut rng))
                .collect(),
        )
        .unwrap()
    }

    fn tiny_cfg(channels: usize, depth: bool) -> DgnConfig {
        DgnConfig {
            num_groups: 1,
            blocks_per_group: 1,
            channels,
            base_window: 8,
            ratios: vec![1.0],
            depth_enabled: depth,
            lsh: LshConfig {
                num_rounds: 2,
                num_buckets: 4,
                chunk_size: 8,
                seed: 5,
                lookback: false,
            },
            ..DgnConfig::default()
        }
    }

    #[test]
    fn dse_shape_contract() {
        let cfg = tiny_cfg(32, true);
        let params = Params::<f64>::init(&cfg, 1).unwrap();
        let mut g = Graph::<f64>::new();
        let bind = params.bind(&mut g);
        let x = g.input(randn(&[1, 32, 16, 16], 2));
        let xd = g.input(randn(&[1, 16, 16, 16], 3));
        let rp = RelPosBias::new(8);
        let (y, yd) = dse_forward(&mut g, &bind, "g0.b0.", &cfg, 8, &rp, x, Some(xd)).unwrap();
        assert_eq!(g.shape(y), &[1, 32, 16, 16]);
        assert_eq!(g.shape(yd.unwrap()), &[1, 16, 16, 16]);
    }

    #[test]
    fn dse_channel_budget_enforced() {
        let cfg = tiny_cfg(32, true);
        let params = Params::<f64>::init(&cfg, 1).unwrap();
        let mut g = Graph::<f64>::new();
        let bind = params.bind(&mut g);
        let x = g.input(randn(&[1, 30, 8, 8], 4)); // not divisible by 4
        let xd = g.input(randn(&[1, 15, 8, 8], 5));
        let rp = RelPosBias::new(8);
        assert!(matches!(
            dse_forward(&mut g, &bind, "g0.b0.", &cfg, 8, &rp, x, Some(xd)),
            Err(crate::DgnError::InvalidConfig(_))
        ));
    }

    #[test]
    fn dse_grads_match_fd_on_inputs() {
        let mut cfg = tiny_cfg(8, true);
        cfg.ratios = vec![0.5]; // schedule [4] so the win-4 bias table exists
        let mut params = Params::<f64>::init(&cfg, 6).unwrap();
        let mut rng = rng_from_seed(7);
        params.randomize(&mut rng, 0.05);
        let x = randn(&[1, 8, 4, 4], 8);
        let xd = randn(&[1, 4, 4, 4], 9);
        let rp = RelPosBias::new(4);
        let err = max_grad_rel_err(&[x, xd], 1e-5, &|g, v| {
            let bind = params.bind(g);
            let (y, yd) =
                dse_forward(g, &bind, "g0.b0.", &cfg, 4, &rp, v[0], Some(v[1])).unwrap();
            let ya = g.abs(y);
            let yda = g.abs(yd.unwrap());
            let m1 = g.mean_all(ya);
            let m2 = g.mean_all(yda);
            g.add(m1, m2)
        });
        assert!(err <= 1e-4, "dse grad rel err {err}");
    }

    #[test]
    fn residual_group_is_identity_at_init() {
        // group convs start at zero, so the group residual makes it exact
        let cfg = tiny_cfg(8, true);
        let params = Params::<f64>::init(&cfg, 10).unwrap();
        let mut g = Graph::<f64>::new();
        let bind = params.bind(&mut g);
        let f = g.input(randn(&[1, 8, 20, 20], 11));
        let fd = g.input(randn(&[1, 4, 20, 20], 12));
        let schedule = cfg.window_schedule().unwrap();
        let mut biases = BTreeMap::new();
        biases.insert(8usize, RelPosBias::new(8));
        let state = BranchState { f, f_d: Some(fd) };
        let out = residual_group(&mut g, &bind, &cfg, 0, &schedule, &biases, state, None).unwrap();
        assert_eq!(g.value(out.f).to_owned(), g.value(f).to_owned());
        assert_eq!(
            g.value(out.f_d.unwrap()).to_owned(),
            g.value(fd).to_owned()
        );
        // and shapes are preserved regardless
        assert_eq!(g.shape(out.f), &[1, 8, 20, 20]);
    }

    #[test]
    fn residual_group_respects_window_schedule() {
        let mut cfg = tiny_cfg(8, true);
        cfg.num_groups = 3;
        cfg.blocks_per_group = 3;
        cfg.ratios = vec![0.5, 1.0, 2.0];
        let params = Params::<f64>::init(&cfg, 13).unwrap();
        let mut g = Graph::<f64>::new();
        let bind = params.bind(&mut g);
        let f = g.input(randn(&[1, 8, 8, 8], 14));
        let fd = g.input(randn(&[1, 4, 8, 8], 15));
        let schedule = cfg.window_schedule().unwrap();
        let mut biases = BTreeMap::new();
        for &w in &schedule {
            biases.entry(w).or_insert_with(|| RelPosBias::new(w));
        }
        let mut trace = ForwardTrace::default();
        let state = BranchState { f, f_d: Some(fd) };
        residual_group(
            &mut g,
            &bind,
            &cfg,
            2,
            &schedule,
            &biases,
            state,
            Some(&mut trace),
        )
        .unwrap();
        assert_eq!(
            trace.window_sizes,
            vec![(2, 0, 4), (2, 1, 8), (2, 2, 16)]
        );
    }

    fn forward_values(
        cfg: &DgnConfig,
        params: &Params<f64>,
        x: &ArrayD<f64>,
        xd: &ArrayD<f64>,
    ) -> (ArrayD<f64>, ArrayD<f64>) {
        let mut g = Graph::<f64>::new();
        let bind = params.bind(&mut g);
        let xv = g.input(x.clone());
        let xdv = g.input(xd.clone());
        let (y, yd) = dgn_forward(&mut g, &bind, cfg, xv, xdv, None).unwrap();
        (g.value(y).to_owned(), g.value(yd).to_owned())
    }

    #[test]
    fn sr_shape_contract_x4() {
        let cfg = tiny_cfg(8, true);
        let params = Params::<f64>::init(&cfg, 16).unwrap();
        let x = randn(&[1, 3, 16, 16], 17).mapv(f64::abs);
        let xd = randn(&[1, 3, 16, 16], 18).mapv(f64::abs);
        let (y, yd) = forward_values(&cfg, &params, &x, &xd);
        assert_eq!(y.shape(), &[1, 3, 64, 64]);
        assert_eq!(yd.shape(), &[1, 3, 64, 64]);
    }

    #[test]
    fn denoise_shape_contract() {
        let mut cfg = tiny_cfg(8, true);
        cfg.task = Task::Denoise;
        cfg.scale = 1;
        let params = Params::<f64>::init(&cfg, 19).unwrap();
        let x = randn(&[1, 3, 32, 32], 20);
        let xd = randn(&[1, 3, 32, 32], 21);
        let (y, yd) = forward_values(&cfg, &params, &x, &xd);
        assert_eq!(y.shape(), &[1, 3, 32, 32]);
        assert_eq!(yd.shape(), &[1, 3, 32, 32]);
    }

    #[test]
    fn non_rgb_input_rejected() {
        let cfg = tiny_cfg(8, true);
        let params = Params::<f64>::init(&cfg, 50).unwrap();
        let mut g = Graph::<f64>::new();
        let bind = params.bind(&mut g);
        let x = g.input(randn(&[1, 4, 8, 8], 51));
        let xd = g.input(randn(&[1, 4, 8, 8], 52));
        assert!(matches!(
            dgn_forward(&mut g, &bind, &cfg, x, xd, None),
            Err(crate::DgnError::InvalidArgument(_))
        ));
    }

    #[test]
    fn scale_task_mismatch_rejected() {
        let mut cfg = tiny_cfg(8, true);
        cfg.task = Task::Denoise; // scale stays 4
        assert!(matches!(
            cfg.validate(),
            Err(crate::DgnError::InvalidConfig(_))
        ));
    }

    #[test]
    fn depth_disabled_output_ignores_depth_input() {
        let cfg = tiny_cfg(8, false);
        let params = Params::<f64>::init(&cfg, 22).unwrap();
        let x = randn(&[1, 3, 8, 8], 23);
        let xd1 = randn(&[1, 3, 8, 8], 24);
        let xd2 = randn(&[1, 3, 8, 8], 25);
        let (y1, yd1) = forward_values(&cfg, &params, &x, &xd1);
        let (y2, _) = forward_values(&cfg, &params, &x, &xd2);
        assert_eq!(y1, y2, "image output must be exactly depth-invariant");
        assert!(yd1.iter().all(|&v| v == 0.0), "disabled depth output is zeros");
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg(8, true);
        let params = Params::<f64>::init(&cfg, 26).unwrap();
        let x = randn(&[2, 3, 8, 8], 27);
        let xd = randn(&[2, 3, 8, 8], 28);
        let (y1, yd1) = forward_values(&cfg, &params, &x, &xd);
        let (y2, yd2) = forward_values(&cfg, &params, &x, &xd);
        assert_eq!(y1, y2);
        assert_eq!(yd1, yd2);
    }

    #[test]
    fn long_residual_identity_with_zeroed_trunk() {
        // with the groups already identity at init, zeroing the trailing conv
        // makes f' = f in both branches
        let cfg = tiny_cfg(8, true);
        let mut params = Params::<f64>::init(&cfg, 29).unwrap();
        for name in ["trunk.conv_i.w", "trunk.conv_d.w"] {
            params.get_mut(name).unwrap().fill(0.0);
        }
        let mut g = Graph::<f64>::new();
        let bind = params.bind(&mut g);
        let x = g.input(randn(&[1, 3, 8, 8], 30));
        let xd = g.input(randn(&[1, 3, 8, 8], 31));
        let f = g.conv2d(x, bind.var("img.shallow.w"), Some(bind.var("img.shallow.b")), 1);
        let fd = g.conv2d(
            xd,
            bind.var("depth.shallow.w"),
            Some(bind.var("depth.shallow.b")),
            1,
        );
        let schedule = cfg.window_schedule().unwrap();
        let mut biases = BTreeMap::new();
        biases.insert(8usize, RelPosBias::new(8));
        let mut state = BranchState { f, f_d: Some(fd) };
        for gi in 0..cfg.num_groups {
            state =
                residual_group(&mut g, &bind, &cfg, gi, &schedule, &biases, state, None).unwrap();
        }
        let trunk = g.conv2d(
            state.f,
            bind.var("trunk.conv_i.w"),
            Some(bind.var("trunk.conv_i.b")),
            1,
        );
        let f_prime = g.add(trunk, f);
        assert_eq!(g.value(f_prime).to_owned(), g.value(f).to_owned());
        let trunk_d = g.conv2d(
            state.f_d.unwrap(),
            bind.var("trunk.conv_d.w"),
            Some(bind.var("trunk.conv_d.b")),
            1,
        );
        let fd_prime = g.add(trunk_d, fd);
        assert_eq!(g.value(fd_prime).to_owned(), g.value(fd).to_owned());
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let mut cfg = tiny_cfg(8, true);
        cfg.num_groups = 2;
        let mut params = Params::<f64>::init(&cfg, 32).unwrap();
        let mut rng = rng_from_seed(33);
        params.randomize(&mut rng, 0.05);
        let mut g = Graph::<f64>::new();
        let bind = params.bind(&mut g);
        let x = g.input(randn(&[1, 3, 8, 8], 34));
        let xd = g.input(randn(&[1, 3, 8, 8], 35));
        let (y, yd) = dgn_forward(&mut g, &bind, &cfg, x, xd, None).unwrap();
        let ya = g.abs(y);
        let yda = g.abs(yd);
        let m1 = g.mean_all(ya);
        let m2 = g.mean_all(yda);
        let loss = g.add(m1, m2);
        let grads = g.backward(loss);
        for (name, var) in bind.names() {
            let gr = grads
                .get(var)
                .unwrap_or_else(|| panic!("parameter `{name}` got no gradient"));
            let max = gr.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max > 0.0, "parameter `{name}` has an all-zero gradient");
        }
    }
}
