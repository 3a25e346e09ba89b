//! Training harness: piecewise-constant halving schedule, Adam, a versioned
//! binary checkpoint container and the deterministic training loop.
//!
//! Reproducibility contract: every random decision flows through the single
//! ChaCha8 stream stored in [`TrainState`], optimizer updates walk parameters
//! in fixed name order, and checkpoints capture parameters, both moment
//! buffers and the exact generator state — so resuming from a checkpoint
//! continues the loss log bit-for-bit.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_batch, BatchCfg, TrainImage};
use crate::graph::Graph;
use crate::loss::{loss_report, total_loss, LossReport};
use crate::net::{dgn_forward, DgnConfig, Params};
use crate::rng::{rng_from_seed, DgnRng};
use crate::{invalid_arg, invalid_config, DgnError, Result, Scalar};

/// Reference-scale training length and the milestones where the rate halves.
pub const REFERENCE_MILESTONES: [usize; 4] = [250_000, 400_000, 450_000, 475_000];
pub const REFERENCE_TOTAL_ITERS: usize = 500_000;
pub const REFERENCE_BASE_LR: f64 = 3e-4;

/// Piecewise-constant schedule: `lr(i) = base * factor^(#milestones <= i)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
    pub total_iters: usize,
}

impl LrSchedule {
    pub fn new(
        base_lr: f64,
        milestones: Vec<usize>,
        factor: f64,
        total_iters: usize,
    ) -> Result<Self> {
        if total_iters == 0 {
            return invalid_config("schedule: total_iters must be >= 1");
        }
        for w in milestones.windows(2) {
            if w[0] >= w[1] {
                return invalid_config("schedule: milestones must be strictly increasing");
            }
        }
        if milestones.last().is_some_and(|&m| m >= total_iters) {
            return invalid_config("schedule: milestones must stay below total_iters");
        }
        Ok(LrSchedule {
            base_lr,
            milestones,
            factor,
            total_iters,
        })
    }

    /// Keep the reference schedule's shape at a different length: each
    /// milestone scales by `total_iters / 500k`, rounded down; collapsed or
    /// zero milestones are dropped.
    pub fn reference_shape(total_iters: usize, base_lr: f64) -> Result<Self> {
        let mut milestones: Vec<usize> = REFERENCE_MILESTONES
            .iter()
            .map(|&m| m * total_iters / REFERENCE_TOTAL_ITERS)
            .filter(|&m| m > 0 && m < total_iters)
            .collect();
        milestones.dedup();
        LrSchedule::new(base_lr, milestones, 0.5, total_iters)
    }

    pub fn lr_at(&self, iter: usize) -> Result<f64> {
        if iter >= self.total_iters {
            return invalid_arg(format!(
                "lr_at: iteration {iter} outside [0, {})",
                self.total_iters
            ));
        }
        let halvings = self.milestones.iter().filter(|&&m| m <= iter).count();
        Ok(self.base_lr * self.factor.powi(halvings as i32))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamCfg {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamCfg {
    fn default() -> Self {
        AdamCfg {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; moment buffers mirror the parameter map.
#[derive(Clone, Debug)]
pub struct Adam<F: Scalar> {
    pub cfg: AdamCfg,
    pub m: Params<F>,
    pub v: Params<F>,
    pub t: usize,
}

impl<F: Scalar> Adam<F> {
    pub fn new(params: &Params<F>, cfg: AdamCfg) -> Self {
        Adam {
            cfg,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// One update over every parameter, in name order. Parameters without a
    /// gradient this step (e.g. heads excluded from the loss) keep their
    /// value; their moments decay as if the gradient were zero.
    pub fn step(
        &mut self,
        params: &mut Params<F>,
        grads: &BTreeMap<String, ArrayD<F>>,
        lr: f64,
    ) {
        self.t += 1;
        let b1 = F::of_f64(self.cfg.beta1);
        let b2 = F::of_f64(self.cfg.beta2);
        let one = F::one();
        let corr1 = F::of_f64(1.0 - self.cfg.beta1.powi(self.t as i32));
        let corr2 = F::of_f64(1.0 - self.cfg.beta2.powi(self.t as i32));
        let lr = F::of_f64(lr);
        let eps = F::of_f64(self.cfg.eps);
        let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            let p = params.get_mut(&name).expect("param exists");
            let m = self.m.get_mut(&name).expect("moment exists");
            let v = self.v.get_mut(&name).expect("moment exists");
            let zero;
            let g = match grads.get(&name) {
                Some(g) => g,
                None => {
                    zero = ArrayD::<F>::zeros(p.raw_dim());
                    &zero
                }
            };
            for ((pi, mi), (vi, gi)) in p
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut().zip(g.iter()))
            {
                *mi = b1 * *mi + (one - b1) * *gi;
                *vi = b2 * *vi + (one - b2) * *gi * *gi;
                let mhat = *mi / corr1;
                let vhat = *vi / corr2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState<F: Scalar> {
    pub iteration: usize,
    pub params: Params<F>,
    pub adam: Adam<F>,
    pub rng: DgnRng,
    pub best_psnr: f64,
}

// ---- checkpoint container ---------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"DGNCKPT1";

#[derive(Serialize, Deserialize)]
struct RngStateRepr {
    seed_hex: String,
    word_pos: String,
    stream: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    role: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    dtype: String,
    iteration: usize,
    best_psnr: f64,
    adam: AdamCfg,
    adam_t: usize,
    rng: RngStateRepr,
    config: DgnConfig,
    tensors: Vec<TensorMeta>,
}

fn push_tensor<F: Scalar>(
    blob: &mut Vec<u8>,
    metas: &mut Vec<TensorMeta>,
    name: &str,
    role: &str,
    t: &ArrayD<F>,
) {
    let offset = blob.len();
    for v in t.iter() {
        v.write_le(blob);
    }
    metas.push(TensorMeta {
        name: name.to_string(),
        role: role.to_string(),
        shape: t.shape().to_vec(),
        offset,
        len: t.len() * F::BYTE_WIDTH,
    });
}

/// Serialize state + config. Writes to a temp file in the same directory and
/// renames, so an existing checkpoint is never corrupted by a failed write.
pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    state: &TrainState<F>,
    cfg: &DgnConfig,
) -> Result<()> {
    let mut blob = Vec::new();
    let mut metas = Vec::new();
    for (name, t) in state.params.iter() {
        push_tensor(&mut blob, &mut metas, name, "param", t);
    }
    for (name, t) in state.adam.m.iter() {
        push_tensor(&mut blob, &mut metas, name, "adam_m", t);
    }
    for (name, t) in state.adam.v.iter() {
        push_tensor(&mut blob, &mut metas, name, "adam_v", t);
    }
    let header = CheckpointHeader {
        version: 1,
        dtype: F::dtype_name().to_string(),
        iteration: state.iteration,
        best_psnr: state.best_psnr,
        adam: state.adam.cfg,
        adam_t: state.adam.t,
        rng: RngStateRepr {
            seed_hex: hex_encode(&state.rng.get_seed()),
            word_pos: state.rng.get_word_pos().to_string(),
            stream: state.rng.get_stream(),
        },
        config: cfg.clone(),
        tensors: metas,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| DgnError::Checkpoint(format!("header encode: {e}")))?;

    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|s| s.to_str()).unwrap_or("ckpt")
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(CKPT_MAGIC)?;
        f.write_all(&(header_json.len() as u64).to_le_bytes())?;
        f.write_all(&header_json)?;
        f.write_all(&blob)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> Result<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return Err(DgnError::Checkpoint("odd hex length".into()));
    }
    (0..s.len() / 2)
        .map(|i| {
            u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
                .map_err(|e| DgnError::Checkpoint(format!("bad hex: {e}")))
        })
        .collect()
}

fn read_tensor<F: Scalar>(blob: &[u8], meta: &TensorMeta) -> Result<ArrayD<F>> {
    let end = meta.offset + meta.len;
    if end > blob.len() {
        return Err(DgnError::Checkpoint(format!(
            "tensor `{}` extends past the data blob",
            meta.name
        )));
    }
    let raw = &blob[meta.offset..end];
    let count: usize = meta.shape.iter().product();
    if count * F::BYTE_WIDTH != meta.len {
        return Err(DgnError::Checkpoint(format!(
            "tensor `{}`: {} bytes for shape {:?}",
            meta.name, meta.len, meta.shape
        )));
    }
    let values: Vec<F> = raw
        .chunks_exact(F::BYTE_WIDTH)
        .map(|c| F::read_le(c))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&meta.shape), values)
        .map_err(|e| DgnError::Checkpoint(format!("tensor `{}`: {e}", meta.name)))
}

/// Load a checkpoint, validating dtype and every tensor shape against a
/// freshly constructed parameter set for the stored config.
pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<(TrainState<F>, DgnConfig)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != CKPT_MAGIC {
        return Err(DgnError::Checkpoint(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(DgnError::Checkpoint("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| DgnError::Checkpoint(format!("header decode: {e}")))?;
    if header.version != 1 {
        return Err(DgnError::Checkpoint(format!(
            "unsupported version {}",
            header.version
        )));
    }
    if header.dtype != F::dtype_name() {
        return Err(DgnError::Checkpoint(format!(
            "dtype {} in file, {} requested",
            header.dtype,
            F::dtype_name()
        )));
    }
    let blob = &bytes[16 + header_len..];

    let reference = Params::<F>::init(&header.config, 0)?;
    let mut params = Params::empty();
    let mut m = Params::empty();
    let mut v = Params::empty();
    for meta in &header.tensors {
        let t = read_tensor::<F>(blob, meta)?;
        match meta.role.as_str() {
            "param" => {
                let expect = reference.get(&meta.name).ok_or_else(|| {
                    DgnError::Checkpoint(format!("unknown parameter `{}`", meta.name))
                })?;
                if expect.shape() != t.shape() {
                    return Err(DgnError::Checkpoint(format!(
                        "parameter `{}`: shape {:?}, expected {:?}",
                        meta.name,
                        t.shape(),
                        expect.shape()
                    )));
                }
                params.insert(meta.name.clone(), t);
            }
            "adam_m" => m.insert(meta.name.clone(), t),
            "adam_v" => v.insert(meta.name.clone(), t),
            other => {
                return Err(DgnError::Checkpoint(format!("unknown tensor role `{other}`")))
            }
        }
    }
    if params.len() != reference.len() {
        return Err(DgnError::Checkpoint(format!(
            "checkpoint has {} parameters, config needs {}",
            params.len(),
            reference.len()
        )));
    }

    let seed_bytes = hex_decode(&header.rng.seed_hex)?;
    let seed: [u8; 32] = seed_bytes
        .try_into()
        .map_err(|_| DgnError::Checkpoint("rng seed must be 32 bytes".into()))?;
    let mut rng = DgnRng::from_seed(seed);
    rng.set_stream(header.rng.stream);
    let word_pos: u128 = header
        .rng
        .word_pos
        .parse()
        .map_err(|e| DgnError::Checkpoint(format!("rng word_pos: {e}")))?;
    rng.set_word_pos(word_pos);

    let adam = Adam {
        cfg: header.adam,
        m,
        v,
        t: header.adam_t,
    };
    Ok((
        TrainState {
            iteration: header.iteration,
            params,
            adam,
            rng,
            best_psnr: header.best_psnr,
        },
        header.config,
    ))
}

// ---- training loop ----------------------------------------------------------

#[derive(Clone, Debug)]
pub struct TrainOpts {
    pub total_iters: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub base_lr: f64,
    /// Explicit milestones; `None` keeps the reference shape scaled to
    /// `total_iters`.
    pub milestones: Option<Vec<usize>>,
    pub lr_factor: f64,
    pub adam: AdamCfg,
    pub seed: u64,
    pub augment: bool,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts {
            total_iters: 100,
            batch_size: 2,
            patch_size: 64,
            base_lr: REFERENCE_BASE_LR,
            milestones: None,
            lr_factor: 0.5,
            adam: AdamCfg::default(),
            seed: 0,
            augment: true,
            log_every: 1,
            checkpoint_every: 50,
            out_dir: PathBuf::from("runs/default"),
            resume: None,
        }
    }
}

pub struct TrainOutcome<F: Scalar> {
    pub state: TrainState<F>,
    pub schedule: LrSchedule,
    pub log_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub reports: Vec<LossReport<F>>,
}

pub fn build_schedule(opts: &TrainOpts) -> Result<LrSchedule> {
    match &opts.milestones {
        Some(ms) => LrSchedule::new(opts.base_lr, ms.clone(), opts.lr_factor, opts.total_iters),
        None => {
            let mut s = LrSchedule::reference_shape(opts.total_iters, opts.base_lr)?;
            s.factor = opts.lr_factor;
            Ok(s)
        }
    }
}

/// Run (or resume) training. Appends one log record per iteration:
/// `iter lr image_loss depth_l1 depth_aid total`.
pub fn train<F: Scalar>(
    cfg: &DgnConfig,
    dataset: &[TrainImage<F>],
    opts: &TrainOpts,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return invalid_arg("train: empty dataset");
    }
    let schedule = build_schedule(opts)?;
    std::fs::create_dir_all(&opts.out_dir)?;
    let log_path = opts.out_dir.join("train_log.txt");
    let ckpt_latest = opts.out_dir.join("checkpoint_latest.dgn");

    let mut state = match &opts.resume {
        Some(path) => {
            let (state, stored_cfg) = load_checkpoint::<F>(path)?;
            if &stored_cfg != cfg {
                return invalid_config("train: checkpoint config differs from requested config");
            }
            state
        }
        None => {
            let params = Params::<F>::init(cfg, opts.seed)?;
            let adam = Adam::new(&params, opts.adam);
            TrainState {
                iteration: 0,
                params,
                adam,
                rng: rng_from_seed(crate::rng::derive_seed(opts.seed, "train-loop")),
                // -1 sorts below any real PSNR (metric is capped at [0, 100])
                best_psnr: -1.0,
            }
        }
    };

    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    let batch_cfg = BatchCfg {
        batch_size: opts.batch_size,
        patch_size: opts.patch_size,
        scale: cfg.scale,
        augment: opts.augment,
    };

    let mut last_ckpt: Option<PathBuf> = opts.resume.clone();
    let mut reports = Vec::new();
    let lambda1 = F::of_f64(cfg.lambda1);
    let lambda2 = F::of_f64(cfg.lambda2);

    while state.iteration < opts.total_iters {
        let iter0 = state.iteration; // 0-based index of this step
        let lr = schedule.lr_at(iter0)?;
        let batch = sample_batch(dataset, &batch_cfg, &mut state.rng)?;

        let mut g = Graph::<F>::new();
        let bind = state.params.bind(&mut g);
        let lq = g.input(batch.lq.into_dyn());
        let lq_d = g.input(batch.lq_depth.into_dyn());
        let hq = g.input(batch.hq.into_dyn());
        let hq_d = g.input(batch.hq_depth.into_dyn());
        let (y, y_d) = dgn_forward(&mut g, &bind, cfg, lq, lq_d, None)?;
        let losses = total_loss(
            &mut g,
            y,
            hq,
            y_d,
            hq_d,
            lambda1,
            lambda2,
            cfg.aid_against_image,
        )?;
        let report = loss_report(&g, &losses, lambda1, lambda2);
        if !report.total.to_f64().is_finite() {
            return Err(DgnError::NanLoss {
                iter: iter0 + 1,
                last_checkpoint: last_ckpt
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "none".into()),
            });
        }

        let mut grads_by_var = g.backward(losses.total);
        let mut grads = BTreeMap::new();
        for (name, var) in bind.names() {
            if let Some(gr) = grads_by_var.take(var) {
                grads.insert(name.clone(), gr);
            }
        }
        state.adam.step(&mut state.params, &grads, lr);
        state.iteration = iter0 + 1;

        if state.iteration % opts.log_every == 0 || state.iteration == opts.total_iters {
            writeln!(
                log,
                "{} {} {} {} {} {}",
                state.iteration,
                lr,
                report.image_loss,
                report.depth_l1,
                report.depth_aid,
                report.total
            )?;
        }
        reports.push(report);

        if state.iteration % opts.checkpoint_every == 0 || state.iteration == opts.total_iters {
            let snap = opts
                .out_dir
                .join(format!("checkpoint_{:06}.dgn", state.iteration));
            save_checkpoint(&snap, &state, cfg)?;
            save_checkpoint(&ckpt_latest, &state, cfg)?;
            last_ckpt = Some(snap);
        }
    }
    log.flush()?;

    Ok(TrainOutcome {
        state,
        schedule,
        log_path,
        checkpoint_path: ckpt_latest,
        reports,
    })
}
