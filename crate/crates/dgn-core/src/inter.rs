//! Inter-object similarity mining: non-local attention over the whole feature
//! map, made tractable by spherical locality-sensitive hashing.
//!
//! Each position's feature vector is L2-normalized, rotated by a seeded random
//! matrix into `num_buckets/2` dimensions and assigned the argmax over the
//! concatenation `[r, -r]` (cross-polytope hashing). Positions are sorted by
//! bucket, the sorted sequence is cut into fixed-size chunks, and softmax
//! attention runs within each chunk (`Q = K = V =` the projected features).
//! Rounds are independent hash draws; their outputs are averaged in fixed
//! round order and added residually to the input.
//!
//! Bucket assignment is a function of the *input* features, not the learned
//! projection, so the assignment is stable under a parameter update and
//! carries no gradient of its own.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::rng::{derive_seed_n, rng_from_seed, standard_normal};
use crate::{invalid_arg, invalid_config, DgnError, Result, Scalar};

/// Positions the dense oracle refuses to exceed (quadratic blowup guard).
pub const DENSE_ORACLE_LIMIT: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LshConfig {
    pub num_rounds: usize,
    pub num_buckets: usize,
    pub chunk_size: usize,
    pub seed: u64,
    /// Let each chunk also attend to the keys of the previous chunk.
    #[serde(default)]
    pub lookback: bool,
}

impl Default for LshConfig {
    fn default() -> Self {
        LshConfig {
            num_rounds: 4,
            num_buckets: 16,
            chunk_size: 128,
            seed: 0,
            lookback: false,
        }
    }
}

impl LshConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_rounds == 0 {
            return invalid_config("lsh: num_rounds must be >= 1");
        }
        if self.num_buckets < 2 || !self.num_buckets.is_power_of_two() {
            return invalid_config(format!(
                "lsh: num_buckets {} must be a power of two >= 2",
                self.num_buckets
            ));
        }
        if self.chunk_size == 0 {
            return invalid_config("lsh: chunk_size must be >= 1");
        }
        Ok(())
    }
}

/// One round's bucket ids and the stable sort permutation over positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BucketAssignment {
    pub bucket_id: Vec<u32>,
    pub sort_order: Vec<usize>,
}

/// Cross-polytope spherical hash of `[num_positions, c]` features for one
/// round. Deterministic given `cfg.seed`; a zero-norm row goes to bucket 0.
pub fn slsh_hash<F: Scalar>(
    features: ArrayView2<F>,
    cfg: &LshConfig,
    round: usize,
) -> Result<BucketAssignment> {
    cfg.validate()?;
    if round >= cfg.num_rounds {
        return invalid_arg(format!(
            "slsh_hash: round {round} out of range ({} rounds)",
            cfg.num_rounds
        ));
    }
    let (n, c) = (features.nrows(), features.ncols());
    let half = cfg.num_buckets / 2;
    let mut rng = rng_from_seed(derive_seed_n(cfg.seed, round as u64));
    let mut rotation = Array2::<F>::zeros((c, half));
    for v in rotation.iter_mut() {
        *v = standard_normal::<F>(&mut rng);
    }

    let mut bucket_id = Vec::with_capacity(n);
    for p in 0..n {
        let row = features.row(p);
        let norm = row.iter().map(|&x| x * x).sum::<F>().sqrt();
        if norm == F::zero() {
            bucket_id.push(0u32);
            continue;
        }
        let mut best = 0usize;
        let mut best_score = F::neg_infinity();
        for j in 0..cfg.num_buckets {
            let col = j % half;
            let mut dot = F::zero();
            for k in 0..c {
                dot += row[k] / norm * rotation[[k, col]];
            }
            let score = if j < half { dot } else { -dot };
            // strict > keeps the lowest index on ties
            if score > best_score {
                best_score = score;
                best = j;
            }
        }
        bucket_id.push(best as u32);
    }

    let mut sort_order: Vec<usize> = (0..n).collect();
    sort_order.sort_by_key(|&i| (bucket_id[i], i));
    Ok(BucketAssignment {
        bucket_id,
        sort_order,
    })
}

/// Extract batch element `b` of `[B,C,H,W]` as a `[H*W, C]` var.
fn flatten_positions<F: Scalar>(g: &mut Graph<F>, x: Var, b: usize) -> Var {
    let sh = g.shape(x).to_vec();
    let (c, h, w) = (sh[1], sh[2], sh[3]);
    let hw = h * w;
    let mut idx = Vec::with_capacity(hw * c);
    for p in 0..hw {
        for ci in 0..c {
            idx.push((b * c + ci) * hw + p);
        }
    }
    g.gather(x, Arc::new(idx), &[hw, c])
}

/// Inverse of [`flatten_positions`]: `[H*W, C]` back to `[1,C,H,W]`.
fn unflatten_positions<F: Scalar>(
    g: &mut Graph<F>,
    flat: Var,
    c: usize,
    h: usize,
    w: usize,
) -> Var {
    let hw = h * w;
    let mut idx = Vec::with_capacity(c * hw);
    for ci in 0..c {
        for p in 0..hw {
            idx.push(p * c + ci);
        }
    }
    g.gather(flat, Arc::new(idx), &[1, c, h, w])
}

fn gather_rows<F: Scalar>(g: &mut Graph<F>, m: Var, order: &[usize]) -> Var {
    let sh = g.shape(m).to_vec();
    let c = sh[1];
    let mut idx = Vec::with_capacity(order.len() * c);
    for &r in order {
        for ci in 0..c {
            idx.push(r * c + ci);
        }
    }
    g.gather(m, Arc::new(idx), &[order.len(), c])
}

/// Softmax attention of `[ql, c]` queries over `[kl, c]` keys (= values),
/// returning the aggregated `[ql, c]` block and the softmax var.
fn block_attention<F: Scalar>(g: &mut Graph<F>, queries: Var, keys: Var, c: usize) -> (Var, Var) {
    let ql = g.shape(queries)[0];
    let kl = g.shape(keys)[0];
    let q3 = g.reshape(queries, &[1, ql, c]);
    let k3 = g.reshape(keys, &[1, kl, c]);
    let kt = g.transpose12(k3);
    let scores = g.bmm(q3, kt);
    let scores = g.scale(scores, F::of_f64(1.0 / (c as f64).sqrt()));
    let probs = g.softmax_last(scores);
    let out = g.bmm(probs, k3);
    (g.reshape(out, &[ql, c]), probs)
}

fn sparse_attention_impl<F: Scalar>(
    g: &mut Graph<F>,
    x: Var,
    proj_w: Var,
    cfg: &LshConfig,
    mut probes: Option<&mut Vec<Var>>,
) -> Result<Var> {
    cfg.validate()?;
    let sh = g.shape(x).to_vec();
    if sh.len() != 4 {
        return invalid_arg("sparse_nonlocal_attention: expected [B,C,H,W]");
    }
    let (bsz, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let psh = g.shape(proj_w).to_vec();
    if psh != [c, c] {
        return invalid_config(format!(
            "sparse_nonlocal_attention: projection {psh:?} must be [{c}, {c}]"
        ));
    }
    let n = h * w;
    let mut outs = Vec::with_capacity(bsz);
    for b in 0..bsz {
        let flat = flatten_positions(g, x, b);
        let z = g.matmul2(flat, proj_w);
        let feats: Array2<F> = g.value(flat).to_owned().into_dimensionality().unwrap();
        let mut round_outs = Vec::with_capacity(cfg.num_rounds);
        for round in 0..cfg.num_rounds {
            let assign = slsh_hash::<F>(feats.view(), cfg, round)?;
            let sorted = gather_rows(g, z, &assign.sort_order);
            let num_chunks = n.div_ceil(cfg.chunk_size);
            let mut chunk_outs = Vec::with_capacity(num_chunks);
            for ch in 0..num_chunks {
                let start = ch * cfg.chunk_size;
                let len = cfg.chunk_size.min(n - start);
                let queries = g.slice_axis_range(sorted, 0, start, len);
                let keys = if cfg.lookback && ch > 0 {
                    let prev_start = (ch - 1) * cfg.chunk_size;
                    g.slice_axis_range(sorted, 0, prev_start, start + len - prev_start)
                } else {
                    queries
                };
                let (out, probs) = block_attention(g, queries, keys, c);
                if let Some(p) = probes.as_deref_mut() {
                    p.push(probs);
                }
                chunk_outs.push(out);
            }
            let sorted_out = if chunk_outs.len() == 1 {
                chunk_outs[0]
            } else {
                g.concat(0, &chunk_outs)
            };
            let mut inverse = vec![0usize; n];
            for (sorted_pos, &orig) in assign.sort_order.iter().enumerate() {
                inverse[orig] = sorted_pos;
            }
            round_outs.push(gather_rows(g, sorted_out, &inverse));
        }
        let summed = g.add_n(&round_outs);
        let mean = g.scale(summed, F::of_f64(1.0 / cfg.num_rounds as f64));
        let res = g.add(flat, mean);
        outs.push(unflatten_positions(g, res, c, h, w));
    }
    Ok(if outs.len() == 1 {
        outs[0]
    } else {
        g.concat(0, &outs)
    })
}

/// Sparse non-local attention with residual connection. Output shape equals
/// input shape.
pub fn sparse_nonlocal_attention<F: Scalar>(
    g: &mut Graph<F>,
    x: Var,
    proj_w: Var,
    cfg: &LshConfig,
) -> Result<Var> {
    sparse_attention_impl(g, x, proj_w, cfg, None)
}

/// Same computation, additionally returning every within-chunk softmax var
/// (for row-stochasticity checks).
pub fn sparse_nonlocal_attention_probed<F: Scalar>(
    g: &mut Graph<F>,
    x: Var,
    proj_w: Var,
    cfg: &LshConfig,
) -> Result<(Var, Vec<Var>)> {
    let mut probes = Vec::new();
    let out = sparse_attention_impl(g, x, proj_w, cfg, Some(&mut probes))?;
    Ok((out, probes))
}

/// Exact softmax attention over all position pairs, plus residual. Companion
/// oracle for the sparse path; refuses more than [`DENSE_ORACLE_LIMIT`]
/// positions.
pub fn dense_nonlocal_oracle<F: Scalar>(g: &mut Graph<F>, x: Var, proj_w: Var) -> Result<Var> {
    let sh = g.shape(x).to_vec();
    if sh.len() != 4 {
        return invalid_arg("dense_nonlocal_oracle: expected [B,C,H,W]");
    }
    let (bsz, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let n = h * w;
    if n > DENSE_ORACLE_LIMIT {
        return Err(DgnError::OracleScaleExceeded {
            positions: n,
            limit: DENSE_ORACLE_LIMIT,
        });
    }
    let mut outs = Vec::with_capacity(bsz);
    for b in 0..bsz {
        let flat = flatten_positions(g, x, b);
        let z = g.matmul2(flat, proj_w);
        let (att, _) = block_attention(g, z, z, c);
        let res = g.add(flat, att);
        outs.push(unflatten_positions(g, res, c, h, w));
    }
    Ok(if outs.len() == 1 {
        outs[0]
    } else {
        g.concat(0, &outs)
    })
}
