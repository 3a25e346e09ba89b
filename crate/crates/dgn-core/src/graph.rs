//! Reverse-mode autodiff tape over dynamic-rank `ndarray` arrays.
//!
//! A [`Graph`] is a define-by-run tape: every op records its output value,
//! its parent [`Var`]s and a closure producing the parents' gradients from
//! the output gradient. [`Graph::backward`] walks the tape once in reverse
//! creation order, so accumulation order (and therefore the floating-point
//! result) is fixed — two identical forward passes produce bit-identical
//! gradients.
//!
//! The op set is deliberately small; structural ops (window partition, pixel
//! shuffle, sorting by LSH bucket, padding, cropping) are all expressed as a
//! single flat [`Graph::gather`] whose backward is scatter-add.

// Indexed loops in the numeric kernels below mirror the math; iterator
// rewrites obscure the stencil arithmetic.
#![allow(clippy::needless_range_loop)]

use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArcArray, Array2, ArrayD, ArrayView2, ArrayViewD, Axis, Ix2, IxDyn};

use crate::Scalar;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

type Value<F> = ArcArray<F, IxDyn>;
type BackFn<F> = Box<dyn Fn(&ArrayD<F>) -> Vec<ArrayD<F>>>;

struct Node<F: Scalar> {
    value: Value<F>,
    parents: Vec<Var>,
    backward: Option<BackFn<F>>,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

/// Gradients keyed by [`Var`]. Interior-node gradients are dropped as soon as
/// they have been propagated; leaf (input/parameter) gradients are retained.
pub struct Grads<F: Scalar> {
    slots: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<F>> {
        self.slots.get_mut(v.0).and_then(|s| s.take())
    }
}

fn as2<F: Scalar>(a: &ArrayD<F>) -> ArrayView2<'_, F> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 value")
}

fn matmul2_raw<F: Scalar>(a: ArrayView2<F>, b: ArrayView2<F>) -> Array2<F> {
    let mut out = Array2::<F>::zeros((a.nrows(), b.ncols()));
    general_mat_mul(F::one(), &a, &b, F::zero(), &mut out);
    out
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<F>, parents: Vec<Var>, backward: Option<BackFn<F>>) -> Var {
        self.nodes.push(Node {
            value: value.into_shared(),
            parents,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Register a leaf (input or parameter).
    pub fn input(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, vec![], None)
    }

    /// 0-d leaf.
    pub fn input_scalar(&mut self, value: F) -> Var {
        self.input(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub fn value(&self, v: Var) -> ArrayViewD<'_, F> {
        self.nodes[v.0].value.view()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of a 0-d node.
    pub fn scalar_value(&self, v: Var) -> F {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.ndim(), 0, "scalar_value on non-scalar node");
        *val.first().expect("non-empty 0-d array")
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let out = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let out = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| vec![g.clone(), g.mapv(|x| -x)])),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let out = &av * &bv;
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| vec![g * &bv, g * &av])),
        )
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(out, vec![a], Some(Box::new(move |g| vec![g.mapv(|x| x * c)])))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let av = self.nodes[a.0].value.clone();
        let out = av.mapv(|x| x.abs());
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut dx = g.clone();
                dx.zip_mut_with(&av, |gi, &xi| {
                    *gi = if xi > F::zero() {
                        *gi
                    } else if xi < F::zero() {
                        -*gi
                    } else {
                        F::zero()
                    }
                });
                vec![dx]
            })),
        )
    }

    /// Sum of several same-shaped vars.
    pub fn add_n(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let mut acc = vars[0];
        for v in &vars[1..] {
            acc = self.add(acc, *v);
        }
        acc
    }

    // ---- scalar-tensor broadcasts ---------------------------------------

    /// `a - s` with `s` a 0-d var broadcast over `a`.
    pub fn sub_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar_value(s);
        let out = self.nodes[a.0].value.mapv(|x| x - sv);
        self.push(
            out,
            vec![a, s],
            Some(Box::new(move |g| {
                let total = -g.iter().copied().sum::<F>();
                vec![g.clone(), ArrayD::from_elem(IxDyn(&[]), total)]
            })),
        )
    }

    /// `a / s` with `s` a 0-d var.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Var {
        let av = self.nodes[a.0].value.clone();
        let sv = self.scalar_value(s);
        let out = av.mapv(|x| x / sv);
        self.push(
            out,
            vec![a, s],
            Some(Box::new(move |g| {
                let da = g.mapv(|x| x / sv);
                let ds = -g
                    .iter()
                    .zip(av.iter())
                    .map(|(&gi, &ai)| gi * ai)
                    .sum::<F>()
                    / (sv * sv);
                vec![da, ArrayD::from_elem(IxDyn(&[]), ds)]
            })),
        )
    }

    /// `a * s` with `s` a 0-d var.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let av = self.nodes[a.0].value.clone();
        let sv = self.scalar_value(s);
        let out = av.mapv(|x| x * sv);
        self.push(
            out,
            vec![a, s],
            Some(Box::new(move |g| {
                let da = g.mapv(|x| x * sv);
                let ds = g
                    .iter()
                    .zip(av.iter())
                    .map(|(&gi, &ai)| gi * ai)
                    .sum::<F>();
                vec![da, ArrayD::from_elem(IxDyn(&[]), ds)]
            })),
        )
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.iter().copied().sum::<F>();
        let shape: Vec<usize> = self.shape(a).to_vec();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), total),
            vec![a],
            Some(Box::new(move |g| {
                let gv = *g.first().expect("0-d grad");
                vec![ArrayD::from_elem(IxDyn(&shape), gv)]
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let s = self.sum_all(a);
        self.scale(s, F::of_f64(1.0 / n as f64))
    }

    // ---- linear algebra ---------------------------------------------------

    /// `[p,q] x [q,r] -> [p,r]`.
    pub fn matmul2(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        assert_eq!(av.ndim(), 2);
        assert_eq!(bv.ndim(), 2);
        assert_eq!(av.shape()[1], bv.shape()[0], "matmul2: inner dim mismatch");
        let out = matmul2_raw(
            av.view().into_dimensionality::<Ix2>().unwrap(),
            bv.view().into_dimensionality::<Ix2>().unwrap(),
        )
        .into_dyn();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let da = matmul2_raw(g2, bv.view().into_dimensionality::<Ix2>().unwrap().reversed_axes());
                let db = matmul2_raw(av.view().into_dimensionality::<Ix2>().unwrap().reversed_axes(), g2);
                vec![da.into_dyn(), db.into_dyn()]
            })),
        )
    }

    /// Batched matmul: `[n,p,q] x [n,q,r] -> [n,p,r]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        assert_eq!(av.ndim(), 3);
        assert_eq!(bv.ndim(), 3);
        let (n, p, q) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (nb, qb, r) = (bv.shape()[0], bv.shape()[1], bv.shape()[2]);
        assert_eq!(n, nb, "bmm: batch mismatch");
        assert_eq!(q, qb, "bmm: inner dim mismatch");
        let mut out = ArrayD::<F>::zeros(IxDyn(&[n, p, r]));
        for i in 0..n {
            let ai = av.index_axis(Axis(0), i);
            let bi = bv.index_axis(Axis(0), i);
            let mut oi = out.index_axis_mut(Axis(0), i);
            let mut o2 = oi.view_mut().into_dimensionality::<Ix2>().unwrap();
            general_mat_mul(
                F::one(),
                &ai.into_dimensionality::<Ix2>().unwrap(),
                &bi.into_dimensionality::<Ix2>().unwrap(),
                F::zero(),
                &mut o2,
            );
        }
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let mut da = ArrayD::<F>::zeros(IxDyn(&[n, p, q]));
                let mut db = ArrayD::<F>::zeros(IxDyn(&[n, q, r]));
                for i in 0..n {
                    let gi = g
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    let ai = av
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    let bi = bv
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    {
                        let mut d2 = da
                            .index_axis_mut(Axis(0), i)
                            .into_dimensionality::<Ix2>()
                            .unwrap();
                        general_mat_mul(F::one(), &gi, &bi.reversed_axes(), F::zero(), &mut d2);
                    }
                    {
                        let mut d2 = db
                            .index_axis_mut(Axis(0), i)
                            .into_dimensionality::<Ix2>()
                            .unwrap();
                        general_mat_mul(F::one(), &ai.reversed_axes(), &gi, F::zero(), &mut d2);
                    }
                }
                vec![da, db]
            })),
        )
    }

    /// Swap the last two axes of a rank-3 var.
    pub fn transpose12(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.ndim(), 3);
        let out = av
            .view()
            .permuted_axes(IxDyn(&[0, 2, 1]))
            .as_standard_layout()
            .to_owned();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![g
                    .view()
                    .permuted_axes(IxDyn(&[0, 2, 1]))
                    .as_standard_layout()
                    .to_owned()]
            })),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let av = self.nodes[a.0].value.as_standard_layout().to_owned();
        let q = *av.shape().last().expect("softmax on rank >= 1");
        let mut out = av.clone();
        {
            let flat = out.as_slice_mut().expect("standard layout");
            for row in flat.chunks_mut(q) {
                let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                let mut sum = F::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
        }
        let sv = out.clone().into_shared();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut dx = g.as_standard_layout().to_owned();
                let s = sv.as_standard_layout();
                let sf = s.as_slice().unwrap();
                let df = dx.as_slice_mut().unwrap();
                for (drow, srow) in df.chunks_mut(q).zip(sf.chunks(q)) {
                    let dot = drow
                        .iter()
                        .zip(srow.iter())
                        .map(|(&d, &s)| d * s)
                        .sum::<F>();
                    for (d, &s) in drow.iter_mut().zip(srow.iter()) {
                        *d = s * (*d - dot);
                    }
                }
                vec![dx]
            })),
        )
    }

    // ---- structural ops ---------------------------------------------------

    /// Flat gather: `out.flat[i] = a.flat[idx[i]]`. Backward is scatter-add,
    /// so duplicated indices accumulate.
    pub fn gather(&mut self, a: Var, idx: Arc<Vec<usize>>, out_shape: &[usize]) -> Var {
        let av = self.nodes[a.0].value.clone();
        let src = av.as_standard_layout().to_owned();
        let flat = src.as_slice().expect("standard layout");
        let out_len: usize = out_shape.iter().product();
        assert_eq!(idx.len(), out_len, "gather: index/output length mismatch");
        let data: Vec<F> = idx.iter().map(|&i| flat[i]).collect();
        let out = ArrayD::from_shape_vec(IxDyn(out_shape), data).unwrap();
        let src_shape: Vec<usize> = av.shape().to_vec();
        let idx_b = Arc::clone(&idx);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut dx = vec![F::zero(); src_shape.iter().product()];
                let gs = g.as_standard_layout().to_owned();
                let gf = gs.as_slice().unwrap();
                for (o, &i) in idx_b.iter().enumerate() {
                    dx[i] += gf[o];
                }
                vec![ArrayD::from_shape_vec(IxDyn(&src_shape), dx).unwrap()]
            })),
        )
    }

    /// Pick one element as a 0-d var.
    pub fn gather_scalar(&mut self, a: Var, flat_idx: usize) -> Var {
        let v = self.gather(a, Arc::new(vec![flat_idx]), &[1]);
        self.reshape(v, &[])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let av = &self.nodes[a.0].value;
        let old: Vec<usize> = av.shape().to_vec();
        assert_eq!(
            av.len(),
            shape.iter().product::<usize>(),
            "reshape: element count mismatch"
        );
        let out = av
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![g
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&old))
                    .unwrap()]
            })),
        )
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<ArrayViewD<F>> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views)
            .expect("concat: incompatible shapes")
            .as_standard_layout()
            .to_owned();
        let sizes: Vec<usize> = parts
            .iter()
            .map(|v| self.shape(*v)[axis])
            .collect();
        self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |g| {
                let mut grads = Vec::with_capacity(sizes.len());
                let mut start = 0;
                for &sz in &sizes {
                    let sl = g
                        .slice_axis(Axis(axis), ndarray::Slice::from(start..start + sz))
                        .as_standard_layout()
                        .to_owned();
                    grads.push(sl);
                    start += sz;
                }
                grads
            })),
        )
    }

    pub fn slice_axis_range(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let av = self.nodes[a.0].value.clone();
        let out = av
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .as_standard_layout()
            .to_owned();
        let full: Vec<usize> = av.shape().to_vec();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut dx = ArrayD::<F>::zeros(IxDyn(&full));
                dx.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                    .assign(g);
                vec![dx]
            })),
        )
    }

    /// `a + b` with `b` broadcast along axis 0 (`b.shape() == a.shape()[1..]`).
    pub fn add_bcast0(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        assert_eq!(&av.shape()[1..], bv.shape(), "add_bcast0: shape mismatch");
        let chunk = bv.len();
        let mut out = av.as_standard_layout().to_owned();
        {
            let bs = bv.as_standard_layout().to_owned();
            let bf = bs.as_slice().unwrap();
            for row in out.as_slice_mut().unwrap().chunks_mut(chunk) {
                for (o, &bi) in row.iter_mut().zip(bf.iter()) {
                    *o += bi;
                }
            }
        }
        let bshape: Vec<usize> = bv.shape().to_vec();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let gs = g.as_standard_layout().to_owned();
                let gf = gs.as_slice().unwrap();
                let mut db = vec![F::zero(); chunk];
                for row in gf.chunks(chunk) {
                    for (d, &gi) in db.iter_mut().zip(row.iter()) {
                        *d += gi;
                    }
                }
                vec![
                    gs.clone(),
                    ArrayD::from_shape_vec(IxDyn(&bshape), db).unwrap(),
                ]
            })),
        )
    }

    // ---- neural ops ---------------------------------------------------------

    /// 2-D convolution, stride 1, zero padding `pad` on all sides.
    /// `x: [B,Ci,H,W]`, `w: [Co,Ci,kh,kw]`, `bias: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, pad: usize) -> Var {
        let xv = self.nodes[x.0].value.clone();
        let wv = self.nodes[w.0].value.clone();
        let bv = bias.map(|b| self.nodes[b.0].value.clone());
        assert_eq!(xv.ndim(), 4, "conv2d: x must be [B,Ci,H,W]");
        assert_eq!(wv.ndim(), 4, "conv2d: w must be [Co,Ci,kh,kw]");
        let (bsz, ci, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (co, ciw, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(ci, ciw, "conv2d: channel mismatch");
        let oh = h + 2 * pad + 1 - kh;
        let ow = wd + 2 * pad + 1 - kw;

        let w_mat = wv
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(&[co, ci * kh * kw]))
            .unwrap()
            .into_dimensionality::<Ix2>()
            .unwrap();

        let mut out = ArrayD::<F>::zeros(IxDyn(&[bsz, co, oh, ow]));
        for b in 0..bsz {
            let cols = im2col(&xv, b, kh, kw, pad, oh, ow);
            let o = matmul2_raw(w_mat.view(), cols.view());
            let of = o.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            let base = b * co * oh * ow;
            os[base..base + co * oh * ow].copy_from_slice(of);
        }
        if let Some(ref bvals) = bv {
            let bf = bvals.as_standard_layout().to_owned();
            let bs = bf.as_slice().unwrap().to_vec();
            let os = out.as_slice_mut().unwrap();
            for b in 0..bsz {
                for c in 0..co {
                    let base = (b * co + c) * oh * ow;
                    for v in &mut os[base..base + oh * ow] {
                        *v += bs[c];
                    }
                }
            }
        }

        let mut parents = vec![x, w];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        self.push(
            out,
            parents,
            Some(Box::new(move |g| {
                let gs = g.as_standard_layout().to_owned();
                let mut dw_mat = Array2::<F>::zeros((co, ci * kh * kw));
                let mut dx = ArrayD::<F>::zeros(IxDyn(&[bsz, ci, h, wd]));
                for b in 0..bsz {
                    let gmat = {
                        let gf = gs.as_slice().unwrap();
                        let base = b * co * oh * ow;
                        Array2::from_shape_vec((co, oh * ow), gf[base..base + co * oh * ow].to_vec())
                            .unwrap()
                    };
                    let cols = im2col(&xv, b, kh, kw, pad, oh, ow);
                    general_mat_mul(
                        F::one(),
                        &gmat.view(),
                        &cols.t(),
                        F::one(),
                        &mut dw_mat.view_mut(),
                    );
                    let dcols = matmul2_raw(w_mat.t(), gmat.view());
                    col2im_add(&mut dx, b, &dcols, kh, kw, pad, oh, ow);
                }
                let dw = dw_mat
                    .into_dyn()
                    .into_shape_with_order(IxDyn(&[co, ci, kh, kw]))
                    .unwrap();
                let mut grads = vec![dx, dw];
                if has_bias {
                    let gf = gs.as_slice().unwrap();
                    let mut db = vec![F::zero(); co];
                    for b in 0..bsz {
                        for c in 0..co {
                            let base = (b * co + c) * oh * ow;
                            db[c] += gf[base..base + oh * ow].iter().copied().sum::<F>();
                        }
                    }
                    grads.push(ArrayD::from_shape_vec(IxDyn(&[co]), db).unwrap());
                }
                grads
            })),
        )
    }

    /// Layer normalization across the channel axis of `[B,C,H,W]`, one
    /// mean/variance per spatial position, with learned per-channel scale
    /// and shift.
    pub fn layer_norm_ch(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.nodes[x.0].value.clone();
        let gv = self.nodes[gamma.0].value.clone();
        let bv = self.nodes[beta.0].value.clone();
        assert_eq!(xv.ndim(), 4);
        let (bsz, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        assert_eq!(gv.shape(), &[c]);
        assert_eq!(bv.shape(), &[c]);
        let epsf = F::of_f64(eps);
        let hw = h * w;
        let xs = xv.as_standard_layout().to_owned();
        let xf = xs.as_slice().unwrap();
        let gf: Vec<F> = gv.iter().copied().collect();
        let bf: Vec<F> = bv.iter().copied().collect();

        // per-lane normalized values and inverse sigma, reused by backward
        let mut xhat = vec![F::zero(); xf.len()];
        let mut inv_sigma = vec![F::zero(); bsz * hw];
        let mut out = vec![F::zero(); xf.len()];
        let cf = F::of_f64(c as f64);
        for b in 0..bsz {
            for p in 0..hw {
                let mut mean = F::zero();
                for ch in 0..c {
                    mean += xf[(b * c + ch) * hw + p];
                }
                mean /= cf;
                let mut var = F::zero();
                for ch in 0..c {
                    let d = xf[(b * c + ch) * hw + p] - mean;
                    var += d * d;
                }
                var /= cf;
                let is = (var + epsf).sqrt().recip();
                inv_sigma[b * hw + p] = is;
                for ch in 0..c {
                    let i = (b * c + ch) * hw + p;
                    let xh = (xf[i] - mean) * is;
                    xhat[i] = xh;
                    out[i] = gf[ch] * xh + bf[ch];
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[bsz, c, h, w]), out).unwrap();
        let xhat = Arc::new(xhat);
        let inv_sigma = Arc::new(inv_sigma);
        self.push(
            out,
            vec![x, gamma, beta],
            Some(Box::new(move |g| {
                let gsl = g.as_standard_layout().to_owned();
                let gfl = gsl.as_slice().unwrap();
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                let mut dx = vec![F::zero(); gfl.len()];
                for b in 0..bsz {
                    for p in 0..hw {
                        let is = inv_sigma[b * hw + p];
                        let mut m_dxhat = F::zero();
                        let mut m_dxhat_xhat = F::zero();
                        for ch in 0..c {
                            let i = (b * c + ch) * hw + p;
                            let go = gfl[i];
                            dgamma[ch] += go * xhat[i];
                            dbeta[ch] += go;
                            let dxh = go * gf[ch];
                            m_dxhat += dxh;
                            m_dxhat_xhat += dxh * xhat[i];
                        }
                        m_dxhat /= cf;
                        m_dxhat_xhat /= cf;
                        for ch in 0..c {
                            let i = (b * c + ch) * hw + p;
                            let dxh = gfl[i] * gf[ch];
                            dx[i] = (dxh - m_dxhat - xhat[i] * m_dxhat_xhat) * is;
                        }
                    }
                }
                vec![
                    ArrayD::from_shape_vec(IxDyn(&[bsz, c, h, w]), dx).unwrap(),
                    ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).unwrap(),
                    ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).unwrap(),
                ]
            })),
        )
    }

    /// Rearrange `[B, C*r*r, H, W]` into `[B, C, H*r, W*r]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Var {
        let sh = self.shape(x).to_vec();
        assert_eq!(sh.len(), 4);
        let (b, cr2, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        assert_eq!(cr2 % (r * r), 0, "pixel_shuffle: channels not divisible by r^2");
        let c = cr2 / (r * r);
        let (oh, ow) = (h * r, w * r);
        let mut idx = Vec::with_capacity(b * c * oh * ow);
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..oh {
                    for x_ in 0..ow {
                        let src_c = ci * r * r + (y % r) * r + (x_ % r);
                        let src = ((bi * cr2 + src_c) * h + y / r) * w + x_ / r;
                        idx.push(src);
                    }
                }
            }
        }
        self.gather(x, Arc::new(idx), &[b, c, oh, ow])
    }

    // ---- backward -------------------------------------------------------------

    /// Reverse sweep from `root`. The seed gradient is all-ones of the root's
    /// shape (for a 0-d loss, the scalar 1).
    pub fn backward(&self, root: Var) -> Grads<F> {
        let mut slots: Vec<Option<ArrayD<F>>> = Vec::with_capacity(self.nodes.len());
        slots.resize_with(self.nodes.len(), || None);
        slots[root.0] = Some(ArrayD::ones(IxDyn(self.nodes[root.0].value.shape())));
        for i in (0..=root.0).rev() {
            if slots[i].is_none() {
                continue;
            }
            let Some(back) = self.nodes[i].backward.as_ref() else {
                continue; // leaf: keep the accumulated gradient
            };
            let g = slots[i].take().expect("checked above");
            let parent_grads = back(&g);
            debug_assert_eq!(parent_grads.len(), self.nodes[i].parents.len());
            for (p, pg) in self.nodes[i].parents.iter().zip(parent_grads) {
                match &mut slots[p.0] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Grads { slots }
    }
}

fn im2col<F: Scalar>(
    x: &ArcArray<F, IxDyn>,
    b: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<F> {
    let (ci, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let xs = x.as_standard_layout();
    let xf = xs.as_slice().unwrap();
    let mut cols = Array2::<F>::zeros((ci * kh * kw, oh * ow));
    let cf = cols.as_slice_mut().unwrap();
    for c in 0..ci {
        let src_base = (b * ci + c) * h * w;
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * oh * ow;
                for y in 0..oh {
                    let sy = y + ky;
                    if sy < pad || sy >= h + pad {
                        continue;
                    }
                    let sy = sy - pad;
                    for xo in 0..ow {
                        let sx = xo + kx;
                        if sx < pad || sx >= w + pad {
                            continue;
                        }
                        cf[row + y * ow + xo] = xf[src_base + sy * w + (sx - pad)];
                    }
                }
            }
        }
    }
    cols
}

/// Central finite differences for a scalar-valued graph builder, f64 only.
/// `build` must construct the loss from freshly registered copies of
/// `inputs` every time it is called.
pub fn finite_diff<Build>(inputs: &[ArrayD<f64>], step: f64, build: &Build) -> Vec<ArrayD<f64>>
where
    Build: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |xs: &[ArrayD<f64>]| -> f64 {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let loss = build(&mut g, &vars);
        g.scalar_value(loss)
    };
    let mut grads = Vec::with_capacity(inputs.len());
    for (k, x) in inputs.iter().enumerate() {
        let mut gx = ArrayD::<f64>::zeros(x.raw_dim());
        for i in 0..x.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[k].as_slice_mut().unwrap()[i] += step;
            minus[k].as_slice_mut().unwrap()[i] -= step;
            gx.as_slice_mut().unwrap()[i] = (eval(&plus) - eval(&minus)) / (2.0 * step);
        }
        grads.push(gx);
    }
    grads
}

/// Compare analytic gradients against central finite differences and return
/// the worst relative error. Relative error uses an absolute floor of 1e-6
/// so near-zero gradients are compared absolutely.
pub fn max_grad_rel_err<Build>(inputs: &[ArrayD<f64>], step: f64, build: &Build) -> f64
where
    Build: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss);
    let numeric = finite_diff(inputs, step, build);
    let mut worst = 0.0f64;
    for (v, n) in vars.iter().zip(numeric.iter()) {
        let zero = ArrayD::<f64>::zeros(n.raw_dim());
        let a = grads.get(*v).unwrap_or(&zero);
        for (&ai, &ni) in a.iter().zip(n.iter()) {
            let denom = ai.abs().max(ni.abs()).max(1e-6);
            worst = worst.max((ai - ni).abs() / denom);
        }
    }
    worst
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<F: Scalar>(
    dx: &mut ArrayD<F>,
    b: usize,
    dcols: &Array2<F>,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let (ci, h, w) = (dx.shape()[1], dx.shape()[2], dx.shape()[3]);
    let df = dx.as_slice_mut().unwrap();
    let cf = dcols.as_slice().unwrap();
    for c in 0..ci {
        let dst_base = (b * ci + c) * h * w;
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * oh * ow;
                for y in 0..oh {
                    let sy = y + ky;
                    if sy < pad || sy >= h + pad {
                        continue;
                    }
                    let sy = sy - pad;
                    for xo in 0..ow {
                        let sx = xo + kx;
                        if sx < pad || sx >= w + pad {
                            continue;
                        }
                        df[dst_base + sy * w + (sx - pad)] += cf[row + y * ow + xo];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
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

    #[test]
    fn elementwise_grads_match_fd() {
        let a = randn(&[3, 4], 1);
        let b = randn(&[3, 4], 2);
        let err = max_grad_rel_err(&[a, b], 1e-5, &|g, v| {
            let s = g.mul(v[0], v[1]);
            let t = g.sub(s, v[1]);
            let u = g.abs(t);
            let w = g.scale(u, 0.7);
            let x = g.add(w, v[0]);
            g.mean_all(x)
        });
        assert!(err <= 1e-6, "elementwise rel err {err}");
    }

    #[test]
    fn matmul_grads_match_fd() {
        let a = randn(&[3, 5], 3);
        let b = randn(&[5, 2], 4);
        let err = max_grad_rel_err(&[a, b], 1e-5, &|g, v| {
            let m = g.matmul2(v[0], v[1]);
            g.sum_all(m)
        });
        assert!(err <= 1e-6, "matmul2 rel err {err}");
    }

    #[test]
    fn bmm_and_transpose_grads_match_fd() {
        let a = randn(&[2, 3, 4], 5);
        let b = randn(&[2, 3, 4], 6);
        let err = max_grad_rel_err(&[a, b], 1e-5, &|g, v| {
            let bt = g.transpose12(v[1]);
            let m = g.bmm(v[0], bt); // [2,3,3]
            let m2 = g.bmm(m, v[1]); // [2,3,4]
            let d = g.abs(m2);
            g.mean_all(d)
        });
        assert!(err <= 1e-5, "bmm rel err {err}");
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grads_match() {
        let a = randn(&[4, 7], 7);
        let mut g = Graph::<f64>::new();
        let v = g.input(a.clone());
        let s = g.softmax_last(v);
        for row in g.value(s).to_owned().as_slice().unwrap().chunks(7) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
        }
        let err = max_grad_rel_err(&[a, randn(&[4, 7], 8)], 1e-5, &|g, v| {
            let s = g.softmax_last(v[0]);
            let w = g.mul(s, v[1]);
            g.sum_all(w)
        });
        assert!(err <= 1e-6, "softmax rel err {err}");
    }

    /// Direct quadruple-loop convolution as an independent oracle.
    fn conv_naive(
        x: &ArrayD<f64>,
        w: &ArrayD<f64>,
        b: Option<&ArrayD<f64>>,
        pad: usize,
    ) -> ArrayD<f64> {
        let (bs, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let oh = h + 2 * pad + 1 - kh;
        let ow = wd + 2 * pad + 1 - kw;
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[bs, co, oh, ow]));
        for bi in 0..bs {
            for o in 0..co {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = b.map(|bb| bb[[o]]).unwrap_or(0.0);
                        for c in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let sy = y + ky;
                                    let sx = xo + kx;
                                    if sy < pad || sx < pad || sy >= h + pad || sx >= wd + pad {
                                        continue;
                                    }
                                    acc += x[[bi, c, sy - pad, sx - pad]] * w[[o, c, ky, kx]];
                                }
                            }
                        }
                        out[[bi, o, y, xo]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_naive_oracle() {
        for (k, pad) in [(1usize, 0usize), (3, 1)] {
            let x = randn(&[2, 3, 5, 6], 10 + k as u64);
            let w = randn(&[4, 3, k, k], 20 + k as u64);
            let b = randn(&[4], 30 + k as u64);
            let mut g = Graph::<f64>::new();
            let xv = g.input(x.clone());
            let wv = g.input(w.clone());
            let bv = g.input(b.clone());
            let out = g.conv2d(xv, wv, Some(bv), pad);
            let expect = conv_naive(&x, &w, Some(&b), pad);
            let diff = (&g.value(out).to_owned() - &expect)
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(diff < 1e-12, "conv mismatch {diff} (k={k})");
        }
    }

    #[test]
    fn conv2d_grads_match_fd() {
        let x = randn(&[1, 2, 4, 4], 11);
        let w = randn(&[3, 2, 3, 3], 12);
        let b = randn(&[3], 13);
        let err = max_grad_rel_err(&[x, w, b], 1e-5, &|g, v| {
            let c = g.conv2d(v[0], v[1], Some(v[2]), 1);
            let a = g.abs(c);
            g.mean_all(a)
        });
        assert!(err <= 1e-6, "conv2d rel err {err}");
    }

    #[test]
    fn layer_norm_normalizes_and_grads_match_fd() {
        let x = randn(&[2, 6, 3, 3], 14);
        let gamma = ArrayD::ones(IxDyn(&[6]));
        let beta = ArrayD::zeros(IxDyn(&[6]));
        let mut g = Graph::<f64>::new();
        let xv = g.input(x.clone());
        let gv = g.input(gamma.clone());
        let bv = g.input(beta.clone());
        let y = g.layer_norm_ch(xv, gv, bv, 1e-6);
        let yv = g.value(y).to_owned();
        // per-position mean ~ 0, var ~ 1
        for b in 0..2 {
            for p in 0..9 {
                let lane: Vec<f64> = (0..6).map(|c| yv[[b, c, p / 3, p % 3]]).collect();
                let mean: f64 = lane.iter().sum::<f64>() / 6.0;
                let var: f64 = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
                assert!(mean.abs() < 1e-10);
                assert!((var - 1.0).abs() < 1e-4);
            }
        }
        let gamma = randn(&[6], 15);
        let beta = randn(&[6], 16);
        let err = max_grad_rel_err(&[x, gamma, beta], 1e-5, &|g, v| {
            let y = g.layer_norm_ch(v[0], v[1], v[2], 1e-6);
            let a = g.abs(y);
            g.mean_all(a)
        });
        assert!(err <= 1e-5, "layer norm rel err {err}");
    }

    #[test]
    fn gather_accumulates_duplicates() {
        let x = randn(&[4], 17);
        let idx = Arc::new(vec![0usize, 0, 2, 3, 3, 3]);
        let mut g = Graph::<f64>::new();
        let xv = g.input(x.clone());
        let y = g.gather(xv, Arc::clone(&idx), &[6]);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        let gx = grads.get(xv).unwrap();
        assert_eq!(gx.as_slice().unwrap(), &[2.0, 0.0, 1.0, 3.0]);
    }

    #[test]
    fn structural_ops_grads_match_fd() {
        let x = randn(&[2, 4, 2, 2], 18);
        let y = randn(&[2, 2, 2, 2], 19);
        let err = max_grad_rel_err(&[x, y], 1e-5, &|g, v| {
            let c = g.concat(1, &[v[0], v[1]]); // [2,6,2,2]
            let s = g.slice_axis_range(c, 1, 1, 4);
            let r = g.reshape(s, &[2, 16]);
            let a = g.abs(r);
            g.mean_all(a)
        });
        assert!(err <= 1e-6, "structural rel err {err}");
    }

    #[test]
    fn scalar_broadcast_grads_match_fd() {
        let x = randn(&[5], 20);
        let s = randn(&[], 21).mapv(|v| v + 3.0); // keep divisor away from zero
        let err = max_grad_rel_err(&[x, s], 1e-6, &|g, v| {
            let d = g.sub_scalar(v[0], v[1]);
            let q = g.div_scalar(d, v[1]);
            let m = g.mul_scalar(q, v[1]);
            let a = g.abs(m);
            g.mean_all(a)
        });
        assert!(err <= 1e-5, "scalar broadcast rel err {err}");
    }

    #[test]
    fn pixel_shuffle_matches_reference_layout() {
        let x = randn(&[1, 4, 2, 2], 22);
        let mut g = Graph::<f64>::new();
        let xv = g.input(x.clone());
        let y = g.pixel_shuffle(xv, 2);
        assert_eq!(g.shape(y), &[1, 1, 4, 4]);
        let yv = g.value(y).to_owned();
        for oy in 0..4 {
            for ox in 0..4 {
                let c = (oy % 2) * 2 + (ox % 2);
                assert_eq!(yv[[0, 0, oy, ox]], x[[0, c, oy / 2, ox / 2]]);
            }
        }
    }

    #[test]
    fn backward_accumulates_along_multiple_paths() {
        // loss = mean(x*x + x) -> d/dx = (2x + 1)/n
        let x = randn(&[3], 23);
        let mut g = Graph::<f64>::new();
        let xv = g.input(x.clone());
        let sq = g.mul(xv, xv);
        let s = g.add(sq, xv);
        let loss = g.mean_all(s);
        let grads = g.backward(loss);
        let gx = grads.get(xv).unwrap();
        for i in 0..3 {
            let expect = (2.0 * x[[i]] + 1.0) / 3.0;
            assert!((gx[[i]] - expect).abs() < 1e-12);
        }
    }
}
