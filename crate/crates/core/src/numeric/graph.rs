use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gemm::{gemm, gemm_new};
use super::optim::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceMode {
    Min,
    Max,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatLast(Var, Var),
    ConcatRows(Var, Var),
    Relu(Var),
    Sin(Var),
    Exp(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    MaskedSoftmax(Var),
    Dropout { x: Var, mask: Vec<f64> },
    Sum(Var),
    Mean(Var),
    SquaredError(Var, Var),
    Reshape(Var),
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    GatherRows {
        src: Var,
        pad: Option<Var>,
        idx: Rc<Vec<Option<usize>>>,
    },
    MaskedReduce { x: Var, arg: Vec<usize> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        scale: f64,
        heads: usize,
        q_mask: Vec<bool>,
        k_mask: Vec<bool>,
        weights: Vec<f64>,
        drop: Option<Vec<f64>>,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    /// Some parameter lies upstream.
    grad: bool,
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 3] {
        match self {
            Op::Leaf | Op::Param(_) => [None; 3],
            Op::MatMul(a, b)
            | Op::BatchMatMul { a, b, .. }
            | Op::Add(a, b)
            | Op::AddBias(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ConcatLast(a, b)
            | Op::ConcatRows(a, b)
            | Op::SquaredError(a, b) => [Some(*a), Some(*b), None],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Sin(x)
            | Op::Exp(x)
            | Op::MaskedSoftmax(x)
            | Op::Dropout { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::SplitHeads { x, .. }
            | Op::MergeHeads { x, .. }
            | Op::MaskedReduce { x, .. }
            | Op::CrossEntropy { logits: x, .. } => [Some(*x), None, None],
            Op::LayerNorm { x, gamma, beta, .. } => [Some(*x), Some(*gamma), Some(*beta)],
            Op::GatherRows { src, pad, .. } => [Some(*src), *pad, None],
            Op::Attention { q, k, v, .. } => [Some(*q), Some(*k), Some(*v)],
        }
    }
}

/// Tape of one forward pass over the parameters of a [`ParamStore`].
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    train: bool,
    rng: ChaCha8Rng,
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

impl<'p> Graph<'p> {
    /// Evaluation graph: dropout is the identity.
    pub fn new(params: &'p ParamStore) -> Self {
        Self::with_mode(params, false, 0)
    }

    /// `train` enables dropout, drawing masks from a stream seeded by `seed`.
    pub fn with_mode(params: &'p ParamStore, train: bool, seed: u64) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let grad = matches!(op, Op::Param(_)) || op.inputs().iter().flatten().any(|v| self.nodes[v.0].grad);
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Non-differentiable input. Non-finite data is rejected.
    pub fn constant(&mut self, t: Tensor) -> Var {
        assert!(t.is_finite(), "non-finite constant of shape {:?}", t.shape());
        self.push(t, Op::Leaf)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let value = self.params.get(id).tensor.clone();
        let v = self.push(value, Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    // ----- forward operations -----

    /// `a[.., k] x b[k, n] -> [.., n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (at, bt) = (self.value(a), self.value(b));
        assert_eq!(bt.shape().len(), 2, "matmul: rhs must be 2-d, got {:?}", bt.shape());
        let (k, n) = (bt.shape()[0], bt.shape()[1]);
        assert_eq!(
            at.cols(),
            k,
            "matmul: shape mismatch {:?} x {:?}",
            at.shape(),
            bt.shape()
        );
        let m = at.rows();
        let out = gemm_new(m, k, n, at.data(), false, bt.data(), false);
        let mut shape = at.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(shape, out), Op::MatMul(a, b))
    }

    /// Batched product `a[B, m, k] x b[B, k, n]`; with `trans_b`, `b` is
    /// stored as `[B, n, k]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (at, bt) = (self.value(a), self.value(b));
        assert!(
            at.shape().len() == 3 && bt.shape().len() == 3 && at.shape()[0] == bt.shape()[0],
            "bmm: shape mismatch {:?} x {:?}",
            at.shape(),
            bt.shape()
        );
        let (batch, m, k) = (at.shape()[0], at.shape()[1], at.shape()[2]);
        let (bk, n) = if trans_b {
            (bt.shape()[2], bt.shape()[1])
        } else {
            (bt.shape()[1], bt.shape()[2])
        };
        assert_eq!(k, bk, "bmm: shape mismatch {:?} x {:?} (trans_b={trans_b})", at.shape(), bt.shape());
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &at.data()[i * m * k..],
                false,
                &bt.data()[i * k * n..],
                trans_b,
                &mut out[i * m * n..],
                false,
            );
        }
        self.push(Tensor::new(vec![batch, m, n], out), Op::BatchMatMul { a, b, trans_b })
    }

    fn zip_map(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (at, bt) = (self.value(a), self.value(b));
        same_shape(name, at, bt);
        let data = at.data().iter().zip(bt.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = at.shape().to_vec();
        self.push(Tensor::new(shape, data), op)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| f(v)).collect();
        let shape = xt.shape().to_vec();
        self.push(Tensor::new(shape, data), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn squared_error(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, "squared_error", |x, y| (x - y) * (x - y), Op::SquaredError(a, b))
    }

    /// `x[.., n] + bias[n]`
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (xt, bt) = (self.value(x), self.value(bias));
        let n = xt.cols();
        assert_eq!(
            bt.numel(),
            n,
            "add_bias: shape mismatch {:?} + {:?}",
            xt.shape(),
            bt.shape()
        );
        let mut data = xt.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(bt.data()) {
                *v += b;
            }
        }
        let shape = xt.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::AddBias(x, bias))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.map(x, f64::sin, Op::Sin(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp(x))
    }

    /// Concatenate along the last dimension.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let (at, bt) = (self.value(a), self.value(b));
        assert!(
            at.rows() == bt.rows()
                && at.shape()[..at.shape().len() - 1] == bt.shape()[..bt.shape().len() - 1],
            "concat_last: shape mismatch {:?} ++ {:?}",
            at.shape(),
            bt.shape()
        );
        let (p, q) = (at.cols(), bt.cols());
        let mut data = Vec::with_capacity(at.numel() + bt.numel());
        for r in 0..at.rows() {
            data.extend_from_slice(at.row(r));
            data.extend_from_slice(bt.row(r));
        }
        let mut shape = at.shape().to_vec();
        *shape.last_mut().unwrap() = p + q;
        self.push(Tensor::new(shape, data), Op::ConcatLast(a, b))
    }

    /// Stack the rows of `a[.., d]` above the rows of `b[.., d]` into `[Ra + Rb, d]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (at, bt) = (self.value(a), self.value(b));
        assert_eq!(
            at.cols(),
            bt.cols(),
            "concat_rows: shape mismatch {:?} ++ {:?}",
            at.shape(),
            bt.shape()
        );
        let d = at.cols();
        let rows = at.rows() + bt.rows();
        let mut data = Vec::with_capacity(rows * d);
        data.extend_from_slice(at.data());
        data.extend_from_slice(bt.data());
        self.push(Tensor::new(vec![rows, d], data), Op::ConcatRows(a, b))
    }

    /// Row-wise layer normalization over the last dimension followed by
    /// the affine map `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (xt, gt, bt) = (self.value(x), self.value(gamma), self.value(beta));
        let n = xt.cols();
        assert!(
            gt.numel() == n && bt.numel() == n,
            "layer_norm: shape mismatch {:?} with gamma {:?} beta {:?}",
            xt.shape(),
            gt.shape(),
            bt.shape()
        );
        let rows = xt.rows();
        let mut xhat = Vec::with_capacity(xt.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xt.numel());
        for r in 0..rows {
            let row = xt.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(s);
            for j in 0..n {
                let h = (row[j] - mean) * s;
                xhat.push(h);
                out.push(h * gt.data()[j] + bt.data()[j]);
            }
        }
        let shape = xt.shape().to_vec();
        self.push(
            Tensor::new(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Softmax over the last dimension restricted to `keep` entries
    /// (`keep.len() == numel`). Blocked entries get exactly 0; a row with
    /// nothing kept is all zeros.
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool]) -> Var {
        let xt = self.value(x);
        assert_eq!(
            keep.len(),
            xt.numel(),
            "masked_softmax: mask of {} entries for shape {:?}",
            keep.len(),
            xt.shape()
        );
        let n = xt.cols();
        let mut out = vec![0.0; xt.numel()];
        for r in 0..xt.rows() {
            let row = xt.row(r);
            let k = &keep[r * n..(r + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                if k[j] {
                    max = max.max(row[j]);
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = &mut out[r * n..(r + 1) * n];
            let mut sum = 0.0;
            for j in 0..n {
                if k[j] {
                    let e = (row[j] - max).exp();
                    o[j] = e;
                    sum += e;
                }
            }
            for v in o.iter_mut() {
                *v /= sum;
            }
        }
        let shape = xt.shape().to_vec();
        self.push(Tensor::new(shape, out), Op::MaskedSoftmax(x))
    }

    /// Softmax with an additive mask; entries equal to negative infinity
    /// are blocked.
    pub fn masked_softmax_additive(&mut self, x: Var, additive: &Tensor) -> Var {
        let keep: Vec<bool> = additive.data().iter().map(|&v| v != f64::NEG_INFINITY).collect();
        let finite: Vec<f64> = additive
            .data()
            .iter()
            .map(|&v| if v == f64::NEG_INFINITY { 0.0 } else { v })
            .collect();
        let shifted = if finite.iter().all(|&v| v == 0.0) {
            x
        } else {
            let m = self.constant(Tensor::new(additive.shape().to_vec(), finite));
            self.add(x, m)
        };
        self.masked_softmax(shifted, &keep)
    }

    /// Inverted dropout with drop probability `p`; identity outside training.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return x;
        }
        let keep_scale = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep_scale })
            .collect();
        let xt = self.value(x);
        let data = xt.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = xt.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::Dropout { x, mask })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let s = xt.data().iter().sum::<f64>() / xt.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Var {
        let t = self.value(x).clone().reshape(shape);
        self.push(t, Op::Reshape(x))
    }

    /// `[B, n, h * dh] -> [B * h, n, dh]`
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Var {
        let xt = self.value(x);
        assert_eq!(xt.shape().len(), 3, "split_heads: expected [B, n, d], got {:?}", xt.shape());
        let (b, n, d) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        assert_eq!(d % heads, 0, "split_heads: d = {d} not divisible by {heads}");
        let dh = d / heads;
        let out = heads_to_front(xt.data(), b, n, heads, dh);
        self.push(Tensor::new(vec![b * heads, n, dh], out), Op::SplitHeads { x, heads })
    }

    /// `[B * h, n, dh] -> [B, n, h * dh]`
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Var {
        let xt = self.value(x);
        assert_eq!(xt.shape().len(), 3, "merge_heads: expected [B*h, n, dh], got {:?}", xt.shape());
        let (bh, n, dh) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        assert_eq!(bh % heads, 0, "merge_heads: {bh} not divisible by {heads}");
        let b = bh / heads;
        let d = dh * heads;
        let out = heads_to_back(xt.data(), b, n, heads, dh);
        self.push(Tensor::new(vec![b, n, d], out), Op::MergeHeads { x, heads })
    }

    /// Row `i` of the output is row `idx[i]` of `src` (viewed as `[R, d]`),
    /// or `pad` where `idx[i]` is `None`. The result is reshaped to `shape`.
    pub fn gather_rows(
        &mut self,
        src: Var,
        pad: Option<Var>,
        idx: Rc<Vec<Option<usize>>>,
        shape: impl Into<Vec<usize>>,
    ) -> Var {
        let st = self.value(src);
        let d = st.cols();
        let rows = st.rows();
        let pad_row = pad.map(|p| {
            let pt = self.value(p);
            assert_eq!(pt.numel(), d, "gather_rows: pad {:?} for rows of {d}", pt.shape());
            pt.data()
        });
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            match i {
                Some(i) => {
                    assert!(i < rows, "gather_rows: index {i} out of {rows} rows");
                    out.extend_from_slice(st.row(i));
                }
                None => out.extend_from_slice(pad_row.expect("gather_rows: pad slot without a pad row")),
            }
        }
        let t = Tensor::new(vec![idx.len(), d], out).reshape(shape);
        self.push(t, Op::GatherRows { src, pad, idx })
    }

    /// Min or max over the middle axis of `x[R, M, d]`, restricted to
    /// `keep[R * M]` slots. Rows with no kept slot yield zeros.
    pub fn masked_reduce(&mut self, x: Var, keep: &[bool], mode: ReduceMode) -> Var {
        let xt = self.value(x);
        assert_eq!(xt.shape().len(), 3, "masked_reduce: expected [R, M, d], got {:?}", xt.shape());
        let (r, m, d) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        assert_eq!(keep.len(), r * m, "masked_reduce: mask of {} for {:?}", keep.len(), xt.shape());
        let mut out = vec![0.0; r * d];
        let mut arg = vec![usize::MAX; r * d];
        let src = xt.data();
        for ri in 0..r {
            for j in 0..m {
                if !keep[ri * m + j] {
                    continue;
                }
                for c in 0..d {
                    let s = (ri * m + j) * d + c;
                    let o = ri * d + c;
                    let better = arg[o] == usize::MAX
                        || match mode {
                            ReduceMode::Max => src[s] > out[o],
                            ReduceMode::Min => src[s] < out[o],
                        };
                    if better {
                        out[o] = src[s];
                        arg[o] = s;
                    }
                }
            }
        }
        self.push(Tensor::new(vec![r, d], out), Op::MaskedReduce { x, arg })
    }

    /// Scaled dot-product attention over split heads: `q [B*h, nq, dh]`,
    /// `k`, `v [B*h, nk, dh]`; `q_mask [B*nq]` and `k_mask [B*nk]` are shared
    /// by the `h` heads of a trajectory. Blocked keys get weight exactly 0 and
    /// blocked queries produce zero rows. Dropout applies to the weights.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        q_mask: &[bool],
        k_mask: &[bool],
        heads: usize,
        dropout: f64,
    ) -> Var {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        assert!(
            qt.shape().len() == 3 && kt.shape() == vt.shape() && kt.shape().len() == 3,
            "attention: shapes {:?} {:?} {:?}",
            qt.shape(),
            kt.shape(),
            vt.shape()
        );
        let (bh, nq, dh) = (qt.shape()[0], qt.shape()[1], qt.shape()[2]);
        let nk = kt.shape()[1];
        assert!(
            kt.shape()[0] == bh && kt.shape()[2] == dh && bh % heads == 0,
            "attention: shapes {:?} {:?} with {heads} heads",
            qt.shape(),
            kt.shape()
        );
        assert!(q != k && q != v && k != v, "attention: q, k and v must be distinct nodes");
        let batch = bh / heads;
        assert!(
            q_mask.len() == batch * nq && k_mask.len() == batch * nk,
            "attention: masks of {} and {} for {batch} x ({nq}, {nk})",
            q_mask.len(),
            k_mask.len()
        );
        let drop = (self.train && dropout > 0.0).then(|| {
            let keep_scale = 1.0 / (1.0 - dropout);
            (0..bh * nq * nk)
                .map(|_| if self.rng.random::<f64>() < dropout { 0.0 } else { keep_scale })
                .collect::<Vec<f64>>()
        });
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let scale = 1.0 / (dh as f64).sqrt();
        let mut weights = vec![0.0; bh * nq * nk];
        let mut out = vec![0.0; bh * nq * dh];
        let kept = kept_keys(k_mask, nk);
        // Keys and values are laid out channel-major over `nk` rounded up to
        // a multiple of 4 so the inner loops run over keys; the zero tail
        // leaves every real sum unchanged.
        let nk4 = nk.div_ceil(4) * 4;
        let mut k_cols = vec![0.0; dh * nk4];
        let mut v_cols = vec![0.0; dh * nk4];
        let mut sc = vec![0.0; nk4];
        let mut pr = vec![0.0; nk4];
        for h in 0..bh {
            let b = h / heads;
            let kept = &kept[b];
            if kept.is_empty() {
                continue;
            }
            pr.fill(0.0);
            to_columns(&kt.data()[h * nk * dh..(h + 1) * nk * dh], nk, dh, nk4, &mut k_cols);
            to_columns(&vt.data()[h * nk * dh..(h + 1) * nk * dh], nk, dh, nk4, &mut v_cols);
            for i in 0..nq {
                if !q_mask[b * nq + i] {
                    continue;
                }
                let r = h * nq + i;
                let qi = &qt.data()[r * dh..(r + 1) * dh];
                scaled_into(&mut sc, qi[0], &k_cols[..nk4]);
                for (c, &qc) in qi.iter().enumerate().skip(1) {
                    axpy(&mut sc, qc, &k_cols[c * nk4..(c + 1) * nk4]);
                }
                let max = kept.iter().map(|&j| scale * sc[j]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for &j in kept {
                    let e = (scale * sc[j] - max).exp();
                    pr[j] = e;
                    sum += e;
                }
                for &j in kept {
                    pr[j] /= sum;
                }
                weights[r * nk..(r + 1) * nk].copy_from_slice(&pr[..nk]);
                if let Some(m) = &drop {
                    for (p, m) in pr.iter_mut().zip(&m[r * nk..(r + 1) * nk]) {
                        *p *= m;
                    }
                }
                for c in 0..dh {
                    out[r * dh + c] = dot4(&pr, &v_cols[c * nk4..(c + 1) * nk4]);
                }
            }
        }
        self.push(
            Tensor::new(vec![bh, nq, dh], out),
            Op::Attention {
                q,
                k,
                v,
                scale,
                heads,
                q_mask: q_mask.to_vec(),
                k_mask: k_mask.to_vec(),
                weights,
                drop,
            },
        )
    }

    /// Pre-dropout weights `[B*h, nq, nk]` of an [`attention`](Self::attention) node.
    pub fn attention_weights(&self, v: Var) -> Option<Tensor> {
        match &self.nodes[v.0].op {
            Op::Attention { k, weights, .. } => {
                let s = self.value(v).shape();
                let nk = self.value(*k).shape()[1];
                Some(Tensor::new(vec![s[0], s[1], nk], weights.clone()))
            }
            _ => None,
        }
    }

    /// Mean softmax cross-entropy of `logits[B, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lt = self.value(logits);
        let c = lt.cols();
        assert_eq!(lt.rows(), labels.len(), "cross_entropy: {} labels for {:?}", labels.len(), lt.shape());
        let mut probs = vec![0.0; lt.numel()];
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            assert!(y < c, "cross_entropy: label {y} out of {c} classes");
            let row = lt.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..c {
                probs[r * c + j] = (row[j] - max).exp() / sum;
            }
            loss += sum.ln() + max - row[y];
        }
        let n = labels.len().max(1) as f64;
        self.push(
            Tensor::scalar(loss / n),
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        )
    }

    // ----- reverse pass -----

    /// Reverse-mode gradients of the scalar `loss` for every parameter that
    /// contributed to it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::new(self.params.len());

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(*id, Tensor::new(node.value.shape().to_vec(), g)),
                Op::MatMul(a, b) => {
                    let (at, bt) = (self.value(*a), self.value(*b));
                    let (k, n) = (bt.shape()[0], bt.shape()[1]);
                    let m = at.rows();
                    if self.wants(*a) {
                        match &mut grads[a.0] {
                            Some(ga) => gemm(m, n, k, &g, false, bt.data(), true, ga, true),
                            slot => *slot = Some(gemm_new(m, n, k, &g, false, bt.data(), true)),
                        }
                    }
                    if self.wants(*b) {
                        match &mut grads[b.0] {
                            Some(gb) => gemm(k, m, n, at.data(), true, &g, false, gb, true),
                            slot => *slot = Some(gemm_new(k, m, n, at.data(), true, &g, false)),
                        }
                    }
                }
                Op::BatchMatMul { a, b, trans_b } => {
                    let (at, bt) = (self.value(*a), self.value(*b));
                    let (batch, m, k) = (at.shape()[0], at.shape()[1], at.shape()[2]);
                    let n = node.value.shape()[2];
                    if let Some(ga) = self.grad_buf(&mut grads, *a) {
                        for i in 0..batch {
                            // dA = dC * B^T ; B^T is [n, k] which is b's storage when trans_b
                            gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..],
                                false,
                                &bt.data()[i * k * n..],
                                !trans_b,
                                &mut ga[i * m * k..],
                                true,
                            );
                        }
                    }
                    if let Some(gb) = self.grad_buf(&mut grads, *b) {
                        for i in 0..batch {
                            if *trans_b {
                                // dB[n, k] = dC^T [n, m] * A [m, k]
                                gemm(n, m, k, &g[i * m * n..], true, &at.data()[i * m * k..], false, &mut gb[i * k * n..], true);
                            } else {
                                // dB[k, n] = A^T [k, m] * dC [m, n]
                                gemm(k, m, n, &at.data()[i * m * k..], true, &g[i * m * n..], false, &mut gb[i * k * n..], true);
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.wants(*a) {
                        self.give(&mut grads, *a, g.clone());
                    }
                    self.give(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    if self.wants(*b) {
                        self.give(&mut grads, *b, g.iter().map(|v| -v).collect());
                    }
                    self.give(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    if self.wants(*a) {
                        self.give(&mut grads, *a, g.iter().zip(bv).map(|(gy, y)| gy * y).collect());
                    }
                    if self.wants(*b) {
                        self.give(&mut grads, *b, g.iter().zip(av).map(|(gy, x)| gy * x).collect());
                    }
                }
                Op::SquaredError(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let diff: Vec<f64> = av.iter().zip(bv).zip(&g).map(|((x, y), gy)| 2.0 * (x - y) * gy).collect();
                    if self.wants(*b) {
                        self.give(&mut grads, *b, diff.iter().map(|v| -v).collect());
                    }
                    self.give(&mut grads, *a, diff);
                }
                Op::AddBias(x, bias) => {
                    if let Some(gb) = self.grad_buf(&mut grads, *bias) {
                        let n = gb.len();
                        for row in g.chunks(n) {
                            add_into(gb, row);
                        }
                    }
                    self.give(&mut grads, *x, g);
                }
                Op::Scale(x, s) => {
                    let mut g = g;
                    for v in &mut g {
                        *v *= s;
                    }
                    self.give(&mut grads, *x, g);
                }
                Op::ConcatLast(a, b) => {
                    let p = self.value(*a).cols();
                    let q = self.value(*b).cols();
                    if let Some(ga) = self.grad_buf(&mut grads, *a) {
                        for (dst, src) in ga.chunks_mut(p).zip(g.chunks(p + q)) {
                            add_into(dst, &src[..p]);
                        }
                    }
                    if let Some(gb) = self.grad_buf(&mut grads, *b) {
                        for (dst, src) in gb.chunks_mut(q).zip(g.chunks(p + q)) {
                            add_into(dst, &src[p..]);
                        }
                    }
                }
                Op::ConcatRows(a, b) => {
                    let na = self.value(*a).numel();
                    if self.wants(*a) {
                        self.give(&mut grads, *a, g[..na].to_vec());
                    }
                    if self.wants(*b) {
                        self.give(&mut grads, *b, g[na..].to_vec());
                    }
                }
                Op::Relu(x) => {
                    let mut g = g;
                    for (gy, v) in g.iter_mut().zip(self.value(*x).data()) {
                        if *v <= 0.0 {
                            *gy = 0.0;
                        }
                    }
                    self.give(&mut grads, *x, g);
                }
                Op::Sin(x) => {
                    let mut g = g;
                    for (gy, v) in g.iter_mut().zip(self.value(*x).data()) {
                        *gy *= v.cos();
                    }
                    self.give(&mut grads, *x, g);
                }
                Op::Exp(x) => {
                    let mut g = g;
                    for (gy, y) in g.iter_mut().zip(node.value.data()) {
                        *gy *= y;
                    }
                    self.give(&mut grads, *x, g);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let n = self.value(*gamma).numel();
                    let gam = self.value(*gamma).data();
                    if let Some(gg) = self.grad_buf(&mut grads, *gamma) {
                        for (row_g, row_h) in g.chunks(n).zip(xhat.chunks(n)) {
                            for j in 0..n {
                                gg[j] += row_g[j] * row_h[j];
                            }
                        }
                    }
                    if let Some(gb) = self.grad_buf(&mut grads, *beta) {
                        for row_g in g.chunks(n) {
                            add_into(gb, row_g);
                        }
                    }
                    if self.wants(*x) {
                        let mut gx = Vec::with_capacity(g.len());
                        let mut dxhat = vec![0.0; n];
                        let nf = n as f64;
                        for (r, s) in rstd.iter().enumerate() {
                            let row_g = &g[r * n..(r + 1) * n];
                            let row_h = &xhat[r * n..(r + 1) * n];
                            let mut sum_d = 0.0;
                            let mut sum_dh = 0.0;
                            for j in 0..n {
                                dxhat[j] = row_g[j] * gam[j];
                                sum_d += dxhat[j];
                                sum_dh += dxhat[j] * row_h[j];
                            }
                            gx.extend((0..n).map(|j| s / nf * (nf * dxhat[j] - sum_d - row_h[j] * sum_dh)));
                        }
                        self.give(&mut grads, *x, gx);
                    }
                }
                Op::MaskedSoftmax(x) => {
                    let y = node.value.data();
                    let n = node.value.cols();
                    let mut gx = Vec::with_capacity(g.len());
                    for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
                        let d: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        gx.extend(yr.iter().zip(gr).map(|(a, b)| a * (b - d)));
                    }
                    self.give(&mut grads, *x, gx);
                }
                Op::Dropout { x, mask } => {
                    let mut g = g;
                    for (gy, m) in g.iter_mut().zip(mask) {
                        *gy *= m;
                    }
                    self.give(&mut grads, *x, g);
                }
                Op::Sum(x) => {
                    let n = self.value(*x).numel();
                    self.give(&mut grads, *x, vec![g[0]; n]);
                }
                Op::Mean(x) => {
                    let n = self.value(*x).numel();
                    self.give(&mut grads, *x, vec![g[0] / n as f64; n]);
                }
                Op::Reshape(x) => self.give(&mut grads, *x, g),
                Op::SplitHeads { x, heads } => {
                    let (b, n, d) = {
                        let s = self.value(*x).shape();
                        (s[0], s[1], s[2])
                    };
                    if self.wants(*x) {
                        self.give(&mut grads, *x, heads_to_back(&g, b, n, *heads, d / heads));
                    }
                }
                Op::MergeHeads { x, heads } => {
                    let (bh, n, dh) = {
                        let s = self.value(*x).shape();
                        (s[0], s[1], s[2])
                    };
                    if self.wants(*x) {
                        self.give(&mut grads, *x, heads_to_front(&g, bh / heads, n, *heads, dh));
                    }
                }
                Op::GatherRows { src, pad, idx } => {
                    let d = self.value(*src).cols();
                    if let Some(gs) = self.grad_buf(&mut grads, *src) {
                        for (o, i) in idx.iter().enumerate() {
                            if let Some(i) = i {
                                add_into(&mut gs[i * d..(i + 1) * d], &g[o * d..(o + 1) * d]);
                            }
                        }
                    }
                    if let Some(p) = pad {
                        if let Some(gp) = self.grad_buf(&mut grads, *p) {
                            for (o, i) in idx.iter().enumerate() {
                                if i.is_none() {
                                    add_into(gp, &g[o * d..(o + 1) * d]);
                                }
                            }
                        }
                    }
                }
                Op::MaskedReduce { x, arg } => {
                    if let Some(gx) = self.grad_buf(&mut grads, *x) {
                        for (o, &s) in arg.iter().enumerate() {
                            if s != usize::MAX {
                                gx[s] += g[o];
                            }
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    scale,
                    heads,
                    q_mask,
                    k_mask,
                    weights,
                    drop,
                } => {
                    let (bh, nq, dh) = {
                        let s = node.value.shape();
                        (s[0], s[1], s[2])
                    };
                    let nk = self.value(*k).shape()[1];
                    let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                    let mut gq = grads[q.0].take().unwrap_or_else(|| vec![0.0; bh * nq * dh]);
                    let mut gk = grads[k.0].take().unwrap_or_else(|| vec![0.0; bh * nk * dh]);
                    let mut gv = grads[v.0].take().unwrap_or_else(|| vec![0.0; bh * nk * dh]);
                    let kept = kept_keys(k_mask, nk);
                    let nk4 = nk.div_ceil(4) * 4;
                    let mut k_cols = vec![0.0; dh * nk4];
                    let mut v_cols = vec![0.0; dh * nk4];
                    let mut gk_cols = vec![0.0; dh * nk4];
                    let mut gv_cols = vec![0.0; dh * nk4];
                    let mut w = vec![0.0; nk4];
                    let mut wd = vec![0.0; nk4];
                    let mut dw = vec![0.0; nk4];
                    for h in 0..bh {
                        let b = h / heads;
                        if kept[b].is_empty() {
                            continue;
                        }
                        let base = h * nk * dh;
                        to_columns(&kv[base..base + nk * dh], nk, dh, nk4, &mut k_cols);
                        to_columns(&vv[base..base + nk * dh], nk, dh, nk4, &mut v_cols);
                        gk_cols.fill(0.0);
                        gv_cols.fill(0.0);
                        for i in 0..nq {
                            if !q_mask[b * nq + i] {
                                continue;
                            }
                            let r = h * nq + i;
                            let go = &g[r * dh..(r + 1) * dh];
                            w[..nk].copy_from_slice(&weights[r * nk..(r + 1) * nk]);
                            wd.copy_from_slice(&w);
                            if let Some(m) = drop {
                                for (p, m) in wd.iter_mut().zip(&m[r * nk..(r + 1) * nk]) {
                                    *p *= m;
                                }
                            }
                            scaled_into(&mut dw, go[0], &v_cols[..nk4]);
                            for (c, &gc) in go.iter().enumerate() {
                                if c > 0 {
                                    axpy(&mut dw, gc, &v_cols[c * nk4..(c + 1) * nk4]);
                                }
                                axpy(&mut gv_cols[c * nk4..(c + 1) * nk4], gc, &wd);
                            }
                            if let Some(m) = drop {
                                for (p, m) in dw.iter_mut().zip(&m[r * nk..(r + 1) * nk]) {
                                    *p *= m;
                                }
                            }
                            let dot_wd = dot4(&w, &dw);
                            // reuse `dw` for the score gradient
                            for (d, p) in dw.iter_mut().zip(&w) {
                                *d = scale * p * (*d - dot_wd);
                            }
                            let qi = &qv[r * dh..(r + 1) * dh];
                            for c in 0..dh {
                                gq[r * dh + c] += dot4(&dw, &k_cols[c * nk4..(c + 1) * nk4]);
                                axpy(&mut gk_cols[c * nk4..(c + 1) * nk4], qi[c], &dw);
                            }
                        }
                        from_columns_add(&gk_cols, nk, dh, nk4, &mut gk[base..base + nk * dh]);
                        from_columns_add(&gv_cols, nk, dh, nk4, &mut gv[base..base + nk * dh]);
                    }
                    grads[q.0] = Some(gq);
                    grads[k.0] = Some(gk);
                    grads[v.0] = Some(gv);
                }
                Op::CrossEntropy { logits, probs, labels } => {
                    let c = self.value(*logits).cols();
                    let scale = g[0] / labels.len().max(1) as f64;
                    let mut gl: Vec<f64> = probs.iter().map(|p| scale * p).collect();
                    for (r, &y) in labels.iter().enumerate() {
                        gl[r * c + y] -= scale;
                    }
                    self.give(&mut grads, *logits, gl);
                }
            }
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    /// Zero-initialized gradient buffer of `v`, or `None` when nothing
    /// upstream of `v` is trainable.
    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.wants(v) {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    /// Adds the contribution `c` to the gradient of `v`, adopting it when it
    /// is the first.
    fn give(&self, grads: &mut [Option<Vec<f64>>], v: Var, c: Vec<f64>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(buf) => add_into(buf, &c),
            slot => *slot = Some(c),
        }
    }
}

/// Indices of the valid keys of each sequence.
fn kept_keys(k_mask: &[bool], nk: usize) -> Vec<Vec<usize>> {
    k_mask
        .chunks(nk.max(1))
        .map(|m| m.iter().enumerate().filter(|(_, &k)| k).map(|(j, _)| j).collect())
        .collect()
}

/// `[b, n, heads * dh] -> [b * heads, n, dh]`
fn heads_to_front(src: &[f64], b: usize, n: usize, heads: usize, dh: usize) -> Vec<f64> {
    let d = heads * dh;
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..n {
                let s = (bi * n + i) * d + h * dh;
                out.extend_from_slice(&src[s..s + dh]);
            }
        }
    }
    out
}

/// `[b * heads, n, dh] -> [b, n, heads * dh]`
fn heads_to_back(src: &[f64], b: usize, n: usize, heads: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        for i in 0..n {
            for h in 0..heads {
                let s = ((bi * heads + h) * n + i) * dh;
                out.extend_from_slice(&src[s..s + dh]);
            }
        }
    }
    out
}

/// `rows [n, d]` into `cols [d, stride]`; entries past `n` stay untouched.
fn to_columns(rows: &[f64], n: usize, d: usize, stride: usize, cols: &mut [f64]) {
    for j in 0..n {
        for c in 0..d {
            cols[c * stride + j] = rows[j * d + c];
        }
    }
}

fn from_columns_add(cols: &[f64], n: usize, d: usize, stride: usize, rows: &mut [f64]) {
    for j in 0..n {
        for c in 0..d {
            rows[j * d + c] += cols[c * stride + j];
        }
    }
}

/// Dot product in four interleaved lanes; lengths are multiples of 4.
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    for (x, y) in a.chunks_exact(4).zip(b.chunks_exact(4)) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// `y = a * x`
fn scaled_into(y: &mut [f64], a: f64, x: &[f64]) {
    for (u, v) in y.iter_mut().zip(x) {
        *u = a * v;
    }
}

/// `y += a * x`
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (u, v) in y.iter_mut().zip(x) {
        *u += a * v;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::ParamStore;
    use rand::SeedableRng;

    fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = values.iter().map(|(n, t)| s.add(*n, t.clone())).collect();
        (s, ids)
    }

    /// Central finite differences of `f` over every parameter entry.
    fn finite_diff(store: &ParamStore, f: &dyn Fn(&ParamStore) -> f64, h: f64) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for id in store.ids() {
            let n = store.get(id).tensor.numel();
            let mut g = vec![0.0; n];
            for j in 0..n {
                let mut plus = store.clone();
                plus.get_mut(id).tensor.data_mut()[j] += h;
                let mut minus = store.clone();
                minus.get_mut(id).tensor.data_mut()[j] -= h;
                g[j] = (f(&plus) - f(&minus)) / (2.0 * h);
            }
            out.push(g);
        }
        out
    }

    fn check_grads(store: &ParamStore, f: &dyn Fn(&mut Graph) -> Var, tol: f64) {
        let mut g = Graph::new(store);
        let loss = f(&mut g);
        let grads = g.backward(loss).unwrap();
        let scalar = |s: &ParamStore| {
            let mut g = Graph::new(s);
            let l = f(&mut g);
            g.value(l).item()
        };
        let numeric = finite_diff(store, &scalar, 1e-5);
        for (id, num) in store.ids().zip(numeric) {
            let ana = grads.get(id).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; num.len()]);
            for (a, n) in ana.iter().zip(&num) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
                assert!(rel < tol, "param {}: analytic {a} vs numeric {n}", store.get(id).name);
            }
        }
    }

    #[test]
    fn masked_softmax_blocks_exactly() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::new([3], vec![5.0, 1.0, 1.0]));
        let add = Tensor::new([3], vec![f64::NEG_INFINITY, 0.0, 0.0]);
        let y = g.masked_softmax_additive(x, &add);
        assert_eq!(g.value(y).data(), &[0.0, 0.5, 0.5]);
    }

    #[test]
    fn fully_blocked_row_is_zero() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.masked_softmax(x, &[false, false, true, true]);
        let v = g.value(y).data();
        assert_eq!(&v[..2], &[0.0, 0.0]);
        assert!((v[2] + v[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let (s, ids) = store_with(&[("g", Tensor::full([4], 1.0)), ("b", Tensor::zeros([4]))]);
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::full([1, 4], 3.7));
        let (gamma, beta) = (g.param(ids[0]), g.param(ids[1]));
        let y = g.layer_norm(x, gamma, beta);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn elementwise_basics() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::new([2], vec![-2.0, 0.0]));
        let r = g.relu(x);
        let sn = g.sin(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0]);
        assert_eq!(g.value(sn).data()[1], 0.0);
    }

    #[test]
    fn square_gradient() {
        let (s, ids) = store_with(&[("x", Tensor::scalar(3.0))]);
        let mut g = Graph::new(&s);
        let x = g.param(ids[0]);
        let y = g.mul(x, x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(ids[0]).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let (s, ids) = store_with(&[("x", Tensor::zeros([2]))]);
        let mut g = Graph::new(&s);
        let x = g.param(ids[0]);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn linear_mse_matches_finite_differences() {
        let (s, _) = store_with(&[
            ("w", Tensor::new([2, 2], vec![0.3, -0.7, 1.1, 0.4])),
            ("x", Tensor::new([2, 2], vec![0.5, -1.2, 2.0, 0.1])),
        ]);
        let f = |g: &mut Graph| {
            let x = g.param(ParamId(1));
            let w = g.param(ParamId(0));
            let y = g.constant(Tensor::new([2, 2], vec![1.0, 0.0, -1.0, 0.5]));
            let p = g.matmul(x, w);
            let e = g.squared_error(p, y);
            g.mean(e)
        };
        check_grads(&s, &f, 1e-6);
    }

    #[test]
    fn masked_paths_get_zero_gradient() {
        let (s, ids) = store_with(&[("x", Tensor::new([1, 3], vec![0.2, 0.9, -0.4]))]);
        let mut g = Graph::new(&s);
        let x = g.param(ids[0]);
        let y = g.masked_softmax(x, &[true, false, true]);
        let w = g.constant(Tensor::new([1, 3], vec![1.0, 2.0, 3.0]));
        let z = g.mul(y, w);
        let l = g.sum(z);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(ids[0]).unwrap().data()[1], 0.0);
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (s, _) = store_with(&[
            ("a", Tensor::randn([2, 3, 4], 1.0, &mut rng)),
            ("w", Tensor::randn([4, 4], 0.5, &mut rng)),
            ("bias", Tensor::randn([4], 0.5, &mut rng)),
            ("gamma", Tensor::randn([4], 1.0, &mut rng)),
            ("beta", Tensor::randn([4], 1.0, &mut rng)),
            ("pad", Tensor::randn([4], 1.0, &mut rng)),
            ("logit_w", Tensor::randn([4, 3], 1.0, &mut rng)),
        ]);
        let f = |g: &mut Graph| {
            let p: Vec<Var> = (0..7).map(|i| g.param(ParamId(i))).collect();
            let (a, w, bias, gamma, beta, pad, lw) = (p[0], p[1], p[2], p[3], p[4], p[5], p[6]);
            let h = g.matmul(a, w);
            let h = g.add_bias(h, bias);
            let h = g.layer_norm(h, gamma, beta);
            let s1 = g.sin(h);
            let e1 = g.exp(s1);
            let h = g.add(h, e1);
            let h = g.scale(h, 0.5);
            // attention-like block
            let q = g.split_heads(h, 2);
            let sc = g.bmm(q, q, true);
            let keep: Vec<bool> = (0..g.value(sc).numel()).map(|i| i % 3 != 1).collect();
            let att = g.masked_softmax(sc, &keep);
            let o = g.bmm(att, q, false);
            let o = g.merge_heads(o, 2);
            let cat = g.concat_last(o, h);
            let cat = g.reshape(cat, [6, 8]);
            let left = g.reshape(o, [6, 4]);
            let rows = g.concat_rows(left, h);
            let idx = Rc::new(vec![Some(0), None, Some(7), Some(3), None, Some(11)]);
            let gat = g.gather_rows(rows, Some(pad), idx, [2, 3, 4]);
            let keep2 = [true, true, false, true, false, true];
            let mx = g.masked_reduce(gat, &keep2, ReduceMode::Max);
            let mn = g.masked_reduce(gat, &keep2, ReduceMode::Min);
            let d = g.sub(mx, mn);
            let r = g.relu(d);
            let logits = g.matmul(r, lw);
            let ce = g.cross_entropy(logits, &[2, 0]);
            let sq = g.mul(cat, cat);
            let m = g.mean(sq);
            let tot = g.add(ce, m);
            g.scale(tot, 1.0)
        };
        check_grads(&s, &f, 1e-5);
    }

    #[test]
    fn dropout_identity_in_eval() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::full([10], 1.0));
        assert_eq!(g.dropout(x, 0.5), x);
        let mut gt = Graph::with_mode(&s, true, 3);
        let x = gt.constant(Tensor::full([1000], 1.0));
        let y = gt.dropout(x, 0.5);
        let v = gt.value(y).data();
        assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));
        let zeros = v.iter().filter(|&&e| e == 0.0).count();
        assert!((400..600).contains(&zeros));
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn shape_mismatch_panics_with_shapes() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        g.matmul(a, b);
    }
}
