//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Each op appends a node holding its forward value and whatever it needs for
//! the backward pass. Nodes only reference earlier nodes, so the tape is a DAG
//! in topological order by construction and `backward` is a single reverse
//! sweep.

use super::tensor::{kernels, Tensor};
use crate::error::{Error, Result};
use crate::rng::RngState;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        means: Vec<f32>,
        rstds: Vec<f32>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seg_len: usize,
        probs: Vec<f32>,
    },
    Dropout(Var, Vec<f32>),
    Gather(Vec<(Var, usize)>),
    SegmentMean(Var, usize),
    MseMasked {
        pred: Var,
        target: Var,
        mask: Vec<bool>,
        count: usize,
    },
    CrossEntropy(Var, Vec<usize>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

const CE_FLOOR: f32 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// `a[n x k] * b[k x m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        let out = kernels::matmul(av.data(), bv.data(), n, k, m);
        self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.push(t, Op::Add(a, b), "add")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(Error::shape(
                "mul",
                format!("{:?} * {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.push(t, Op::Mul(a, b), "mul")
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut data = xv.data().to_vec();
        kernels::add_row_inplace(&mut data, bv.data());
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(t, Op::AddRow(x, bias), "add_row")
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * factor).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(t, Op::Scale(x, factor), "scale")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| kernels::gelu(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(t, Op::Gelu(x), "gelu")
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let cols = xv.cols();
        if gv.len() != cols || bv.len() != cols {
            return Err(Error::shape(
                "layer_norm",
                format!("{:?} with gain {:?}", xv.shape(), gv.shape()),
            ));
        }
        let (out, means, rstds) = kernels::layer_norm(xv.data(), cols, gv.data(), bv.data());
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                rstds,
            },
            "layer_norm",
        )
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !xv.is_finite() {
            return Err(Error::NonFinite("softmax input"));
        }
        let cols = xv.cols();
        let mut out = vec![0.0f32; xv.len()];
        for (src, dst) in xv.data().chunks(cols).zip(out.chunks_mut(cols)) {
            kernels::softmax_row(src, dst);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(t, Op::Softmax(x), "softmax")
    }

    /// Scaled dot-product attention, independently per segment of `seg_len`
    /// consecutive rows and per head. `q`, `k`, `v` are `[segments*seg_len x dim]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seg_len: usize,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let dim = qv.cols();
        let rows = qv.rows();
        if !qv.same_shape(kv)
            || !qv.same_shape(vv)
            || heads == 0
            || dim % heads != 0
            || seg_len == 0
            || rows % seg_len != 0
        {
            return Err(Error::shape(
                "attention",
                format!("q {:?}, heads {heads}, segment {seg_len}", qv.shape()),
            ));
        }
        let (out, probs) = attention_forward(qv.data(), kv.data(), vv.data(), dim, heads, seg_len);
        let t = Tensor::new(qv.shape().to_vec(), out)?;
        self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seg_len,
                probs,
            },
            "attention",
        )
    }

    /// Inverted dropout. Identity (same node) in eval mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f32, mode: Mode, rng: &mut RngState) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate}")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let xv = self.value(x);
        let mask = dropout_mask(xv.len(), rate, rng);
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(t, Op::Dropout(x, mask), "dropout")
    }

    /// Builds a matrix whose i-th row is row `sources[i].1` of `sources[i].0`.
    pub fn gather_rows(&mut self, sources: &[(Var, usize)]) -> Result<Var> {
        let Some(&(first, _)) = sources.first() else {
            return Err(Error::shape("gather_rows", "no rows"));
        };
        let cols = self.value(first).cols();
        let mut data = Vec::with_capacity(sources.len() * cols);
        for &(v, r) in sources {
            let t = self.value(v);
            if t.cols() != cols || r >= t.rows() {
                return Err(Error::shape(
                    "gather_rows",
                    format!("row {r} of {:?} into width {cols}", t.shape()),
                ));
            }
            data.extend_from_slice(t.row(r));
        }
        let t = Tensor::matrix(sources.len(), cols, data)?;
        self.push(t, Op::Gather(sources.to_vec()), "gather_rows")
    }

    /// Mean over each block of `seg_len` consecutive rows.
    pub fn segment_mean(&mut self, x: Var, seg_len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if seg_len == 0 || rows % seg_len != 0 {
            return Err(Error::shape(
                "segment_mean",
                format!("{rows} rows in segments of {seg_len}"),
            ));
        }
        let segs = rows / seg_len;
        let mut out = Vec::with_capacity(segs * cols);
        let mut acc = vec![0.0f64; cols];
        for s in 0..segs {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for r in s * seg_len..(s + 1) * seg_len {
                for (a, &v) in acc.iter_mut().zip(xv.row(r)) {
                    *a += f64::from(v);
                }
            }
            out.extend(acc.iter().map(|a| (a / seg_len as f64) as f32));
        }
        let t = Tensor::matrix(segs, cols, out)?;
        self.push(t, Op::SegmentMean(x, seg_len), "segment_mean")
    }

    /// `(1/|M|) * sum over masked rows i of ||pred_i - target_i||^2`.
    pub fn mse_masked(&mut self, pred: Var, target: Var, mask: &[bool]) -> Result<Var> {
        let (pv, tv) = (self.value(pred), self.value(target));
        if !pv.same_shape(tv) || mask.len() != pv.rows() {
            return Err(Error::shape(
                "mse_masked",
                format!(
                    "pred {:?}, target {:?}, mask {}",
                    pv.shape(),
                    tv.shape(),
                    mask.len()
                ),
            ));
        }
        let value = masked_sq_error(pv, tv, mask)?;
        let count = mask.iter().filter(|&&m| m).count();
        self.push(
            Tensor::scalar(value),
            Op::MseMasked {
                pred,
                target,
                mask: mask.to_vec(),
                count,
            },
            "mse_masked",
        )
    }

    /// Mean negative log-likelihood of `labels` under row-wise probabilities.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let pv = self.value(probs);
        if labels.len() != pv.rows() || labels.is_empty() {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {:?}", labels.len(), pv.shape()),
            ));
        }
        let cols = pv.cols();
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::UnknownLabel { label: bad });
        }
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -f64::from(pv.row(i)[l].max(CE_FLOOR)).ln())
            .sum();
        let value = (total / labels.len() as f64) as f32;
        self.push(
            Tensor::scalar(value),
            Op::CrossEntropy(probs, labels.to_vec()),
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.value(x).data().iter().map(|&v| f64::from(v)).sum();
        self.push(Tensor::scalar(total as f32), Op::Sum(x), "sum")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::shape("backward", "loss is not on this tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        if grads
            .iter()
            .flatten()
            .any(|g| g.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite("backward"));
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (at, bt) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (n, k, m) = (at.rows(), at.cols(), bt.cols());
                let ga = kernels::matmul_nt(g, bt.data(), n, k, m);
                let gb = kernels::matmul_tn(at.data(), g, n, k, m);
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, g);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f32> = g.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                let gb: Vec<f32> = g.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::AddRow(x, bias) => {
                accumulate(grads, *x, g);
                let cols = self.nodes[bias.0].value.len();
                let mut gb = vec![0.0f64; cols];
                for row in g.chunks(cols) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += f64::from(*v);
                    }
                }
                let gb: Vec<f32> = gb.into_iter().map(|v| v as f32).collect();
                accumulate(grads, *bias, &gb);
            }
            Op::Scale(x, f) => {
                let gx: Vec<f32> = g.iter().map(|v| v * f).collect();
                accumulate(grads, *x, &gx);
            }
            Op::Gelu(x) => {
                let gx: Vec<f32> = g
                    .iter()
                    .zip(val(*x))
                    .map(|(g, &v)| g * kernels::gelu_grad(v))
                    .collect();
                accumulate(grads, *x, &gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                rstds,
            } => {
                let xv = val(*x);
                let gam = val(*gamma);
                let cols = gam.len();
                let mut gx = vec![0.0f32; xv.len()];
                let mut gg = vec![0.0f64; cols];
                let mut gbeta = vec![0.0f64; cols];
                let mut xhat = vec![0.0f32; cols];
                let mut dxhat = vec![0.0f32; cols];
                for r in 0..means.len() {
                    let (mean, rstd) = (means[r], rstds[r]);
                    let row = &xv[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let mut s1 = 0.0f64;
                    let mut s2 = 0.0f64;
                    for c in 0..cols {
                        xhat[c] = (row[c] - mean) * rstd;
                        dxhat[c] = grow[c] * gam[c];
                        gg[c] += f64::from(grow[c] * xhat[c]);
                        gbeta[c] += f64::from(grow[c]);
                        s1 += f64::from(dxhat[c]);
                        s2 += f64::from(dxhat[c] * xhat[c]);
                    }
                    let m1 = (s1 / cols as f64) as f32;
                    let m2 = (s2 / cols as f64) as f32;
                    for c in 0..cols {
                        gx[r * cols + c] = rstd * (dxhat[c] - m1 - xhat[c] * m2);
                    }
                }
                accumulate(grads, *x, &gx);
                let gg: Vec<f32> = gg.into_iter().map(|v| v as f32).collect();
                let gbeta: Vec<f32> = gbeta.into_iter().map(|v| v as f32).collect();
                accumulate(grads, *gamma, &gg);
                accumulate(grads, *beta, &gbeta);
            }
            Op::Softmax(x) => {
                let p = node.value.data();
                let cols = node.value.cols();
                let mut gx = vec![0.0f32; p.len()];
                for ((prow, grow), out) in
                    p.chunks(cols).zip(g.chunks(cols)).zip(gx.chunks_mut(cols))
                {
                    let dotp: f64 = prow.iter().zip(grow).map(|(a, b)| f64::from(a * b)).sum();
                    let dotp = dotp as f32;
                    for c in 0..cols {
                        out[c] = prow[c] * (grow[c] - dotp);
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seg_len,
                probs,
            } => {
                let dim = node.value.cols();
                let (gq, gk, gv) =
                    attention_backward(val(*q), val(*k), val(*v), probs, g, dim, *heads, *seg_len);
                accumulate(grads, *q, &gq);
                accumulate(grads, *k, &gk);
                accumulate(grads, *v, &gv);
            }
            Op::Dropout(x, mask) => {
                let gx: Vec<f32> = g.iter().zip(mask).map(|(g, m)| g * m).collect();
                accumulate(grads, *x, &gx);
            }
            Op::Gather(sources) => {
                let cols = node.value.cols();
                for (i, &(src, r)) in sources.iter().enumerate() {
                    let len = self.nodes[src.0].value.len();
                    let slot = grads[src.0].get_or_insert_with(|| vec![0.0; len]);
                    for (d, s) in slot[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(&g[i * cols..(i + 1) * cols])
                    {
                        *d += s;
                    }
                }
            }
            Op::SegmentMean(x, seg_len) => {
                let cols = node.value.cols();
                let inv = 1.0 / *seg_len as f32;
                let xlen = self.nodes[x.0].value.len();
                let mut gx = vec![0.0f32; xlen];
                for (r, out) in gx.chunks_mut(cols).enumerate() {
                    let seg = r / seg_len;
                    for (o, gv) in out.iter_mut().zip(&g[seg * cols..(seg + 1) * cols]) {
                        *o = gv * inv;
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::MseMasked {
                pred,
                target,
                mask,
                count,
            } => {
                let (pv, tv) = (val(*pred), val(*target));
                let cols = self.nodes[pred.0].value.cols();
                let scale = 2.0 * g[0] / *count as f32;
                let mut gp = vec![0.0f32; pv.len()];
                for (r, &m) in mask.iter().enumerate() {
                    if !m {
                        continue;
                    }
                    for c in r * cols..(r + 1) * cols {
                        gp[c] = scale * (pv[c] - tv[c]);
                    }
                }
                let gt: Vec<f32> = gp.iter().map(|v| -v).collect();
                accumulate(grads, *pred, &gp);
                accumulate(grads, *target, &gt);
            }
            Op::CrossEntropy(probs, labels) => {
                let pt = &self.nodes[probs.0].value;
                let cols = pt.cols();
                let n = labels.len() as f32;
                let mut gp = vec![0.0f32; pt.len()];
                for (i, &l) in labels.iter().enumerate() {
                    let p = pt.row(i)[l];
                    // clamped region is flat
                    if p > CE_FLOOR {
                        gp[i * cols + l] = -g[0] / (n * p);
                    }
                }
                accumulate(grads, *probs, &gp);
            }
            Op::Sum(x) => {
                let len = self.nodes[x.0].value.len();
                accumulate(grads, *x, &vec![g[0]; len]);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, g: &[f32]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Keep-mask for inverted dropout: survivors carry `1/(1-rate)`, drops `0`.
pub fn dropout_mask(len: usize, rate: f32, rng: &mut RngState) -> Vec<f32> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| {
            if rng.uniform() < f64::from(rate) {
                0.0
            } else {
                keep
            }
        })
        .collect()
}

pub(crate) fn masked_sq_error(pred: &Tensor, target: &Tensor, mask: &[bool]) -> Result<f32> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let mut total = 0.0f64;
    for (r, &m) in mask.iter().enumerate() {
        if m {
            total += pred
                .row(r)
                .iter()
                .zip(target.row(r))
                .map(|(p, t)| f64::from(p - t).powi(2))
                .sum::<f64>();
        }
    }
    Ok((total / count as f64) as f32)
}

/// Returns (output, attention probabilities laid out `[segment][head][i][j]`).
pub(crate) fn attention_forward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    dim: usize,
    heads: usize,
    seg_len: usize,
) -> (Vec<f32>, Vec<f32>) {
    let hd = dim / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let segs = q.len() / dim / seg_len;
    let mut out = vec![0.0f32; q.len()];
    let mut probs = vec![0.0f32; segs * heads * seg_len * seg_len];
    let mut scores = vec![0.0f32; seg_len];
    for s in 0..segs {
        let base = s * seg_len;
        for h in 0..heads {
            let off = h * hd;
            for i in 0..seg_len {
                let qi = &q[(base + i) * dim + off..(base + i) * dim + off + hd];
                for (j, sc) in scores.iter_mut().enumerate() {
                    let kj = &k[(base + j) * dim + off..(base + j) * dim + off + hd];
                    *sc = kernels::dot(qi, kj) * scale;
                }
                let p0 = ((s * heads + h) * seg_len + i) * seg_len;
                let prow = &mut probs[p0..p0 + seg_len];
                kernels::softmax_row(&scores, prow);
                let orow = &mut out[(base + i) * dim + off..(base + i) * dim + off + hd];
                for (j, &p) in prow.iter().enumerate() {
                    let vj = &v[(base + j) * dim + off..(base + j) * dim + off + hd];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    probs: &[f32],
    g: &[f32],
    dim: usize,
    heads: usize,
    seg_len: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let hd = dim / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let segs = q.len() / dim / seg_len;
    let mut gq = vec![0.0f32; q.len()];
    let mut gk = vec![0.0f32; k.len()];
    let mut gv = vec![0.0f32; v.len()];
    let mut dp = vec![0.0f32; seg_len];
    let at = |row: usize, off: usize| row * dim + off;
    for s in 0..segs {
        let base = s * seg_len;
        for h in 0..heads {
            let off = h * hd;
            for i in 0..seg_len {
                let p0 = ((s * heads + h) * seg_len + i) * seg_len;
                let prow = &probs[p0..p0 + seg_len];
                let gi = &g[at(base + i, off)..at(base + i, off) + hd];
                // dP_ij = dO_i . V_j ; dV_j += P_ij dO_i
                for j in 0..seg_len {
                    let vj = &v[at(base + j, off)..at(base + j, off) + hd];
                    dp[j] = kernels::dot(gi, vj);
                    let gvj = &mut gv[at(base + j, off)..at(base + j, off) + hd];
                    for (d, x) in gvj.iter_mut().zip(gi) {
                        *d += prow[j] * x;
                    }
                }
                let dotp: f32 = prow.iter().zip(&dp).map(|(p, d)| p * d).sum();
                for j in 0..seg_len {
                    let ds = prow[j] * (dp[j] - dotp) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let (qi0, kj0) = (at(base + i, off), at(base + j, off));
                    for c in 0..hd {
                        gq[qi0 + c] += ds * k[kj0 + c];
                        gk[kj0 + c] += ds * q[qi0 + c];
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}
