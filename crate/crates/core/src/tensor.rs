//! Dense f32 tensors with define-by-run reverse-mode differentiation.
//!
//! Storage is 32-bit; every reduction (matmul inner products, layernorm
//! statistics, softmax sums, gradient reductions) accumulates in 64-bit
//! before rounding back to storage. A [`Graph`] records operations in
//! insertion order and `backward` replays them in exact reverse order,
//! accumulating (never overwriting) gradients into tensors that require
//! them. Graphs are rebuilt on every forward pass.
//!
//! The graph also counts multiply-accumulate operations for every dense
//! multiplication it executes. Normalization, softmax and activations are
//! not counted; this is the same convention the analytic cost model uses,
//! so instrumented and analytic counts can be compared exactly.

use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

struct Inner {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
    /// (graph id, node index) of the op that produced this tensor, if any.
    node: Option<(u64, usize)>,
}

/// Shared handle to a dense row-major f32 array with optional gradient.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            inner.shape, inner.requires_grad
        )
    }
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Input(format!(
                "tensor shape {:?} does not describe {} elements",
                shape,
                data.len()
            )));
        }
        Ok(Self::build(shape, data, false))
    }

    /// Trainable leaf: gradients accumulate here during backward.
    pub fn param(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
        let t = Self::from_vec(shape, data)?;
        t.inner.borrow_mut().requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel = shape.iter().product();
        Self::build(shape, vec![0.0; numel], false)
    }

    pub fn scalar(v: f32) -> Tensor {
        Self::build(vec![1], vec![v], false)
    }

    fn build(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                data,
                requires_grad,
                grad: None,
                node: None,
            })),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn ndim(&self) -> usize {
        self.inner.borrow().shape.len()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.inner.borrow().shape[i]
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn data(&self) -> Ref<'_, [f32]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.borrow().data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Replace the stored values; shape is fixed at construction.
    pub fn set_data(&self, data: Vec<f32>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if data.len() != inner.data.len() {
            return Err(Error::Input(format!(
                "set_data: expected {} elements, got {}",
                inner.data.len(),
                data.len()
            )));
        }
        inner.data = data;
        inner.node = None;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn accumulate_grad(&self, src: &[f32]) {
        let mut inner = self.inner.borrow_mut();
        let n = inner.data.len();
        let grad = inner.grad.get_or_insert_with(|| vec![0.0; n]);
        for (g, s) in grad.iter_mut().zip(src) {
            *g += s;
        }
    }

    fn node_in(&self, graph_id: u64) -> Option<usize> {
        match self.inner.borrow().node {
            Some((gid, idx)) if gid == graph_id => Some(idx),
            _ => None,
        }
    }

    fn set_node(&self, graph_id: u64, idx: usize) {
        self.inner.borrow_mut().node = Some((graph_id, idx));
    }
}

fn add_assign(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

// ── Forward kernels ─────────────────────────────────────────────────

/// C[m,n] = A[m,k] · B[k,n], f64 accumulation, k ascending per element.
fn matmul_kernel(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    let mut acc = vec![0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (t, &av) in arow.iter().enumerate() {
            let av = av as f64;
            let brow = &b[t * n..(t + 1) * n];
            for (j, &bv) in brow.iter().enumerate() {
                acc[j] += av * bv as f64;
            }
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(acc.iter()) {
            *o = v as f32;
        }
    }
}

fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

fn gelu_derivative(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

fn softmax_row_f64(row: &[f32], out: &mut [f32]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let mut sum = 0f64;
    for &v in row {
        sum += (v as f64 - max).exp();
    }
    for (o, &v) in out.iter_mut().zip(row) {
        *o = ((v as f64 - max).exp() / sum) as f32;
    }
}

// ── Graph ───────────────────────────────────────────────────────────

enum Op {
    Matmul { a: Tensor, b: Tensor },
    Linear { x: Tensor, w: Tensor, bias: Option<Tensor> },
    Add { a: Tensor, b: Tensor },
    AddRows { x: Tensor, m: Tensor },
    Mul { a: Tensor, b: Tensor },
    ScaleBy { x: Tensor, alpha: Tensor },
    Scale { x: Tensor, c: f32 },
    Sum { x: Tensor },
    Gelu { x: Tensor },
    LayerNorm { x: Tensor, gamma: Tensor, beta: Tensor, stats: Vec<(f64, f64)> },
    SoftmaxRows { x: Tensor },
    CrossEntropy { logits: Tensor, labels: Vec<usize> },
    Attention { qkv: Tensor, heads: usize, head_dim: usize, probs: Vec<f32> },
    Slice2d { x: Tensor, r0: usize, c0: usize },
    Slice1d { x: Tensor },
    PrependToken { x: Tensor, tok: Tensor },
    FirstToken { x: Tensor },
    PadChannels { x: Tensor, front: bool },
    RepeatChannels { x: Tensor },
}

struct Node {
    out: Tensor,
    op: Op,
}

/// Define-by-run tape. Records ops whose result depends on a gradient
/// leaf (when built with [`Graph::training`]) and counts dense-multiply
/// MACs for everything it executes.
pub struct Graph {
    id: u64,
    grad_enabled: bool,
    nodes: Vec<Node>,
    macs: u64,
}

impl Graph {
    pub fn training() -> Graph {
        Self::new(true)
    }

    /// No-grad mode: nothing is recorded, backward is unavailable.
    pub fn inference() -> Graph {
        Self::new(false)
    }

    fn new(grad_enabled: bool) -> Graph {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            grad_enabled,
            nodes: Vec::new(),
            macs: 0,
        }
    }

    /// Multiply-accumulate count over all dense multiplications executed
    /// through this graph so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    fn tracked(&self, t: &Tensor) -> bool {
        self.grad_enabled && (t.requires_grad() || t.node_in(self.id).is_some())
    }

    fn push(&mut self, out: Tensor, op: Op, track: bool) -> Tensor {
        if track {
            out.set_node(self.id, self.nodes.len());
            self.nodes.push(Node {
                out: out.clone(),
                op,
            });
        }
        out
    }

    // ── ops ─────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        matmul_kernel(&a.data(), &b.data(), m, k, n, &mut data);
        self.macs += (m * k * n) as u64;
        let track = self.tracked(a) || self.tracked(b);
        let out = Tensor::build(vec![m, n], data, false);
        Ok(self.push(out, Op::Matmul { a: a.clone(), b: b.clone() }, track))
    }

    /// x[..., in] · w[in, out] (+ bias[out]); leading dims are flattened
    /// into rows.
    pub fn linear(&mut self, x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (sx, sw) = (x.shape(), w.shape());
        if sw.len() != 2 || sx.is_empty() || *sx.last().unwrap() != sw[0] {
            return Err(Error::ShapeMismatch { op: "linear", lhs: sx, rhs: sw });
        }
        let (in_dim, out_dim) = (sw[0], sw[1]);
        let rows = x.numel() / in_dim;
        if let Some(b) = bias {
            if b.numel() != out_dim {
                return Err(Error::ShapeMismatch { op: "linear bias", lhs: b.shape(), rhs: sw });
            }
        }
        let mut data = vec![0.0; rows * out_dim];
        matmul_kernel(&x.data(), &w.data(), rows, in_dim, out_dim, &mut data);
        if let Some(b) = bias {
            let bd = b.data();
            for r in 0..rows {
                add_assign(&mut data[r * out_dim..(r + 1) * out_dim], &bd);
            }
        }
        self.macs += (rows * in_dim * out_dim) as u64;
        let mut shape = sx;
        *shape.last_mut().unwrap() = out_dim;
        let track = self.tracked(x)
            || self.tracked(w)
            || bias.map(|b| self.tracked(b)).unwrap_or(false);
        let out = Tensor::build(shape, data, false);
        Ok(self.push(
            out,
            Op::Linear { x: x.clone(), w: w.clone(), bias: bias.cloned() },
            track,
        ))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch { op: "add", lhs: a.shape(), rhs: b.shape() });
        }
        let mut data = a.to_vec();
        add_assign(&mut data, &b.data());
        let track = self.tracked(a) || self.tracked(b);
        let out = Tensor::build(a.shape(), data, false);
        Ok(self.push(out, Op::Add { a: a.clone(), b: b.clone() }, track))
    }

    /// x[B, T, d] + m[T, d], broadcast over the batch dimension.
    pub fn add_rows(&mut self, x: &Tensor, m: &Tensor) -> Result<Tensor> {
        let (sx, sm) = (x.shape(), m.shape());
        if sx.len() != 3 || sm.len() != 2 || sx[1] != sm[0] || sx[2] != sm[1] {
            return Err(Error::ShapeMismatch { op: "add_rows", lhs: sx, rhs: sm });
        }
        let rows_per_batch = sm[0] * sm[1];
        let mut data = x.to_vec();
        let md = m.data();
        for b in 0..sx[0] {
            add_assign(&mut data[b * rows_per_batch..(b + 1) * rows_per_batch], &md);
        }
        let track = self.tracked(x) || self.tracked(m);
        let out = Tensor::build(sx, data, false);
        Ok(self.push(out, Op::AddRows { x: x.clone(), m: m.clone() }, track))
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch { op: "mul", lhs: a.shape(), rhs: b.shape() });
        }
        let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
        let track = self.tracked(a) || self.tracked(b);
        let out = Tensor::build(a.shape(), data, false);
        Ok(self.push(out, Op::Mul { a: a.clone(), b: b.clone() }, track))
    }

    /// Multiply by a learnable scalar (shape [1]).
    pub fn scale_by(&mut self, x: &Tensor, alpha: &Tensor) -> Result<Tensor> {
        if alpha.numel() != 1 {
            return Err(Error::ShapeMismatch { op: "scale_by", lhs: x.shape(), rhs: alpha.shape() });
        }
        let a = alpha.data()[0];
        let data = x.data().iter().map(|v| a * v).collect();
        let track = self.tracked(x) || self.tracked(alpha);
        let out = Tensor::build(x.shape(), data, false);
        Ok(self.push(out, Op::ScaleBy { x: x.clone(), alpha: alpha.clone() }, track))
    }

    /// Multiply by a fixed constant (loss weighting and the like).
    pub fn scale(&mut self, x: &Tensor, c: f32) -> Result<Tensor> {
        let data = x.data().iter().map(|v| c * v).collect();
        let track = self.tracked(x);
        let out = Tensor::build(x.shape(), data, false);
        Ok(self.push(out, Op::Scale { x: x.clone(), c }, track))
    }

    pub fn sum(&mut self, x: &Tensor) -> Result<Tensor> {
        let total: f64 = x.data().iter().map(|&v| v as f64).sum();
        let track = self.tracked(x);
        let out = Tensor::build(vec![1], vec![total as f32], false);
        Ok(self.push(out, Op::Sum { x: x.clone() }, track))
    }

    /// Exact-erf GELU. The tanh approximation is deliberately not used so
    /// checkpoints cannot silently change meaning.
    pub fn gelu(&mut self, x: &Tensor) -> Result<Tensor> {
        let data = x.data().iter().map(|&v| gelu_value(v as f64) as f32).collect();
        let track = self.tracked(x);
        let out = Tensor::build(x.shape(), data, false);
        Ok(self.push(out, Op::Gelu { x: x.clone() }, track))
    }

    pub fn layernorm(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f32,
    ) -> Result<Tensor> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layernorm eps must be > 0, got {eps}")));
        }
        let sx = x.shape();
        let d = *sx.last().ok_or_else(|| Error::Input("layernorm on rank-0 tensor".into()))?;
        if gamma.numel() != d || beta.numel() != d {
            return Err(Error::ShapeMismatch { op: "layernorm", lhs: sx, rhs: gamma.shape() });
        }
        let rows = x.numel() / d;
        let xd = x.data();
        let gd = gamma.data();
        let bd = beta.data();
        let mut data = vec![0.0f32; rows * d];
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps as f64).sqrt();
            stats.push((mean, rstd));
            for j in 0..d {
                let xhat = (row[j] as f64 - mean) * rstd;
                data[r * d + j] = (xhat * gd[j] as f64 + bd[j] as f64) as f32;
            }
        }
        drop(xd);
        let track = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        let out = Tensor::build(sx, data, false);
        Ok(self.push(
            out,
            Op::LayerNorm { x: x.clone(), gamma: gamma.clone(), beta: beta.clone(), stats },
            track,
        ))
    }

    /// Softmax over the last axis, max-stabilized, 64-bit sums.
    pub fn softmax(&mut self, x: &Tensor) -> Result<Tensor> {
        let sx = x.shape();
        let c = *sx.last().ok_or_else(|| Error::Input("softmax on rank-0 tensor".into()))?;
        let rows = x.numel() / c;
        let xd = x.data();
        let mut data = vec![0.0f32; rows * c];
        for r in 0..rows {
            softmax_row_f64(&xd[r * c..(r + 1) * c], &mut data[r * c..(r + 1) * c]);
        }
        drop(xd);
        let track = self.tracked(x);
        let out = Tensor::build(sx, data, false);
        Ok(self.push(out, Op::SoftmaxRows { x: x.clone() }, track))
    }

    /// Mean over the batch of -log softmax(logits)[label].
    pub fn cross_entropy(&mut self, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let s = logits.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let (b, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Input(format!(
                "cross_entropy: label {bad} out of range for {c} classes"
            )));
        }
        let ld = logits.data();
        let mut total = 0f64;
        for (r, &y) in labels.iter().enumerate() {
            let row = &ld[r * c..(r + 1) * c];
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            total += max + sum.ln() - row[y] as f64;
        }
        drop(ld);
        let loss = (total / b as f64) as f32;
        let track = self.tracked(logits);
        let out = Tensor::build(vec![1], vec![loss], false);
        Ok(self.push(
            out,
            Op::CrossEntropy { logits: logits.clone(), labels: labels.to_vec() },
            track,
        ))
    }

    /// Multi-head self-attention over a fused qkv activation.
    ///
    /// `qkv` is [B, T, 3·heads·head_dim] in head-major layout: head `h`
    /// owns columns `[h·3·hd, (h+1)·3·hd)` split as q|k|v. The output is
    /// [B, T, heads·head_dim] with head `h` in columns `[h·hd, (h+1)·hd)`.
    pub fn attention(&mut self, qkv: &Tensor, heads: usize, head_dim: usize) -> Result<Tensor> {
        let s = qkv.shape();
        let d = heads * head_dim;
        if s.len() != 3 || s[2] != 3 * d {
            return Err(Error::ShapeMismatch { op: "attention", lhs: s, rhs: vec![3 * d] });
        }
        let (b, t) = (s[0], s[1]);
        let scale = 1.0 / (head_dim as f64).sqrt();
        let xd = qkv.data();
        let c3 = 3 * d;
        let mut out = vec![0.0f32; b * t * d];
        let mut probs = vec![0.0f32; b * heads * t * t];
        let mut scores = vec![0f64; t];
        for bi in 0..b {
            for h in 0..heads {
                let base = h * 3 * head_dim;
                for i in 0..t {
                    let q = &xd[(bi * t + i) * c3 + base..(bi * t + i) * c3 + base + head_dim];
                    let mut max = f64::NEG_INFINITY;
                    for (j, sc) in scores.iter_mut().enumerate() {
                        let k = &xd[(bi * t + j) * c3 + base + head_dim
                            ..(bi * t + j) * c3 + base + 2 * head_dim];
                        let mut dot = 0f64;
                        for c in 0..head_dim {
                            dot += q[c] as f64 * k[c] as f64;
                        }
                        *sc = dot * scale;
                        max = max.max(*sc);
                    }
                    let mut sum = 0f64;
                    for sc in &scores {
                        sum += (sc - max).exp();
                    }
                    let prow = &mut probs[((bi * heads + h) * t + i) * t..][..t];
                    for (j, sc) in scores.iter().enumerate() {
                        prow[j] = ((sc - max).exp() / sum) as f32;
                    }
                    for c in 0..head_dim {
                        let mut acc = 0f64;
                        for j in 0..t {
                            let v = xd[(bi * t + j) * c3 + base + 2 * head_dim + c];
                            acc += prow[j] as f64 * v as f64;
                        }
                        out[(bi * t + i) * d + h * head_dim + c] = acc as f32;
                    }
                }
            }
        }
        drop(xd);
        self.macs += 2 * (b * t * t * d) as u64;
        let track = self.tracked(qkv);
        let out = Tensor::build(vec![b, t, d], out, false);
        Ok(self.push(
            out,
            Op::Attention { qkv: qkv.clone(), heads, head_dim, probs },
            track,
        ))
    }

    /// Leading-index rectangle of a rank-2 tensor. The full range is the
    /// identity and returns the input handle unchanged.
    pub fn slice_2d(
        &mut self,
        x: &Tensor,
        r0: usize,
        r1: usize,
        c0: usize,
        c1: usize,
    ) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 2 || r1 > s[0] || c1 > s[1] || r0 >= r1 || c0 >= c1 {
            return Err(Error::ShapeMismatch {
                op: "slice_2d",
                lhs: s,
                rhs: vec![r0, r1, c0, c1],
            });
        }
        if r0 == 0 && c0 == 0 && r1 == s[0] && c1 == s[1] {
            return Ok(x.clone());
        }
        let (rows, cols) = (r1 - r0, c1 - c0);
        let xd = x.data();
        let mut data = Vec::with_capacity(rows * cols);
        for r in r0..r1 {
            data.extend_from_slice(&xd[r * s[1] + c0..r * s[1] + c1]);
        }
        drop(xd);
        let track = self.tracked(x);
        let out = Tensor::build(vec![rows, cols], data, false);
        Ok(self.push(out, Op::Slice2d { x: x.clone(), r0, c0 }, track))
    }

    /// Leading prefix of a rank-1 tensor; full length is the identity.
    pub fn slice_1d(&mut self, x: &Tensor, len: usize) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 1 || len > s[0] || len == 0 {
            return Err(Error::ShapeMismatch { op: "slice_1d", lhs: s, rhs: vec![len] });
        }
        if len == s[0] {
            return Ok(x.clone());
        }
        let data = x.data()[..len].to_vec();
        let track = self.tracked(x);
        let out = Tensor::build(vec![len], data, false);
        Ok(self.push(out, Op::Slice1d { x: x.clone() }, track))
    }

    /// Prepend one token (broadcast over the batch): [B,P,d] -> [B,P+1,d].
    pub fn prepend_token(&mut self, x: &Tensor, tok: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 3 || tok.numel() != s[2] {
            return Err(Error::ShapeMismatch { op: "prepend_token", lhs: s, rhs: tok.shape() });
        }
        let (b, p, d) = (s[0], s[1], s[2]);
        let xd = x.data();
        let td = tok.data();
        let mut data = Vec::with_capacity(b * (p + 1) * d);
        for bi in 0..b {
            data.extend_from_slice(&td);
            data.extend_from_slice(&xd[bi * p * d..(bi + 1) * p * d]);
        }
        drop(xd);
        let track = self.tracked(x) || self.tracked(tok);
        let out = Tensor::build(vec![b, p + 1, d], data, false);
        Ok(self.push(out, Op::PrependToken { x: x.clone(), tok: tok.clone() }, track))
    }

    /// Token 0 of every batch element: [B,T,d] -> [B,d].
    pub fn first_token(&mut self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch { op: "first_token", lhs: s, rhs: vec![] });
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let xd = x.data();
        let mut data = Vec::with_capacity(b * d);
        for bi in 0..b {
            data.extend_from_slice(&xd[bi * t * d..bi * t * d + d]);
        }
        drop(xd);
        let track = self.tracked(x);
        let out = Tensor::build(vec![b, d], data, false);
        Ok(self.push(out, Op::FirstToken { x: x.clone() }, track))
    }

    /// Widen channels with zeros: [B,T,di] -> [B,T,dj]. `front` puts the
    /// zeros first (input occupies the trailing channels).
    pub fn pad_channels(&mut self, x: &Tensor, out_ch: usize, front: bool) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 3 || out_ch < s[2] {
            return Err(Error::ShapeMismatch { op: "pad_channels", lhs: s, rhs: vec![out_ch] });
        }
        let (rows, di) = (s[0] * s[1], s[2]);
        let offset = if front { out_ch - di } else { 0 };
        let xd = x.data();
        let mut data = vec![0.0f32; rows * out_ch];
        for r in 0..rows {
            data[r * out_ch + offset..r * out_ch + offset + di]
                .copy_from_slice(&xd[r * di..(r + 1) * di]);
        }
        drop(xd);
        let track = self.tracked(x);
        let out = Tensor::build(vec![s[0], s[1], out_ch], data, false);
        Ok(self.push(out, Op::PadChannels { x: x.clone(), front }, track))
    }

    /// Tile channels until `out_ch`: out[..,c] = x[..,c mod di].
    pub fn repeat_channels(&mut self, x: &Tensor, out_ch: usize) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 3 || out_ch < s[2] {
            return Err(Error::ShapeMismatch { op: "repeat_channels", lhs: s, rhs: vec![out_ch] });
        }
        let (rows, di) = (s[0] * s[1], s[2]);
        let xd = x.data();
        let mut data = vec![0.0f32; rows * out_ch];
        for r in 0..rows {
            for c in 0..out_ch {
                data[r * out_ch + c] = xd[r * di + c % di];
            }
        }
        drop(xd);
        let track = self.tracked(x);
        let out = Tensor::build(vec![s[0], s[1], out_ch], data, false);
        Ok(self.push(out, Op::RepeatChannels { x: x.clone() }, track))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Populate gradients of every requires-grad tensor reachable from
    /// `loss`. Repeated calls accumulate. Nodes are visited in exact
    /// reverse insertion order.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let Some(loss_idx) = loss.node_in(self.id) else {
            return Err(Error::Usage(
                "backward: loss was not produced by this graph".into(),
            ));
        };
        let mut local: Vec<Option<Vec<f32>>> = Vec::new();
        local.resize_with(self.nodes.len(), || None);
        local[loss_idx] = Some(vec![1.0]);
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = local[i].take() else { continue };
            for (t, contrib) in backprop_node(&self.nodes[i], &g) {
                if let Some(idx) = t.node_in(self.id) {
                    if let Some(buf) = &mut local[idx] {
                        add_assign(buf, &contrib);
                    } else {
                        local[idx] = Some(contrib);
                    }
                } else if t.requires_grad() {
                    t.accumulate_grad(&contrib);
                }
            }
        }
        Ok(())
    }
}

/// Per-op vector-Jacobian products. Returns (input, contribution) pairs.
fn backprop_node(node: &Node, g: &[f32]) -> Vec<(Tensor, Vec<f32>)> {
    match &node.op {
        Op::Matmul { a, b } => {
            let (sa, sb) = (a.shape(), b.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let bt = transpose(&b.data(), k, n);
            let mut da = vec![0.0; m * k];
            matmul_kernel(g, &bt, m, n, k, &mut da);
            let at = transpose(&a.data(), m, k);
            let mut db = vec![0.0; k * n];
            matmul_kernel(&at, g, k, m, n, &mut db);
            vec![(a.clone(), da), (b.clone(), db)]
        }
        Op::Linear { x, w, bias } => {
            let sw = w.shape();
            let (in_dim, out_dim) = (sw[0], sw[1]);
            let rows = x.numel() / in_dim;
            let wt = transpose(&w.data(), in_dim, out_dim);
            let mut dx = vec![0.0; rows * in_dim];
            matmul_kernel(g, &wt, rows, out_dim, in_dim, &mut dx);
            let xt = transpose(&x.data(), rows, in_dim);
            let mut dw = vec![0.0; in_dim * out_dim];
            matmul_kernel(&xt, g, in_dim, rows, out_dim, &mut dw);
            let mut outs = vec![(x.clone(), dx), (w.clone(), dw)];
            if let Some(b) = bias {
                let mut db = vec![0f64; out_dim];
                for r in 0..rows {
                    for j in 0..out_dim {
                        db[j] += g[r * out_dim + j] as f64;
                    }
                }
                outs.push((b.clone(), db.iter().map(|&v| v as f32).collect()));
            }
            outs
        }
        Op::Add { a, b } => vec![(a.clone(), g.to_vec()), (b.clone(), g.to_vec())],
        Op::AddRows { x, m } => {
            let sm = m.shape();
            let per_batch = sm[0] * sm[1];
            let batches = g.len() / per_batch;
            let mut dm = vec![0f64; per_batch];
            for b in 0..batches {
                for j in 0..per_batch {
                    dm[j] += g[b * per_batch + j] as f64;
                }
            }
            vec![
                (x.clone(), g.to_vec()),
                (m.clone(), dm.iter().map(|&v| v as f32).collect()),
            ]
        }
        Op::Mul { a, b } => {
            let da: Vec<f32> = g.iter().zip(b.data().iter()).map(|(g, v)| g * v).collect();
            let db: Vec<f32> = g.iter().zip(a.data().iter()).map(|(g, v)| g * v).collect();
            vec![(a.clone(), da), (b.clone(), db)]
        }
        Op::ScaleBy { x, alpha } => {
            let a = alpha.data()[0];
            let dx: Vec<f32> = g.iter().map(|v| a * v).collect();
            let da: f64 = g
                .iter()
                .zip(x.data().iter())
                .map(|(&g, &x)| g as f64 * x as f64)
                .sum();
            vec![(x.clone(), dx), (alpha.clone(), vec![da as f32])]
        }
        Op::Scale { x, c } => vec![(x.clone(), g.iter().map(|v| c * v).collect())],
        Op::Sum { x } => vec![(x.clone(), vec![g[0]; x.numel()])],
        Op::Gelu { x } => {
            let dx = g
                .iter()
                .zip(x.data().iter())
                .map(|(&g, &x)| (g as f64 * gelu_derivative(x as f64)) as f32)
                .collect();
            vec![(x.clone(), dx)]
        }
        Op::LayerNorm { x, gamma, beta, stats } => {
            let d = gamma.numel();
            let rows = x.numel() / d;
            let xd = x.data();
            let gd = gamma.data();
            let mut dx = vec![0.0f32; rows * d];
            let mut dgamma = vec![0f64; d];
            let mut dbeta = vec![0f64; d];
            for r in 0..rows {
                let (mean, rstd) = stats[r];
                let row = &xd[r * d..(r + 1) * d];
                let grow = &g[r * d..(r + 1) * d];
                let mut sum_dxhat = 0f64;
                let mut sum_dxhat_xhat = 0f64;
                for j in 0..d {
                    let xhat = (row[j] as f64 - mean) * rstd;
                    let dxhat = grow[j] as f64 * gd[j] as f64;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    dgamma[j] += grow[j] as f64 * xhat;
                    dbeta[j] += grow[j] as f64;
                }
                let inv_d = 1.0 / d as f64;
                for j in 0..d {
                    let xhat = (row[j] as f64 - mean) * rstd;
                    let dxhat = grow[j] as f64 * gd[j] as f64;
                    dx[r * d + j] =
                        (rstd * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat)) as f32;
                }
            }
            vec![
                (x.clone(), dx),
                (gamma.clone(), dgamma.iter().map(|&v| v as f32).collect()),
                (beta.clone(), dbeta.iter().map(|&v| v as f32).collect()),
            ]
        }
        Op::SoftmaxRows { x } => {
            let s = node.out.data();
            let c = *x.shape().last().unwrap();
            let rows = x.numel() / c;
            let mut dx = vec![0.0f32; rows * c];
            for r in 0..rows {
                let srow = &s[r * c..(r + 1) * c];
                let grow = &g[r * c..(r + 1) * c];
                let mut dot = 0f64;
                for j in 0..c {
                    dot += grow[j] as f64 * srow[j] as f64;
                }
                for j in 0..c {
                    dx[r * c + j] = (srow[j] as f64 * (grow[j] as f64 - dot)) as f32;
                }
            }
            vec![(x.clone(), dx)]
        }
        Op::CrossEntropy { logits, labels } => {
            let s = logits.shape();
            let (b, c) = (s[0], s[1]);
            let ld = logits.data();
            let g0 = g[0] as f64 / b as f64;
            let mut dl = vec![0.0f32; b * c];
            for (r, &y) in labels.iter().enumerate() {
                let row = &ld[r * c..(r + 1) * c];
                let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
                let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
                for j in 0..c {
                    let p = (row[j] as f64 - max).exp() / sum;
                    let onehot = if j == y { 1.0 } else { 0.0 };
                    dl[r * c + j] = (g0 * (p - onehot)) as f32;
                }
            }
            vec![(logits.clone(), dl)]
        }
        Op::Attention { qkv, heads, head_dim, probs } => {
            let s = qkv.shape();
            let (b, t) = (s[0], s[1]);
            let (heads, hd) = (*heads, *head_dim);
            let d = heads * hd;
            let c3 = 3 * d;
            let scale = 1.0 / (hd as f64).sqrt();
            let xd = qkv.data();
            let mut dqkv = vec![0.0f32; b * t * c3];
            let mut dp = vec![0f64; t];
            let mut ds = vec![0f64; t * t];
            for bi in 0..b {
                for h in 0..heads {
                    let base = h * 3 * hd;
                    // dScores for the whole (b, h) block first.
                    for i in 0..t {
                        let prow = &probs[((bi * heads + h) * t + i) * t..][..t];
                        let grow = &g[(bi * t + i) * d + h * hd..(bi * t + i) * d + (h + 1) * hd];
                        let mut dot = 0f64;
                        for (j, dpj) in dp.iter_mut().enumerate() {
                            let v = &xd[(bi * t + j) * c3 + base + 2 * hd
                                ..(bi * t + j) * c3 + base + 3 * hd];
                            let mut acc = 0f64;
                            for c in 0..hd {
                                acc += grow[c] as f64 * v[c] as f64;
                            }
                            *dpj = acc;
                            dot += acc * prow[j] as f64;
                        }
                        for j in 0..t {
                            ds[i * t + j] = prow[j] as f64 * (dp[j] - dot) * scale;
                        }
                    }
                    // dV[j] += sum_i p[i,j] * gout[i]; dQ/dK from dScores.
                    for j in 0..t {
                        for c in 0..hd {
                            let mut acc = 0f64;
                            for i in 0..t {
                                let p = probs[((bi * heads + h) * t + i) * t + j] as f64;
                                acc += p * g[(bi * t + i) * d + h * hd + c] as f64;
                            }
                            dqkv[(bi * t + j) * c3 + base + 2 * hd + c] += acc as f32;
                        }
                    }
                    for i in 0..t {
                        for c in 0..hd {
                            let mut acc = 0f64;
                            for j in 0..t {
                                let k = xd[(bi * t + j) * c3 + base + hd + c] as f64;
                                acc += ds[i * t + j] * k;
                            }
                            dqkv[(bi * t + i) * c3 + base + c] += acc as f32;
                        }
                    }
                    for j in 0..t {
                        for c in 0..hd {
                            let mut acc = 0f64;
                            for i in 0..t {
                                let q = xd[(bi * t + i) * c3 + base + c] as f64;
                                acc += ds[i * t + j] * q;
                            }
                            dqkv[(bi * t + j) * c3 + base + hd + c] += acc as f32;
                        }
                    }
                }
            }
            drop(xd);
            vec![(qkv.clone(), dqkv)]
        }
        Op::Slice2d { x, r0, c0 } => {
            let s = x.shape();
            let so = node.out.shape();
            let (rows, cols) = (so[0], so[1]);
            let mut dx = vec![0.0f32; x.numel()];
            for r in 0..rows {
                for c in 0..cols {
                    dx[(r0 + r) * s[1] + c0 + c] = g[r * cols + c];
                }
            }
            vec![(x.clone(), dx)]
        }
        Op::Slice1d { x } => {
            let mut dx = vec![0.0f32; x.numel()];
            dx[..g.len()].copy_from_slice(g);
            vec![(x.clone(), dx)]
        }
        Op::PrependToken { x, tok } => {
            let so = node.out.shape();
            let (b, t, d) = (so[0], so[1], so[2]);
            let p = t - 1;
            let mut dx = vec![0.0f32; b * p * d];
            let mut dtok = vec![0f64; d];
            for bi in 0..b {
                for c in 0..d {
                    dtok[c] += g[bi * t * d + c] as f64;
                }
                dx[bi * p * d..(bi + 1) * p * d]
                    .copy_from_slice(&g[bi * t * d + d..(bi + 1) * t * d]);
            }
            vec![
                (x.clone(), dx),
                (tok.clone(), dtok.iter().map(|&v| v as f32).collect()),
            ]
        }
        Op::FirstToken { x } => {
            let s = x.shape();
            let (b, t, d) = (s[0], s[1], s[2]);
            let mut dx = vec![0.0f32; b * t * d];
            for bi in 0..b {
                dx[bi * t * d..bi * t * d + d].copy_from_slice(&g[bi * d..(bi + 1) * d]);
            }
            vec![(x.clone(), dx)]
        }
        Op::PadChannels { x, front } => {
            let s = x.shape();
            let (rows, di) = (s[0] * s[1], s[2]);
            let dj = node.out.shape()[2];
            let offset = if *front { dj - di } else { 0 };
            let mut dx = vec![0.0f32; rows * di];
            for r in 0..rows {
                dx[r * di..(r + 1) * di]
                    .copy_from_slice(&g[r * dj + offset..r * dj + offset + di]);
            }
            vec![(x.clone(), dx)]
        }
        Op::RepeatChannels { x } => {
            let s = x.shape();
            let (rows, di) = (s[0] * s[1], s[2]);
            let dj = node.out.shape()[2];
            let mut dx = vec![0.0f32; rows * di];
            for r in 0..rows {
                let mut acc = vec![0f64; di];
                for c in 0..dj {
                    acc[c % di] += g[r * dj + c] as f64;
                }
                for c in 0..di {
                    dx[r * di + c] = acc[c] as f32;
                }
            }
            vec![(x.clone(), dx)]
        }
    }
}
