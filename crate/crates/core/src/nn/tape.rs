//! Reverse-mode differentiation over 2-D values.
//!
//! Operations are recorded in evaluation order; [`Tape::backward`] walks the
//! record in reverse and accumulates vector-Jacobian products. Scalars are
//! `1×1` matrices.

use std::collections::HashMap;

use super::kernels::{self, argmax};
use super::{ParamId, ParameterSet};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f32>,
    op: Op,
    requires_grad: bool,
    /// Double-precision value of scalar reductions, kept for gradient checks.
    wide: Option<f64>,
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Gather {
        src: Var,
        idx: Vec<usize>,
    },
    SliceCols {
        src: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Attention(Box<AttentionSaved>),
    SoftmaxCe {
        logits: Var,
        probs: Vec<f32>,
        targets: Vec<usize>,
        mask: Vec<bool>,
        count: usize,
    },
    BceLogits {
        logits: Var,
        targets: Vec<f32>,
        mask: Vec<bool>,
        count: usize,
    },
    Sum(Var),
}

struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    causal: bool,
    segments: Vec<(usize, usize)>,
    /// Per segment, per head, a `len×len` block of attention weights.
    probs: Vec<f32>,
}

/// A contiguous run of rows that attend only among themselves.
pub type Segment = (usize, usize);

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f32>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
            wide: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_wide(&mut self, wide: f64, op: Op, requires_grad: bool) -> Var {
        let v = self.push(1, 1, vec![wide as f32], op, requires_grad);
        self.nodes[v.0].wide = Some(wide);
        v
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f32>) -> Var {
        assert_eq!(value.len(), rows * cols, "constant shape");
        self.push(rows, cols, value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (for tests on input gradients).
    pub fn input(&mut self, rows: usize, cols: usize, value: Vec<f32>) -> Var {
        assert_eq!(value.len(), rows * cols, "input shape");
        self.push(rows, cols, value, Op::Leaf, true)
    }

    /// Brings a parameter onto the tape. Vectors become `1×n` rows.
    pub fn param(&mut self, ps: &ParameterSet, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = ps.get(id);
        let (rows, cols) = (t.rows(), t.cols());
        let v = self.push(rows, cols, t.data().to_vec(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// Copies `v` as a constant: gradient stops here.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (r, c, val) = (n.rows, n.cols, n.value.clone());
        self.constant(r, c, val)
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f32 {
        assert_eq!(self.shape(v), (1, 1), "not a scalar");
        self.nodes[v.0].value[0]
    }

    /// A scalar as accumulated before rounding to 32 bits, when the node is
    /// a loss reduction or a sum/difference/scaling of such.
    pub fn scalar_f64(&self, v: Var) -> f64 {
        assert_eq!(self.shape(v), (1, 1), "not a scalar");
        let n = &self.nodes[v.0];
        n.wide.unwrap_or(n.value[0] as f64)
    }

    fn wide_of(&self, v: Var) -> Option<f64> {
        self.nodes[v.0].wide
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner extents {k} vs {k2}");
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let g = self.needs(&[a, b]);
        self.push(m, n, out, Op::MatMul(a, b), g)
    }

    /// Adds a `1×n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(self.shape(bias), (1, n), "bias shape");
        let mut out = self.value(x).to_vec();
        kernels::add_row_bias(&mut out, self.value(bias));
        let g = self.needs(&[x, bias]);
        self.push(m, n, out, Op::AddRow(x, bias), g)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!((m, n), self.shape(b), "elementwise shapes");
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let g = self.needs(&[a, b]);
        self.push(m, n, out, op, g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y, Op::Add(a, b));
        if let (Some(x), Some(y)) = (self.wide_of(a), self.wide_of(b)) {
            self.nodes[out.0].wide = Some(x + y);
        }
        out
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b));
        if let (Some(x), Some(y)) = (self.wide_of(a), self.wide_of(b)) {
            self.nodes[out.0].wide = Some(x - y);
        }
        out
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let g = self.needs(&[a]);
        self.push(m, n, out, op, g)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let out = self.map(a, |x| x * s, Op::Scale(a, s));
        if let Some(x) = self.wide_of(a) {
            self.nodes[out.0].wide = Some(x * s as f64);
        }
        out
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f32::tanh, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, kernels::gelu, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (m, d) = self.shape(x);
        assert_eq!(self.shape(gain), (1, d), "layer norm gain");
        assert_eq!(self.shape(bias), (1, d), "layer norm bias");
        let mut out = vec![0.0; m * d];
        let mut xhat = vec![0.0; m * d];
        let mut rstd = vec![0.0; m];
        let unit = vec![1.0; d];
        let zero = vec![0.0; d];
        {
            let xv = self.value(x);
            let gv = self.value(gain);
            let bv = self.value(bias);
            for i in 0..m {
                let row = &xv[i * d..(i + 1) * d];
                let (_, r) = kernels::layer_norm_row(row, &unit, &zero, &mut xhat[i * d..(i + 1) * d]);
                rstd[i] = r;
                kernels::layer_norm_row(row, gv, bv, &mut out[i * d..(i + 1) * d]);
            }
        }
        let g = self.needs(&[x, gain, bias]);
        self.push(m, d, out, Op::LayerNorm { x, gain, bias, xhat, rstd }, g)
    }

    /// Row gather: `out[i] = src[idx[i]]`. Embedding lookup is a gather on the table.
    pub fn gather(&mut self, src: Var, idx: Vec<usize>) -> Var {
        let (m, n) = self.shape(src);
        let sv = self.value(src);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            assert!(i < m, "gather index {i} out of {m} rows");
            out.extend_from_slice(&sv[i * n..(i + 1) * n]);
        }
        let g = self.needs(&[src]);
        self.push(idx.len(), n, out, Op::Gather { src, idx }, g)
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.shape(src);
        assert!(start + len <= n, "column slice out of range");
        let sv = self.value(src);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&sv[i * n + start..i * n + start + len]);
        }
        let g = self.needs(&[src]);
        self.push(m, len, out, Op::SliceCols { src, start }, g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let n = self.shape(parts[0]).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.shape(p);
            assert_eq!(c, n, "concat_rows column mismatch");
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let g = self.needs(parts);
        self.push(rows, n, out, Op::ConcatRows(parts.to_vec()), g)
    }

    /// Scaled dot-product attention over `heads` heads. Rows attend only
    /// within their segment; `causal` additionally masks later rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool, segments: &[Segment]) -> Var {
        let (n, d) = self.shape(q);
        assert_eq!(self.shape(k), (n, d));
        assert_eq!(self.shape(v), (n, d));
        assert_eq!(d % heads, 0, "d_model not divisible by heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let total: usize = segments.iter().map(|&(_, l)| l * l * heads).sum();
        let mut probs = vec![0.0; total];
        let mut out = vec![0.0; n * d];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut off = 0;
        let mut scores = Vec::new();
        for &(start, len) in segments {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..len {
                    let nk = if causal { i + 1 } else { len };
                    let qi = &qv[(start + i) * d + c0..(start + i) * d + c0 + dh];
                    scores.clear();
                    for j in 0..nk {
                        let kj = &kv[(start + j) * d + c0..(start + j) * d + c0 + dh];
                        scores.push(kernels::dot(qi, kj) * scale);
                    }
                    kernels::softmax_in_place(&mut scores);
                    let orow = &mut out[(start + i) * d + c0..(start + i) * d + c0 + dh];
                    for (j, &p) in scores.iter().enumerate() {
                        let vj = &vv[(start + j) * d + c0..(start + j) * d + c0 + dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                    probs[off + i * len..off + i * len + nk].copy_from_slice(&scores);
                }
                off += len * len;
            }
        }
        let g = self.needs(&[q, k, v]);
        let saved = AttentionSaved {
            q,
            k,
            v,
            heads,
            causal,
            segments: segments.to_vec(),
            probs,
        };
        self.push(n, d, out, Op::Attention(Box::new(saved)), g)
    }

    /// Mean cross-entropy over unmasked rows.
    pub fn softmax_ce(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (m, c) = self.shape(logits);
        if targets.len() != m || mask.len() != m {
            return Err(Error::Contract(format!("{m} logit rows, {} targets", targets.len())));
        }
        let count = mask.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(Error::Degenerate("every position is masked".into()));
        }
        let lv = self.value(logits);
        let mut probs = lv.to_vec();
        let mut loss = 0.0f64;
        for i in 0..m {
            let row = &lv[i * c..(i + 1) * c];
            if mask[i] {
                if targets[i] >= c {
                    return Err(Error::Input(format!("target {} outside {c} classes", targets[i])));
                }
                loss += kernels::log_sum_exp(row) - row[targets[i]] as f64;
            }
            kernels::softmax_in_place(&mut probs[i * c..(i + 1) * c]);
        }
        let g = self.needs(&[logits]);
        let op = Op::SoftmaxCe {
            logits,
            probs,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            count,
        };
        Ok(self.push_wide(loss / count as f64, op, g))
    }

    /// Mean binary cross-entropy of `σ(logits)` against 0/1 targets.
    pub fn bce_logits(&mut self, logits: Var, targets: &[f32], mask: &[bool]) -> Result<Var> {
        let (m, c) = self.shape(logits);
        if c != 1 || targets.len() != m || mask.len() != m {
            return Err(Error::Contract("bce expects m×1 logits and m targets".into()));
        }
        let count = mask.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(Error::Degenerate("every position is masked".into()));
        }
        let lv = self.value(logits);
        let mut loss = 0.0f64;
        for i in 0..m {
            if mask[i] {
                let x = lv[i] as f64;
                let y = targets[i] as f64;
                loss += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
            }
        }
        let g = self.needs(&[logits]);
        let op = Op::BceLogits {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            count,
        };
        Ok(self.push_wide(loss / count as f64, op, g))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().map(|&x| x as f64).sum();
        let g = self.needs(&[a]);
        self.push_wide(s, Op::Sum(a), g)
    }

    /// Row-wise argmax of a recorded value.
    pub fn argmax_rows(&self, v: Var) -> Vec<usize> {
        let (m, c) = self.shape(v);
        let val = self.value(v);
        (0..m).map(|i| argmax(&val[i * c..(i + 1) * c])).collect()
    }

    /// Gradients of `loss` with respect to every node that requires one.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else { continue };
            self.backprop(node, g, lower);
        }
        Gradients {
            grads,
            params: self.params.iter().map(|(&p, &v)| (p, v)).collect(),
        }
    }

    fn backprop(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].rows, nodes[a.0].cols);
                let n = nodes[b.0].cols;
                if let Some(ga) = slot(nodes, grads, *a) {
                    kernels::matmul_nt_acc(g, &nodes[b.0].value, ga, m, k, n);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    kernels::matmul_tn_acc(&nodes[a.0].value, g, gb, m, k, n);
                }
            }
            Op::AddRow(x, b) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for (o, &x) in gb.iter_mut().zip(g) {
                        *o -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((o, &x), &y) in ga.iter_mut().zip(g).zip(&nodes[b.0].value) {
                        *o += x * y;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for ((o, &x), &y) in gb.iter_mut().zip(g).zip(&nodes[a.0].value) {
                        *o += x * y;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (o, &x) in ga.iter_mut().zip(g) {
                        *o += x * s;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((o, &x), &y) in ga.iter_mut().zip(g).zip(&node.value) {
                        *o += x * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((o, &x), &y) in ga.iter_mut().zip(g).zip(&node.value) {
                        *o += x * (1.0 - y * y);
                    }
                }
            }
            Op::Gelu(a) => {
                let xv = &nodes[a.0].value;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((o, &gy), &x) in ga.iter_mut().zip(g).zip(xv) {
                        *o += gy * kernels::gelu_grad(x);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.cols;
                let gv = &nodes[gain.0].value;
                if let Some(gg) = slot(nodes, grads, *gain) {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    for grow in g.chunks(d) {
                        add_into(gb, grow);
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    let mut dxhat = vec![0.0f32; d];
                    for (i, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut s1 = 0.0f64;
                        let mut s2 = 0.0f64;
                        for j in 0..d {
                            dxhat[j] = grow[j] * gv[j];
                            s1 += dxhat[j] as f64;
                            s2 += (dxhat[j] * hrow[j]) as f64;
                        }
                        let (m1, m2) = ((s1 / d as f64) as f32, (s2 / d as f64) as f32);
                        let out = &mut gx[i * d..(i + 1) * d];
                        for j in 0..d {
                            out[j] += rstd[i] * (dxhat[j] - m1 - hrow[j] * m2);
                        }
                    }
                }
            }
            Op::Gather { src, idx } => {
                if let Some(gs) = slot(nodes, grads, *src) {
                    let n = node.cols;
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gs[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::SliceCols { src, start } => {
                if let Some(gs) = slot(nodes, grads, *src) {
                    let n = nodes[src.0].cols;
                    let len = node.cols;
                    for i in 0..node.rows {
                        add_into(&mut gs[i * n + start..i * n + start + len], &g[i * len..(i + 1) * len]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if let Some(gp) = slot(nodes, grads, p) {
                        add_into(gp, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::Attention(saved) => self.attention_backward(saved, g, grads),
            Op::SoftmaxCe {
                logits,
                probs,
                targets,
                mask,
                count,
            } => {
                if let Some(gl) = slot(nodes, grads, *logits) {
                    let c = nodes[logits.0].cols;
                    let s = g[0] / *count as f32;
                    for i in 0..mask.len() {
                        if !mask[i] {
                            continue;
                        }
                        for j in 0..c {
                            let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                            gl[i * c + j] += s * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
            Op::BceLogits {
                logits,
                targets,
                mask,
                count,
            } => {
                let lv = &nodes[logits.0].value;
                if let Some(gl) = slot(nodes, grads, *logits) {
                    let s = g[0] / *count as f32;
                    for i in 0..mask.len() {
                        if mask[i] {
                            gl[i] += s * (kernels::sigmoid(lv[i]) - targets[i]);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }
            }
        }
    }

    fn attention_backward(&self, s: &AttentionSaved, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let (n, d) = (nodes[s.q.0].rows, nodes[s.q.0].cols);
        let dh = d / s.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qv, kv, vv) = (&nodes[s.q.0].value, &nodes[s.k.0].value, &nodes[s.v.0].value);
        let mut dq = vec![0.0f32; n * d];
        let mut dk = vec![0.0f32; n * d];
        let mut dv = vec![0.0f32; n * d];
        let mut dp = Vec::new();
        let mut off = 0;
        for &(start, len) in &s.segments {
            for h in 0..s.heads {
                let c0 = h * dh;
                for i in 0..len {
                    let nk = if s.causal { i + 1 } else { len };
                    let p = &s.probs[off + i * len..off + i * len + nk];
                    let ri = (start + i) * d + c0;
                    let go = &g[ri..ri + dh];
                    dp.clear();
                    for j in 0..nk {
                        let rj = (start + j) * d + c0;
                        dp.push(kernels::dot(go, &vv[rj..rj + dh]));
                        for (o, &x) in dv[rj..rj + dh].iter_mut().zip(go) {
                            *o += p[j] * x;
                        }
                    }
                    let inner: f32 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for j in 0..nk {
                        let ds = p[j] * (dp[j] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let rj = (start + j) * d + c0;
                        for c in 0..dh {
                            dq[ri + c] += ds * kv[rj + c];
                            dk[rj + c] += ds * qv[ri + c];
                        }
                    }
                }
                off += len * len;
            }
        }
        for (var, delta) in [(s.q, dq), (s.k, dk), (s.v, dv)] {
            let node = &nodes[var.0];
            if node.requires_grad {
                add_into(grads[var.0].get_or_insert_with(|| vec![0.0; node.value.len()]), &delta);
            }
        }
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f32>>], v: Var) -> Option<&'a mut Vec<f32>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (o, &x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// `None` when no gradient reached `v`.
    pub fn of(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into the set's gradient buffers. Every
    /// parameter that appeared on the tape gets a buffer, zero if no
    /// gradient reached it.
    pub fn accumulate_into(&self, ps: &mut ParameterSet) -> Result<()> {
        for &(id, var) in &self.params {
            let t = ps.get_mut(id);
            match self.of(var) {
                Some(g) => t.accumulate_grad(g)?,
                None => {
                    t.grad_mut();
                }
            }
        }
        Ok(())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f32]> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|&(_, v)| self.of(v))
    }
}
