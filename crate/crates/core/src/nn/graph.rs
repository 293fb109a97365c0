//! Reverse-mode automatic differentiation over a linear tape of 2-D tensors.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order for gradient propagation. All tensors are row-major
//! `rows x cols`; vectors are `1 x n` and scalars `1 x 1`.

use super::kernels::{gelu, gelu_grad, log_sum_exp, matmul, matmul_a_bt_acc, matmul_at_b_acc};
use super::params::ParameterSet;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn numel(self) -> usize {
        self.rows * self.cols
    }
}

/// One bidirectional attention problem: rows `start..start+len` attend only
/// to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Embed {
        table: usize,
        ids: Vec<u32>,
    },
    MatMul(usize, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Square(usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        segments: Vec<Segment>,
        key_valid: Vec<bool>,
        probs: Vec<f64>,
    },
    LogSoftmax(usize),
    Gather {
        src: usize,
        idx: Vec<usize>,
    },
    SegmentSum {
        src: usize,
        weights: Vec<f64>,
        seg: Vec<usize>,
    },
    Min(usize, usize),
    Clamp {
        src: usize,
        lo: f64,
        hi: f64,
    },
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Shape,
    op: Op,
    label: String,
}

/// Parameter layout captured by [`Graph::bind`], used to shape gradients.
#[derive(Debug, Clone)]
struct Layout {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

/// Variables for every array of a bound [`ParameterSet`], in array order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    names: Vec<String>,
}

impl Bound {
    pub fn get(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<Var> {
        self.names.iter().position(|n| n == name).map(|i| self.vars[i])
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    layout: Option<Layout>,
}

const LN_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, shape: Shape, op: Op, label: &str) -> Var {
        debug_assert_eq!(value.len(), shape.numel(), "{label}");
        self.nodes.push(Node {
            value,
            shape,
            op,
            label: label.to_string(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.shape(v).numel(), 1);
        self.nodes[v.0].value[0]
    }

    /// Renames a node; the label is what numeric errors report.
    pub fn name(&mut self, v: Var, label: &str) -> Var {
        self.nodes[v.0].label = label.to_string();
        v
    }

    /// Registers every array of `params` as a differentiable leaf.
    ///
    /// A graph binds at most one parameter set.
    pub fn bind(&mut self, params: &ParameterSet) -> Bound {
        assert!(self.layout.is_none(), "graph already has bound parameters");
        let mut vars = Vec::with_capacity(params.len());
        let mut names = Vec::with_capacity(params.len());
        let mut shapes = Vec::with_capacity(params.len());
        for (i, a) in params.arrays().iter().enumerate() {
            let shape = match a.shape.as_slice() {
                [n] => Shape::new(1, *n),
                [r, c] => Shape::new(*r, *c),
                other => Shape::new(1, other.iter().product()),
            };
            vars.push(self.push(a.data.clone(), shape, Op::Param(i), &a.name));
            names.push(a.name.clone());
            shapes.push(a.shape.clone());
        }
        self.layout = Some(Layout {
            names: names.clone(),
            shapes,
        });
        Bound { vars, names }
    }

    /// A constant (non-differentiable) tensor.
    pub fn input(&mut self, data: Vec<f64>, shape: Shape) -> Var {
        assert_eq!(data.len(), shape.numel(), "input data does not match shape");
        self.push(data, shape, Op::Input, "input")
    }

    pub fn constant_row(&mut self, data: Vec<f64>) -> Var {
        let n = data.len();
        self.input(data, Shape::new(1, n))
    }

    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Var {
        let ts = self.shape(table);
        let d = ts.cols;
        let tv = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let r = id as usize;
            assert!(r < ts.rows, "embedding id {r} out of range {}", ts.rows);
            out.extend_from_slice(&tv[r * d..(r + 1) * d]);
        }
        self.push(
            out,
            Shape::new(ids.len(), d),
            Op::Embed {
                table: table.0,
                ids: ids.to_vec(),
            },
            "embed",
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.cols, sb.rows, "matmul shape mismatch");
        let out = matmul(self.value(a), self.value(b), sa.rows, sa.cols, sb.cols);
        self.push(out, Shape::new(sa.rows, sb.cols), Op::MatMul(a.0, b.0), "matmul")
    }

    /// `x + bias` with `bias` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        assert_eq!(sb.numel(), sx.cols, "bias width mismatch");
        let b = self.value(bias);
        let out: Vec<f64> = self
            .value(x)
            .chunks_exact(sx.cols)
            .flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b))
            .collect();
        self.push(out, sx, Op::AddRow(x.0, bias.0), "add_row")
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, label: &str) -> Var {
        let sa = self.shape(a);
        assert_eq!(sa, self.shape(b), "{label}: shape mismatch");
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(out, sa, op, label)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op, label: &str) -> Var {
        let sa = self.shape(a);
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(out, sa, op, label)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a.0, b.0), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a.0, b.0), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a.0, b.0), "mul")
    }

    /// Elementwise minimum; on ties the gradient goes to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, f64::min, Op::Min(a.0, b.0), "min")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a.0, c), "scale")
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::Offset(a.0), "offset")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a.0), "exp")
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a.0), "square")
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, Op::Gelu(a.0), "gelu")
    }

    /// Clamp to `[lo, hi]`; gradient is passed only strictly inside or on the band.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp { src: a.0, lo, hi }, "clamp")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![s], Shape::new(1, 1), Op::Sum(a.0), "sum")
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let sx = self.shape(x);
        let d = sx.cols;
        let (g, b) = (self.value(gain), self.value(bias));
        assert_eq!(g.len(), d);
        let mut out = Vec::with_capacity(sx.numel());
        let mut xhat = Vec::with_capacity(sx.numel());
        let mut inv_std = Vec::with_capacity(sx.rows);
        for row in self.value(x).chunks_exact(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        self.push(
            out,
            sx,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Multi-head bidirectional scaled dot-product attention.
    ///
    /// Rows attend within their segment only; keys with `key_valid == false`
    /// receive zero weight.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: &[Segment], key_valid: &[bool]) -> Var {
        let s = self.shape(q);
        assert_eq!(s, self.shape(k));
        assert_eq!(s, self.shape(v));
        assert_eq!(key_valid.len(), s.rows);
        assert_eq!(s.cols % heads, 0);
        let d = s.cols;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![0.0; s.numel()];
        let probs_len: usize = segments.iter().map(|sg| heads * sg.len * sg.len).sum();
        let mut probs = Vec::with_capacity(probs_len);
        let mut scores = Vec::new();
        for sg in segments {
            let t = sg.len;
            for h in 0..heads {
                let off = h * dh;
                for i in 0..t {
                    let qi = &qv[(sg.start + i) * d + off..(sg.start + i) * d + off + dh];
                    scores.clear();
                    for j in 0..t {
                        if key_valid[sg.start + j] {
                            let kj = &kv[(sg.start + j) * d + off..(sg.start + j) * d + off + dh];
                            let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                            scores.push(dot * scale);
                        } else {
                            scores.push(f64::NEG_INFINITY);
                        }
                    }
                    let lse = log_sum_exp(&scores);
                    let orow = &mut out[(sg.start + i) * d + off..(sg.start + i) * d + off + dh];
                    for (j, &sc) in scores.iter().enumerate() {
                        let p = if sc == f64::NEG_INFINITY { 0.0 } else { (sc - lse).exp() };
                        probs.push(p);
                        if p != 0.0 {
                            let vj = &vv[(sg.start + j) * d + off..(sg.start + j) * d + off + dh];
                            for (o, &x) in orow.iter_mut().zip(vj) {
                                *o += p * x;
                            }
                        }
                    }
                }
            }
        }
        self.push(
            out,
            s,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                segments: segments.to_vec(),
                key_valid: key_valid.to_vec(),
                probs,
            },
            "attention",
        )
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let mut out = Vec::with_capacity(s.numel());
        for row in self.value(x).chunks_exact(s.cols) {
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|v| v - lse));
        }
        self.push(out, s, Op::LogSoftmax(x.0), "log_softmax")
    }

    /// Picks flat indices of `src` into a `1 x idx.len()` vector.
    pub fn gather(&mut self, src: Var, idx: Vec<usize>) -> Var {
        let sv = self.value(src);
        let out: Vec<f64> = idx.iter().map(|&i| sv[i]).collect();
        let n = out.len();
        self.push(out, Shape::new(1, n), Op::Gather { src: src.0, idx }, "gather")
    }

    /// `out[seg[i]] += weights[i] * src[i]` over the flattened `src`.
    pub fn segment_sum(&mut self, src: Var, weights: Vec<f64>, seg: Vec<usize>, n_out: usize) -> Var {
        let sv = self.value(src);
        assert_eq!(sv.len(), weights.len());
        assert_eq!(sv.len(), seg.len());
        let mut out = vec![0.0; n_out];
        for ((&x, &w), &s) in sv.iter().zip(&weights).zip(&seg) {
            out[s] += w * x;
        }
        self.push(
            out,
            Shape::new(1, n_out),
            Op::SegmentSum {
                src: src.0,
                weights,
                seg,
            },
            "segment_sum",
        )
    }

    /// Gradient of the scalar `loss` with respect to every bound parameter.
    ///
    /// Fails with [`Error::Numeric`] naming the first non-finite node when
    /// the loss is not finite.
    pub fn backward(&self, loss: Var) -> Result<ParameterSet> {
        let layout = self
            .layout
            .as_ref()
            .ok_or_else(|| Error::Consistency("backward on a graph without parameters".into()))?;
        assert_eq!(self.shape(loss).numel(), 1, "loss must be a scalar");
        if !self.scalar(loss).is_finite() {
            let culprit = self.nodes[..=loss.0]
                .iter()
                .find(|n| n.value.iter().any(|v| !v.is_finite()))
                .map(|n| n.label.clone())
                .unwrap_or_else(|| self.nodes[loss.0].label.clone());
            return Err(Error::Numeric {
                node: culprit,
                detail: format!("loss is {}", self.scalar(loss)),
            });
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = ParameterSet::new();
        let mut param_grads: Vec<Option<Vec<f64>>> = vec![None; layout.names.len()];

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => param_grads[*p] = Some(g),
                Op::Embed { table, ids } => {
                    let d = node.shape.cols;
                    let dt = slot(&mut grads, *table, self.nodes[*table].value.len());
                    for (r, &id) in ids.iter().enumerate() {
                        let row = id as usize;
                        for j in 0..d {
                            dt[row * d + j] += g[r * d + j];
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.nodes[*a].shape, self.nodes[*b].shape);
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    if needs_grad(&self.nodes, *b) {
                        let db = slot(&mut grads, *b, sb.numel());
                        matmul_at_b_acc(av, &g, sa.rows, sa.cols, sb.cols, db);
                    }
                    if needs_grad(&self.nodes, *a) {
                        let da = slot(&mut grads, *a, sa.numel());
                        matmul_a_bt_acc(&g, bv, sa.rows, sa.cols, sb.cols, da);
                    }
                }
                Op::AddRow(x, bias) => {
                    let cols = node.shape.cols;
                    add_into(slot(&mut grads, *x, g.len()), &g);
                    let db = slot(&mut grads, *bias, cols);
                    for row in g.chunks_exact(cols) {
                        add_into(db, row);
                    }
                }
                Op::Add(a, b) => {
                    add_into(slot(&mut grads, *a, g.len()), &g);
                    add_into(slot(&mut grads, *b, g.len()), &g);
                }
                Op::Sub(a, b) => {
                    add_into(slot(&mut grads, *a, g.len()), &g);
                    let db = slot(&mut grads, *b, g.len());
                    for (d, x) in db.iter_mut().zip(&g) {
                        *d -= x;
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let da = slot(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                    let db = slot(&mut grads, *b, g.len());
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
                Op::Min(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let da = slot(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        if av[i] <= bv[i] {
                            da[i] += g[i];
                        }
                    }
                    let db = slot(&mut grads, *b, g.len());
                    for i in 0..g.len() {
                        if av[i] > bv[i] {
                            db[i] += g[i];
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let da = slot(&mut grads, *a, g.len());
                    for (d, x) in da.iter_mut().zip(&g) {
                        *d += c * x;
                    }
                }
                Op::Offset(a) => add_into(slot(&mut grads, *a, g.len()), &g),
                Op::Exp(a) => {
                    let y = &node.value;
                    let da = slot(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * y[i];
                    }
                }
                Op::Square(a) => {
                    let x = &self.nodes[*a].value;
                    let da = slot(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        da[i] += 2.0 * x[i] * g[i];
                    }
                }
                Op::Gelu(a) => {
                    let x = &self.nodes[*a].value;
                    let da = slot(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * gelu_grad(x[i]);
                    }
                }
                Op::Clamp { src, lo, hi } => {
                    let x = &self.nodes[*src].value;
                    let da = slot(&mut grads, *src, g.len());
                    for i in 0..g.len() {
                        if x[i] >= *lo && x[i] <= *hi {
                            da[i] += g[i];
                        }
                    }
                }
                Op::Sum(a) => {
                    let da = slot(&mut grads, *a, self.nodes[*a].value.len());
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let d = node.shape.cols;
                    let gv = &self.nodes[*gain].value;
                    {
                        let dg = slot(&mut grads, *gain, d);
                        for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for j in 0..d {
                                dg[j] += grow[j] * hrow[j];
                            }
                        }
                    }
                    {
                        let db = slot(&mut grads, *bias, d);
                        for grow in g.chunks_exact(d) {
                            add_into(db, grow);
                        }
                    }
                    let dx = slot(&mut grads, *x, g.len());
                    let mut dxhat = vec![0.0; d];
                    for (r, (grow, hrow)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = grow[j] * gv[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * hrow[j];
                        }
                        let k = inv_std[r] / d as f64;
                        for j in 0..d {
                            dx[r * d + j] += k * (d as f64 * dxhat[j] - s1 - hrow[j] * s2);
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    segments,
                    key_valid,
                    probs,
                } => {
                    let s = node.shape;
                    let d = s.cols;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let (qv, kv, vv) = (&self.nodes[*q].value, &self.nodes[*k].value, &self.nodes[*v].value);
                    let mut dq = vec![0.0; s.numel()];
                    let mut dk = vec![0.0; s.numel()];
                    let mut dv = vec![0.0; s.numel()];
                    let mut dp = Vec::new();
                    let mut p_off = 0;
                    for sg in segments {
                        let t = sg.len;
                        for h in 0..*heads {
                            let off = h * dh;
                            for i in 0..t {
                                let ri = (sg.start + i) * d + off;
                                let go = &g[ri..ri + dh];
                                let prow = &probs[p_off..p_off + t];
                                p_off += t;
                                dp.clear();
                                let mut dot_pdp = 0.0;
                                for j in 0..t {
                                    let rj = (sg.start + j) * d + off;
                                    let p = prow[j];
                                    if !key_valid[sg.start + j] || p == 0.0 {
                                        dp.push(0.0);
                                        continue;
                                    }
                                    let vj = &vv[rj..rj + dh];
                                    let dpij: f64 = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                                    for (x, &gg) in dv[rj..rj + dh].iter_mut().zip(go) {
                                        *x += p * gg;
                                    }
                                    dp.push(dpij);
                                    dot_pdp += p * dpij;
                                }
                                for j in 0..t {
                                    let p = prow[j];
                                    if p == 0.0 {
                                        continue;
                                    }
                                    let ds = p * (dp[j] - dot_pdp) * scale;
                                    let rj = (sg.start + j) * d + off;
                                    for c in 0..dh {
                                        dq[ri + c] += ds * kv[rj + c];
                                        dk[rj + c] += ds * qv[ri + c];
                                    }
                                }
                            }
                        }
                    }
                    add_into(slot(&mut grads, *q, dq.len()), &dq);
                    add_into(slot(&mut grads, *k, dk.len()), &dk);
                    add_into(slot(&mut grads, *v, dv.len()), &dv);
                }
                Op::LogSoftmax(x) => {
                    let cols = node.shape.cols;
                    let y = &node.value;
                    let dx = slot(&mut grads, *x, g.len());
                    for (r, grow) in g.chunks_exact(cols).enumerate() {
                        let total: f64 = grow.iter().sum();
                        for j in 0..cols {
                            dx[r * cols + j] += grow[j] - y[r * cols + j].exp() * total;
                        }
                    }
                }
                Op::Gather { src, idx } => {
                    let ds = slot(&mut grads, *src, self.nodes[*src].value.len());
                    for (gi, &i) in g.iter().zip(idx) {
                        ds[i] += gi;
                    }
                }
                Op::SegmentSum { src, weights, seg } => {
                    let ds = slot(&mut grads, *src, weights.len());
                    for i in 0..weights.len() {
                        ds[i] += weights[i] * g[seg[i]];
                    }
                }
            }
        }

        for (i, name) in layout.names.iter().enumerate() {
            let numel: usize = layout.shapes[i].iter().product();
            let data = param_grads[i].take().unwrap_or_else(|| vec![0.0; numel]);
            out.insert(name, &layout.shapes[i], data).map_err(|_| Error::Numeric {
                node: name.clone(),
                detail: "non-finite gradient".into(),
            })?;
        }
        Ok(out)
    }
}

fn needs_grad(nodes: &[Node], idx: usize) -> bool {
    !matches!(nodes[idx].op, Op::Input)
}

fn slot(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(vals: &[(&str, &[usize], Vec<f64>)]) -> ParameterSet {
        let mut p = ParameterSet::new();
        for (n, s, d) in vals {
            p.insert(n, s, d.clone()).unwrap();
        }
        p
    }

    #[test]
    fn sum_of_one_array_gives_ones() {
        let p = params(&[("a", &[2, 2], vec![1.0, -2.0, 3.0, 0.5]), ("b", &[3], vec![1.0; 3])]);
        let mut g = Graph::new();
        let b = g.bind(&p);
        let s = g.sum(b.get(0));
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.array(0).data, vec![1.0; 4]);
        assert_eq!(grads.array(1).data, vec![0.0; 3]);
        assert_eq!(grads.array(0).shape, vec![2, 2]);
    }

    #[test]
    fn non_finite_loss_names_the_node() {
        let p = params(&[("w", &[1], vec![1000.0])]);
        let mut g = Graph::new();
        let b = g.bind(&p);
        let e = g.exp(b.get(0));
        let e = g.name(e, "blowup");
        let s = g.sum(e);
        match g.backward(s) {
            Err(Error::Numeric { node, .. }) => assert_eq!(node, "blowup"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn min_routes_gradient_to_selected_branch() {
        let p = params(&[("x", &[2], vec![1.0, 3.0])]);
        let mut g = Graph::new();
        let b = g.bind(&p);
        let twice = g.scale(b.get(0), 2.0);
        let c = g.constant_row(vec![4.0, 4.0]);
        let m = g.min(twice, c);
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.array(0).data, vec![2.0, 0.0]);
    }

    #[test]
    fn clamp_blocks_gradient_outside_band() {
        let p = params(&[("x", &[3], vec![0.5, 1.0, 1.5])]);
        let mut g = Graph::new();
        let b = g.bind(&p);
        let c = g.clamp(b.get(0), 0.8, 1.2);
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.array(0).data, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn attention_ignores_invalid_keys() {
        // two rows, second key invalid: first row output equals v[0]
        let p = params(&[
            ("q", &[2, 2], vec![0.3, -0.1, 0.2, 0.4]),
            ("k", &[2, 2], vec![0.5, 0.1, -0.3, 0.9]),
            ("v", &[2, 2], vec![1.0, 2.0, 3.0, 4.0]),
        ]);
        let mut g = Graph::new();
        let b = g.bind(&p);
        let o = g.attention(
            b.get(0),
            b.get(1),
            b.get(2),
            1,
            &[Segment { start: 0, len: 2 }],
            &[true, false],
        );
        assert_eq!(g.value(o), &[1.0, 2.0, 1.0, 2.0]);
    }
}
