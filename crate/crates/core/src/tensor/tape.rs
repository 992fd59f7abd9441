use std::collections::HashMap;

use rand::RngCore;

use super::kernels::gemm;
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberately wrong backward rules, used as negative controls for the
/// gradient checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Scales the softmax input gradient by `1 + 1e-3`.
    SoftmaxBackward,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNT { a: Var, b: Var, m: usize, k: usize, n: usize },
    Grouped { a: Var, b: Var, groups: usize, m: usize, k: usize, n: usize, b_t: bool },
    AddTiled { a: Var, t: Var },
    Transpose { a: Var, rows: usize, cols: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f64 },
    AddRow { a: Var, row: Var, cols: usize },
    Softmax { a: Var, cols: usize },
    LayerNorm { a: Var, gain: Var, bias: Var, d: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu { a: Var, th: Vec<f64> },
    Gather { table: Var, ids: Vec<usize>, cols: usize },
    CrossEntropy { logits: Var, labels: Vec<Option<usize>>, probs: Vec<f64>, cols: usize, norm: f64 },
    Dropout { a: Var, scale: Vec<f64> },
    Block { a: Var, r0: usize, c0: usize, rows: usize, cols: usize, src_cols: usize },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var>, widths: Vec<usize>, rows: usize },
    Sum { a: Var },
    RelativeLookup { m: Var, n: usize, clip: usize, broadcast: bool, width: usize },
    ResetCls { v: Var, theta_row: Var, theta_col: Var, n: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

/// Gradients of a scalar with respect to the leaves that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient of `v`, or zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// Gradient buffers during the reverse sweep. Interior buffers are recycled
/// once consumed.
struct GradStore {
    slots: Vec<Option<Vec<f64>>>,
    spare: HashMap<usize, Vec<Vec<f64>>>,
}

impl GradStore {
    fn accumulate(&mut self, len: usize, v: Var, f: impl FnOnce(&mut [f64])) {
        if self.slots[v.0].is_none() {
            let buf = match self.spare.get_mut(&len).and_then(Vec::pop) {
                Some(mut b) => {
                    b.fill(0.0);
                    b
                }
                None => vec![0.0; len],
            };
            self.slots[v.0] = Some(buf);
        }
        f(self.slots[v.0].as_mut().expect("just filled"));
    }

    fn recycle(&mut self, buf: Vec<f64>) {
        self.spare.entry(buf.len()).or_default().push(buf);
    }
}

fn clip_index(i: usize, j: usize, clip: usize) -> usize {
    let delta = j as i64 - i as i64;
    (delta.clamp(-(clip as i64), clip as i64) + clip as i64) as usize
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn with_fault(fault: Fault) -> Self {
        Tape {
            nodes: Vec::new(),
            fault: Some(fault),
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (av.dims2(), bv.dims2());
        if k != k2 {
            return Err(shape_err("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, 0.0);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul { a, b, m, k, n }, ng))
    }

    /// `a * b^T`, with `a: [m x k]` and `b: [n x k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((m, k), (n, k2)) = (av.dims2(), bv.dims2());
        if k != k2 {
            return Err(shape_err("matmul_nt", av, bv));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), true, &mut out, 0.0);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNT { a, b, m, k, n }, ng))
    }

    /// Per-group products: `a` stacks `groups` blocks of `[m x k]` and `b`
    /// stacks blocks of `[k x n]`, or `[n x k]` when `b_t`. The result stacks
    /// the `[m x n]` products.
    fn grouped(&mut self, a: Var, b: Var, groups: usize, b_t: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((ar, k), (br, bc)) = (av.dims2(), bv.dims2());
        let ok = groups > 0 && ar % groups == 0 && br % groups == 0;
        let (kb, n) = if b_t { (bc, br / groups.max(1)) } else { (br / groups.max(1), bc) };
        if !ok || k != kb {
            return Err(shape_err("grouped matmul", av, bv));
        }
        let m = ar / groups;
        let mut out = vec![0.0; groups * m * n];
        for g in 0..groups {
            gemm(
                m,
                k,
                n,
                &av.data()[g * m * k..],
                false,
                &bv.data()[g * k * n..],
                b_t,
                &mut out[g * m * n..],
                0.0,
            );
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::matrix(groups * m, n, out)?, Op::Grouped { a, b, groups, m, k, n, b_t }, ng))
    }

    /// Block-wise `a_g * b_g` over `groups` row blocks.
    pub fn matmul_grouped(&mut self, a: Var, b: Var, groups: usize) -> Result<Var> {
        self.grouped(a, b, groups, false)
    }

    /// Block-wise `a_g * b_g^T` over `groups` row blocks.
    pub fn matmul_nt_grouped(&mut self, a: Var, b: Var, groups: usize) -> Result<Var> {
        self.grouped(a, b, groups, true)
    }

    /// Adds `t` to every consecutive block of `t.rows()` rows of `a`.
    pub fn add_tiled(&mut self, a: Var, t: Var) -> Result<Var> {
        let (av, tv) = (self.value(a), self.value(t));
        if av.cols() != tv.cols() || tv.is_empty() || av.len() % tv.len() != 0 {
            return Err(shape_err("add_tiled", av, tv));
        }
        let td = tv.data();
        let out: Vec<f64> = av.data().iter().enumerate().map(|(i, x)| x + td[i % td.len()]).collect();
        let out = Tensor::new(av.shape().to_vec(), out)?;
        let ng = self.ng(&[a, t]);
        Ok(self.push(out, Op::AddTiled { a, t }, ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.dims2();
        let t = av.transpose();
        let ng = self.ng(&[a]);
        self.push(t, Op::Transpose { a, rows, cols }, ng)
    }

    fn zip(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(op, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Sub { a, b }, ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        self.push(t, Op::Scale { a, s }, ng)
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let (_, cols) = av.dims2();
        if rv.len() != cols {
            return Err(shape_err("add_row", av, rv));
        }
        let r = rv.data();
        let mut data = av.data().to_vec();
        for chunk in data.chunks_exact_mut(cols) {
            chunk.iter_mut().zip(r).for_each(|(x, y)| *x += y);
        }
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(&[a, row]);
        Ok(self.push(t, Op::AddRow { a, row, cols }, ng))
    }

    /// Row-wise softmax. `mask[i * cols + j] == true` excludes entry `(i, j)`,
    /// which then comes out as exactly zero.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let av = self.value(a);
        let (rows, cols) = av.dims2();
        if let Some(m) = mask {
            if m.len() != av.len() {
                return Err(Error::Shape {
                    op: "softmax_rows mask",
                    left: av.shape().to_vec(),
                    right: vec![m.len()],
                });
            }
        }
        let masked = |i: usize| mask.is_some_and(|m| m[i]);
        let x = av.data();
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let base = r * cols;
            if (0..cols).all(|c| masked(base + c)) {
                return Err(Error::FullyMasked { row: r });
            }
            let max = (0..cols)
                .filter(|&c| !masked(base + c))
                .map(|c| x[base + c])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..cols {
                if !masked(base + c) {
                    let e = (x[base + c] - max).exp();
                    out[base + c] = e;
                    sum += e;
                }
            }
            out[base..base + cols].iter_mut().for_each(|v| *v /= sum);
        }
        let t = Tensor::new(av.shape().to_vec(), out)?;
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::Softmax { a, cols }, ng))
    }

    /// Normalizes each length-`d` row to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (av, gv, bv) = (self.value(a), self.value(gain), self.value(bias));
        let (rows, d) = av.dims2();
        if gv.len() != d || bv.len() != d {
            return Err(shape_err("layer_norm", av, gv));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let (x, g, b) = (av.data(), gv.data(), bv.data());
        let mut out = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::new(av.shape().to_vec(), out)?;
        let ng = self.ng(&[a, gain, bias]);
        Ok(self.push(t, Op::LayerNorm { a, gain, bias, d, xhat, inv_std }, ng))
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let th: Vec<f64> = av.data().iter().map(|&x| fast_tanh(gelu_inner(x))).collect();
        let out = av.data().iter().zip(&th).map(|(&x, &t)| 0.5 * x * (1.0 + t)).collect();
        let t = Tensor::new(av.shape().to_vec(), out).expect("same shape");
        let ng = self.ng(&[a]);
        self.push(t, Op::Gelu { a, th }, ng)
    }

    /// Row lookup: output row `r` is `table[ids[r]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, cols) = tv.dims2();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::TokenOutOfRange { id, vocab: rows });
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::matrix(ids.len(), cols, out)?;
        let ng = self.ng(&[table]);
        Ok(self.push(t, Op::Gather { table, ids: ids.to_vec(), cols }, ng))
    }

    /// Sum of `-log softmax(logits[r])[labels[r]]` over labelled rows, divided
    /// by `norm`. Unlabelled rows contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[Option<usize>], norm: f64) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, cols) = lv.dims2();
        if labels.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if norm <= 0.0 {
            return Err(Error::invalid("cross_entropy normalizer must be positive"));
        }
        let x = lv.data();
        let mut probs = vec![0.0; x.len()];
        let mut loss = 0.0;
        for (r, label) in labels.iter().enumerate() {
            let Some(label) = *label else { continue };
            if label >= cols {
                return Err(Error::TokenOutOfRange { id: label, vocab: cols });
            }
            let row = &x[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for c in 0..cols {
                probs[r * cols + c] = (row[c] - lse).exp();
            }
            loss += lse - row[label];
        }
        let t = Tensor::scalar(loss / norm);
        let ng = self.ng(&[logits]);
        Ok(self.push(
            t,
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs, cols, norm },
            ng,
        ))
    }

    /// Inverted dropout with a mask drawn from a stream keyed by `key`.
    /// `p == 0` returns `a` unchanged.
    pub fn dropout(&mut self, a: Var, p: f64, key: &[u64]) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} not in [0, 1)")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let mut stream = rng::stream(key);
        let keep = 1.0 / (1.0 - p);
        // One 32-bit draw per element; dropped when below p * 2^32.
        let cut = (p * 4294967296.0) as u64;
        let av = self.value(a);
        let scale: Vec<f64> = (0..av.len())
            .map(|_| if u64::from(stream.next_u32()) < cut { 0.0 } else { keep })
            .collect();
        let data = av.data().iter().zip(&scale).map(|(x, s)| x * s).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::Dropout { a, scale }, ng))
    }

    /// Copies the `rows x cols` block starting at `(r0, c0)`.
    pub fn block(&mut self, a: Var, r0: usize, rows: usize, c0: usize, cols: usize) -> Result<Var> {
        let av = self.value(a);
        let (ar, ac) = av.dims2();
        if r0 + rows > ar || c0 + cols > ac || rows == 0 || cols == 0 {
            return Err(Error::Shape {
                op: "block",
                left: av.shape().to_vec(),
                right: vec![r0, rows, c0, cols],
            });
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in r0..r0 + rows {
            out.extend_from_slice(&av.data()[r * ac + c0..r * ac + c0 + cols]);
        }
        let t = Tensor::matrix(rows, cols, out)?;
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::Block { a, r0, c0, rows, cols, src_cols: ac }, ng))
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, rows: usize) -> Result<Var> {
        let cols = self.value(a).cols();
        self.block(a, r0, rows, 0, cols)
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, cols: usize) -> Result<Var> {
        let rows = self.value(a).rows();
        self.block(a, 0, rows, c0, cols)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let cols = self.value(first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(shape_err("concat_rows", self.value(first), pv));
            }
            rows += pv.rows();
            out.extend_from_slice(pv.data());
        }
        let t = Tensor::matrix(rows, cols, out)?;
        let ng = self.ng(parts);
        Ok(self.push(t, Op::ConcatRows { parts: parts.to_vec() }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let rows = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(shape_err("concat_cols", self.value(first), pv));
            }
            widths.push(pv.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let t = Tensor::matrix(rows, total, out)?;
        let ng = self.ng(parts);
        Ok(self.push(t, Op::ConcatCols { parts: parts.to_vec(), widths, rows }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum { a }, ng)
    }

    /// Builds an `n x n` matrix whose `(i, j)` entry is
    /// `m[r][clip(j - i, -clip, clip) + clip]`, where `r = i` when `m` has `n`
    /// rows and `r = 0` when `m` is a single row shared by every query. An
    /// `m` of `G * n` rows gives `G` stacked `n x n` blocks, block `g` reading
    /// rows `g * n + i`.
    pub fn relative_lookup(&mut self, m: Var, n: usize, clip: usize) -> Result<Var> {
        let mv = self.value(m);
        let (rows, width) = mv.dims2();
        if width != 2 * clip + 1 || n == 0 || (rows != 1 && rows % n != 0) {
            return Err(Error::Shape {
                op: "relative_lookup",
                left: mv.shape().to_vec(),
                right: vec![n, 2 * clip + 1],
            });
        }
        let broadcast = rows == 1 && n != 1;
        let src = mv.data();
        let out_rows = if broadcast { n } else { rows };
        let mut out = vec![0.0; out_rows * n];
        for r in 0..out_rows {
            let i = r % n;
            let src_row = if broadcast { 0 } else { r };
            for j in 0..n {
                out[r * n + j] = src[src_row * width + clip_index(i, j, clip)];
            }
        }
        let t = Tensor::matrix(out_rows, n, out)?;
        let ng = self.ng(&[m]);
        Ok(self.push(t, Op::RelativeLookup { m, n, clip, broadcast, width }, ng))
    }

    /// Overwrites row 0 with `theta_row` and the rest of column 0 with
    /// `theta_col`. Entry `(0, 0)` takes `theta_row`.
    pub fn reset_cls(&mut self, v: Var, theta_row: Var, theta_col: Var) -> Result<Var> {
        let vv = self.value(v);
        let (n, c) = vv.dims2();
        if n != c {
            return Err(Error::Shape {
                op: "reset_cls",
                left: vv.shape().to_vec(),
                right: vec![n, n],
            });
        }
        let (t1, t2) = (self.value(theta_row), self.value(theta_col));
        if t1.len() != 1 || t2.len() != 1 {
            return Err(shape_err("reset_cls theta", t1, t2));
        }
        let (t1, t2) = (t1.item(), t2.item());
        let mut out = vv.data().to_vec();
        out[..n].iter_mut().for_each(|x| *x = t1);
        for i in 1..n {
            out[i * n] = t2;
        }
        let t = Tensor::matrix(n, n, out)?;
        let ng = self.ng(&[v, theta_row, theta_col]);
        Ok(self.push(t, Op::ResetCls { v, theta_row, theta_col, n }, ng))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut store = GradStore {
            slots: vec![None; self.nodes.len()],
            spare: HashMap::new(),
        };
        store.slots[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = store.slots[i].take() else { continue };
            self.backprop_node(i, &g, &mut store);
            if matches!(self.nodes[i].op, Op::Leaf) {
                store.slots[i] = Some(g);
            } else {
                store.recycle(g);
            }
        }
        let grads = store.slots;
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut GradStore) {
        let node = &self.nodes[i];
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let len = |v: Var| self.nodes[v.0].value.len();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    grads.accumulate(m * k, a, |ga| gemm(m, n, k, g, false, val(b), true, ga, 1.0));
                }
                if wants(b) {
                    grads.accumulate(k * n, b, |gb| gemm(k, m, n, val(a), true, g, false, gb, 1.0));
                }
            }
            &Op::MatMulNT { a, b, m, k, n } => {
                if wants(a) {
                    grads.accumulate(m * k, a, |ga| gemm(m, n, k, g, false, val(b), false, ga, 1.0));
                }
                if wants(b) {
                    grads.accumulate(n * k, b, |gb| gemm(n, m, k, g, true, val(a), false, gb, 1.0));
                }
            }
            &Op::Transpose { a, rows, cols } => {
                if wants(a) {
                    grads.accumulate(rows * cols, a, |ga| {
                        for r in 0..rows {
                            for c in 0..cols {
                                ga[r * cols + c] += g[c * rows + r];
                            }
                        }
                    });
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if wants(v) {
                        grads.accumulate(g.len(), v, |gv| gv.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                    }
                }
            }
            &Op::Sub { a, b } => {
                if wants(a) {
                    grads.accumulate(g.len(), a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
                if wants(b) {
                    grads.accumulate(g.len(), b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
                }
            }
            &Op::Mul { a, b } => {
                for (v, other) in [(a, b), (b, a)] {
                    if wants(v) {
                        let o = val(other);
                        grads.accumulate(g.len(), v, |gv| {
                            for j in 0..gv.len() {
                                gv[j] += g[j] * o[j];
                            }
                        });
                    }
                }
            }
            &Op::Scale { a, s } => {
                if wants(a) {
                    grads.accumulate(g.len(), a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y));
                }
            }
            &Op::AddRow { a, row, cols } => {
                if wants(a) {
                    grads.accumulate(g.len(), a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
                if wants(row) {
                    grads.accumulate(cols, row, |gr| {
                        for chunk in g.chunks_exact(cols) {
                            gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                        }
                    });
                }
            }
            &Op::Softmax { a, cols } => {
                if wants(a) {
                    let y = node.value.data();
                    let factor = match self.fault {
                        Some(Fault::SoftmaxBackward) => 1.0 + 1e-3,
                        None => 1.0,
                    };
                    grads.accumulate(g.len(), a, |ga| {
                        for r in 0..g.len() / cols {
                            let s = r * cols..(r + 1) * cols;
                            let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(p, q)| p * q).sum();
                            for c in s {
                                ga[c] += factor * y[c] * (g[c] - dot);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { a, gain, bias, d, xhat, inv_std } => {
                let (a, gain, bias, d) = (*a, *gain, *bias, *d);
                let rows = g.len() / d;
                if wants(gain) {
                    grads.accumulate(d, gain, |gg| {
                        for j in 0..g.len() {
                            gg[j % d] += g[j] * xhat[j];
                        }
                    });
                }
                if wants(bias) {
                    grads.accumulate(d, bias, |gb| {
                        for j in 0..g.len() {
                            gb[j % d] += g[j];
                        }
                    });
                }
                if wants(a) {
                    let gv = val(gain);
                    grads.accumulate(g.len(), a, |ga| {
                        let mut dxhat = vec![0.0; d];
                        for r in 0..rows {
                            let base = r * d;
                            let mut mean_dx = 0.0;
                            let mut mean_dx_x = 0.0;
                            for c in 0..d {
                                dxhat[c] = g[base + c] * gv[c];
                                mean_dx += dxhat[c];
                                mean_dx_x += dxhat[c] * xhat[base + c];
                            }
                            mean_dx /= d as f64;
                            mean_dx_x /= d as f64;
                            for c in 0..d {
                                ga[base + c] +=
                                    inv_std[r] * (dxhat[c] - mean_dx - xhat[base + c] * mean_dx_x);
                            }
                        }
                    });
                }
            }
            Op::Gelu { a, th } => {
                let a = *a;
                if wants(a) {
                    let x = val(a);
                    grads.accumulate(g.len(), a, |ga| {
                        for j in 0..g.len() {
                            ga[j] += g[j] * gelu_grad(x[j], th[j]);
                        }
                    });
                }
            }
            &Op::Grouped { a, b, groups, m, k, n, b_t } => {
                if wants(a) {
                    grads.accumulate(groups * m * k, a, |ga| {
                        for q in 0..groups {
                            let (gq, bq) = (&g[q * m * n..], &val(b)[q * k * n..]);
                            gemm(m, n, k, gq, false, bq, !b_t, &mut ga[q * m * k..], 1.0);
                        }
                    });
                }
                if wants(b) {
                    grads.accumulate(groups * k * n, b, |gb| {
                        for q in 0..groups {
                            let (aq, gq, out) = (&val(a)[q * m * k..], &g[q * m * n..], &mut gb[q * k * n..]);
                            if b_t {
                                gemm(n, m, k, gq, true, aq, false, out, 1.0);
                            } else {
                                gemm(k, m, n, aq, true, gq, false, out, 1.0);
                            }
                        }
                    });
                }
            }
            &Op::AddTiled { a, t } => {
                if wants(a) {
                    grads.accumulate(g.len(), a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
                if wants(t) {
                    let tl = len(t);
                    grads.accumulate(tl, t, |gt| {
                        for (j, y) in g.iter().enumerate() {
                            gt[j % tl] += y;
                        }
                    });
                }
            }
            Op::Gather { table, ids, cols } => {
                let (table, cols) = (*table, *cols);
                if wants(table) {
                    grads.accumulate(len(table), table, |gt| {
                        for (r, &id) in ids.iter().enumerate() {
                            for c in 0..cols {
                                gt[id * cols + c] += g[r * cols + c];
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, labels, probs, cols, norm } => {
                let (logits, cols) = (*logits, *cols);
                if wants(logits) {
                    let s = g[0] / norm;
                    grads.accumulate(len(logits), logits, |gl| {
                        for (r, label) in labels.iter().enumerate() {
                            let Some(label) = *label else { continue };
                            for c in 0..cols {
                                gl[r * cols + c] += s * probs[r * cols + c];
                            }
                            gl[r * cols + label] -= s;
                        }
                    });
                }
            }
            Op::Dropout { a, scale } => {
                let a = *a;
                if wants(a) {
                    grads.accumulate(g.len(), a, |ga| {
                        for j in 0..g.len() {
                            ga[j] += g[j] * scale[j];
                        }
                    });
                }
            }
            &Op::Block { a, r0, c0, rows, cols, src_cols } => {
                if wants(a) {
                    grads.accumulate(len(a), a, |ga| {
                        for r in 0..rows {
                            let dst = (r0 + r) * src_cols + c0;
                            for c in 0..cols {
                                ga[dst + c] += g[r * cols + c];
                            }
                        }
                    });
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let l = len(p);
                    if wants(p) {
                        grads.accumulate(l, p, |gp| {
                            gp.iter_mut().zip(&g[offset..offset + l]).for_each(|(x, y)| *x += y)
                        });
                    }
                    offset += l;
                }
            }
            Op::ConcatCols { parts, widths, rows } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if wants(p) {
                        grads.accumulate(rows * w, p, |gp| {
                            for r in 0..*rows {
                                for c in 0..w {
                                    gp[r * w + c] += g[r * total + offset + c];
                                }
                            }
                        });
                    }
                    offset += w;
                }
            }
            &Op::Sum { a } => {
                if wants(a) {
                    grads.accumulate(len(a), a, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
                }
            }
            &Op::RelativeLookup { m, n, clip, broadcast, width } => {
                if wants(m) {
                    grads.accumulate(len(m), m, |gm| {
                        for r in 0..g.len() / n {
                            let src_row = if broadcast { 0 } else { r };
                            for j in 0..n {
                                gm[src_row * width + clip_index(r % n, j, clip)] += g[r * n + j];
                            }
                        }
                    });
                }
            }
            &Op::ResetCls { v, theta_row, theta_col, n } => {
                if wants(v) {
                    grads.accumulate(n * n, v, |gv| {
                        for i in 1..n {
                            for j in 1..n {
                                gv[i * n + j] += g[i * n + j];
                            }
                        }
                    });
                }
                if wants(theta_row) {
                    grads.accumulate(1, theta_row, |gt| gt[0] += g[..n].iter().sum::<f64>());
                }
                if wants(theta_col) {
                    grads.accumulate(1, theta_col, |gt| gt[0] += (1..n).map(|i| g[i * n]).sum::<f64>());
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// `1 - 2 / (e^{2u} + 1)`; cheaper than libm `tanh` and within a few ulps
/// of it in absolute terms.
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn gelu_inner(x: f64) -> f64 {
    GELU_C * (x + GELU_A * x * x * x)
}

fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
