//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends one node to the tape. Inputs always precede their
//! consumers, so the node index is a topological order. [`Tape::reverse_grad`]
//! walks nodes from the output back to index 0 and accumulates each input
//! contribution in the order the operation lists its inputs. That order is
//! fixed, which makes gradients bit-reproducible.
//!
//! Leaves are either *tracked* ([`Tape::param`]) or constants
//! ([`Tape::constant`]). Nodes that do not depend on a tracked leaf carry no
//! gradient work at all, so a frozen backbone only pays for input gradients
//! along paths that lead to trainable parameters.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{matmul_nn, matmul_tn_acc, softmax_rows, transpose, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Matmul(Var, Var),
    Linear(Var, Var),
    Softmax(Var),
    Sigmoid(Var),
    Gelu {
        x: Var,
        tanh: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    HeadScale {
        x: Var,
        w: Var,
        heads: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    GaussianKernel {
        x: Var,
        y: Var,
        bandwidths: Vec<f64>,
    },
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Recorded computation. Cheap to create; one per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(alloc::format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

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

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(ta, tb, what)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::Add(a, b), tr))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::Sub(a, b), tr))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::Mul(a, b), tr))
    }

    /// `x[R×c] + b[c]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let c = tx.cols();
        if tb.len() != c {
            return Err(Error::shape(alloc::format!(
                "row broadcast: {:?} + {:?}",
                tx.shape(),
                tb.shape()
            )));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (v, bv) in row.iter_mut().zip(tb.data()) {
                *v += bv;
            }
        }
        let t = Tensor::new(tx.shape(), data)?;
        let tr = self.tracked(x) || self.tracked(b);
        Ok(self.push(t, Op::AddRow(x, b), tr))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).scale(s);
        let tr = self.tracked(a);
        self.push(t, Op::Scale(a, s), tr)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let tr = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Sum(a), tr)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let tr = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Mean(a), tr)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let tr = self.tracked(a);
        Ok(self.push(t, Op::Reshape(a), tr))
    }

    /// `a[m×k] · b[k×p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).matmul(self.value(b))?;
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::Matmul(a, b), tr))
    }

    /// `x[R×k] · wᵀ` for a weight stored as `w[p×k]` (output × input).
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (p, k) = tw.matrix_dims()?;
        if tx.cols() != k {
            return Err(Error::shape(alloc::format!(
                "linear: input {:?} against weight {:?}",
                tx.shape(),
                tw.shape()
            )));
        }
        let r = tx.rows();
        let wt = transpose(tw.data(), p, k);
        let t = Tensor::new(&[r, p], matmul_nn(tx.data(), &wt, r, k, p))?;
        let tr = self.tracked(x) || self.tracked(w);
        Ok(self.push(t, Op::Linear(x, w), tr))
    }

    /// Softmax over the last dimension, stabilized by max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape(), softmax_rows(ta.data(), ta.cols())).expect("same shape");
        let tr = self.tracked(a);
        self.push(t, Op::Softmax(a), tr)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::from_fn(ta.shape(), |i| sigmoid(ta.data()[i]));
        let tr = self.tracked(a);
        self.push(t, Op::Sigmoid(a), tr)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let tanh: Vec<f64> = ta
            .data()
            .iter()
            .map(|&x| libm::tanh(GELU_C * (x + 0.044715 * x * x * x)))
            .collect();
        let data = ta
            .data()
            .iter()
            .zip(&tanh)
            .map(|(&x, &t)| 0.5 * x * (1.0 + t))
            .collect();
        let t = Tensor::new(ta.shape(), data).expect("same shape");
        let tr = self.tracked(a);
        // Backward reuses the tanh values; constant nodes never need them.
        let tanh = if tr { tanh } else { Vec::new() };
        self.push(t, Op::Gelu { x: a, tanh }, tr)
    }

    /// Layer normalization over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("layer_norm affine extents differ from input"));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; tx.rows()];
        let mut out = vec![0.0; tx.len()];
        for (r, row) in tx.data().chunks_exact(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / libm::sqrt(var + LN_EPS);
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        let tr = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            tr,
        ))
    }

    /// Per-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch·tokens × heads·n]`; head `h` owns columns
    /// `[h·n, (h+1)·n)`. Output has the same layout: the head features
    /// `f_1..f_H` side by side, before any output projection.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        check_same(tq, tk, "attention q/k")?;
        check_same(tq, tv, "attention q/v")?;
        let rows = tq.rows();
        let d = tq.cols();
        if batch == 0 || rows % batch != 0 || heads == 0 || d % heads != 0 {
            return Err(Error::shape(alloc::format!(
                "attention: {rows} rows x {d} cols not divisible into {batch} samples and {heads} heads"
            )));
        }
        let tokens = rows / batch;
        let n = d / heads;
        let inv = 1.0 / libm::sqrt(n as f64);
        let mut probs = vec![0.0; batch * heads * tokens * tokens];
        let mut out = vec![0.0; rows * d];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut scores = vec![0.0; tokens];
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * tokens * tokens;
                for i in 0..tokens {
                    let qi = &qd[(b * tokens + i) * d + h * n..][..n];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &kd[(b * tokens + j) * d + h * n..][..n];
                        let mut acc = 0.0;
                        for t in 0..n {
                            acc += qi[t] * kj[t];
                        }
                        *s = acc * inv;
                        max = max.max(*s);
                    }
                    let mut sum = 0.0;
                    for s in scores.iter_mut() {
                        *s = libm::exp(*s - max);
                        sum += *s;
                    }
                    let prow = &mut probs[pbase + i * tokens..][..tokens];
                    let orow = &mut out[(b * tokens + i) * d + h * n..][..n];
                    for j in 0..tokens {
                        let p = scores[j] / sum;
                        prow[j] = p;
                        let vj = &vd[(b * tokens + j) * d + h * n..][..n];
                        for t in 0..n {
                            orow[t] += p * vj[t];
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[rows, d], out)?;
        let tr = self.tracked(q) || self.tracked(k) || self.tracked(v);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                batch,
                tokens,
                heads,
                probs,
            },
            tr,
        ))
    }

    /// Scale column block `h` of `x[R × H·n]` by `w[h]`.
    pub fn head_scale(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let heads = tw.len();
        let d = tx.cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(alloc::format!(
                "head_scale: {d} columns cannot be split into {heads} heads"
            )));
        }
        let n = d / heads;
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            for (h, block) in row.chunks_exact_mut(n).enumerate() {
                let s = tw.data()[h];
                for v in block {
                    *v *= s;
                }
            }
        }
        let t = Tensor::new(tx.shape(), data)?;
        let tr = self.tracked(x) || self.tracked(w);
        Ok(self.push(t, Op::HeadScale { x, w, heads }, tr))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::shape("concat of nothing"))?;
        if parts
            .iter()
            .any(|&p| self.value(p).rows() != rows || self.value(p).shape().len() != 2)
        {
            return Err(Error::shape("concat_cols: row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(&[rows, total], data)?;
        let tr = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), tr))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::shape("concat of nothing"))?;
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(Error::shape("concat_rows: column counts differ"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols;
        let t = Tensor::new(&[rows, cols], data)?;
        let tr = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), tr))
    }

    /// Gather rows of a matrix.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if idx.is_empty() || idx.iter().any(|&i| i >= r) {
            return Err(Error::shape(alloc::format!(
                "select_rows: index out of range for {r} rows"
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(tx.row(i));
        }
        let t = Tensor::new(&[idx.len(), c], data)?;
        let tr = self.tracked(x);
        Ok(self.push(
            t,
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            tr,
        ))
    }

    /// Scale every row to unit Euclidean norm. Zero rows are rejected.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        let mut norms = Vec::with_capacity(tx.rows());
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            let n = libm::sqrt(row.iter().map(|v| v * v).sum());
            if !n.is_finite() {
                return Err(Error::NonFinite(alloc::format!("row norm {n}")));
            }
            if n == 0.0 {
                return Err(Error::invalid("cannot normalize a zero-norm row"));
            }
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let t = Tensor::new(tx.shape(), data)?;
        let tr = self.tracked(x);
        Ok(self.push(t, Op::NormalizeRows { x, norms }, tr))
    }

    /// Mean negative log-softmax of the labelled entry in each row.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, c) = (tl.rows(), tl.cols());
        if labels.len() != n {
            return Err(Error::shape(alloc::format!(
                "{} labels for {n} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::invalid(alloc::format!(
                "label {bad} outside [0, {c})"
            )));
        }
        let probs = softmax_rows(tl.data(), c);
        let mut loss = 0.0;
        for (i, row) in tl.data().chunks_exact(c).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
            loss += lse - row[labels[i]];
        }
        let t = Tensor::scalar(loss / n as f64);
        let tr = self.tracked(logits);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            tr,
        ))
    }

    /// Multi-bandwidth Gaussian kernel matrix
    /// `K[i,j] = mean_σ exp(-‖x_i - y_j‖² / 2σ²)`.
    pub fn gaussian_kernel(&mut self, x: Var, y: Var, bandwidths: &[f64]) -> Result<Var> {
        if bandwidths.is_empty() || bandwidths.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(
                "bandwidths must be a nonempty list of positive reals",
            ));
        }
        let (tx, ty) = (self.value(x), self.value(y));
        let (n, d) = (tx.rows(), tx.cols());
        let m = ty.rows();
        if ty.cols() != d {
            return Err(Error::shape(alloc::format!(
                "kernel: {:?} vs {:?}",
                tx.shape(),
                ty.shape()
            )));
        }
        let coef: Vec<f64> = bandwidths.iter().map(|s| -0.5 / (s * s)).collect();
        let inv_k = 1.0 / bandwidths.len() as f64;
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let xi = tx.row(i);
            for j in 0..m {
                let d2 = sq_dist(xi, ty.row(j));
                data[i * m + j] = coef.iter().map(|c| libm::exp(c * d2)).sum::<f64>() * inv_k;
            }
        }
        let t = Tensor::new(&[n, m], data)?;
        let tr = self.tracked(x) || self.tracked(y);
        Ok(self.push(
            t,
            Op::GaussianKernel {
                x,
                y,
                bandwidths: bandwidths.to_vec(),
            },
            tr,
        ))
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        check_same(&hard, self.value(soft), "straight_through")?;
        let tr = self.tracked(soft);
        Ok(self.push(hard, Op::StraightThrough(soft), tr))
    }

    /// Gradients of a scalar node with respect to `wrt`, in the same order.
    ///
    /// Only nodes on a path from some `wrt` leaf to `output` are visited;
    /// everything else, including tracked parameters not in `wrt`, gets no
    /// accumulation. A `wrt` entry the output does not depend on yields a
    /// zero tensor of its shape.
    pub fn reverse_grad(&self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        if self.value(output).len() != 1 {
            return Err(Error::shape(alloc::format!(
                "reverse_grad needs a scalar output, got {:?}",
                self.shape(output)
            )));
        }
        let end = output.0 + 1;
        let mut reach = vec![false; end];
        for &w in wrt {
            if w.0 < end {
                reach[w.0] = true;
            }
        }
        for i in 0..end {
            if !reach[i] && self.nodes[i].tracked {
                reach[i] = self.inputs_any(i, |v| reach[v.0]);
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; end];
        if reach[output.0] {
            grads[output.0] = Some(vec![1.0]);
        }
        for i in (0..end).rev() {
            if !reach[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &reach, &mut grads);
            grads[i] = Some(g);
        }
        Ok(wrt
            .iter()
            .map(|&w| {
                let shape = self.shape(w);
                match grads.get(w.0).and_then(|g| g.clone()) {
                    Some(g) => Tensor::new(shape, g).expect("gradient shape"),
                    None => Tensor::zeros(shape),
                }
            })
            .collect())
    }

    fn inputs_any(&self, i: usize, f: impl Fn(Var) -> bool) -> bool {
        match &self.nodes[i].op {
            Op::Leaf => false,
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::Matmul(a, b)
            | Op::Linear(a, b) => f(*a) || f(*b),
            Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a)
            | Op::Softmax(a)
            | Op::Sigmoid(a)
            | Op::StraightThrough(a) => f(*a),
            Op::LayerNorm { x, gamma, beta, .. } => f(*x) || f(*gamma) || f(*beta),
            Op::Attention { q, k, v, .. } => f(*q) || f(*k) || f(*v),
            Op::HeadScale { x, w, .. } => f(*x) || f(*w),
            Op::ConcatCols(p) | Op::ConcatRows(p) => p.iter().any(|&v| f(v)),
            Op::SelectRows { x, .. } | Op::NormalizeRows { x, .. } | Op::Gelu { x, .. } => f(*x),
            Op::CrossEntropy { logits, .. } => f(*logits),
            Op::GaussianKernel { x, y, .. } => f(*x) || f(*y),
        }
    }

    fn backward_node(&self, i: usize, g: &[f64], reach: &[bool], grads: &mut [Option<Vec<f64>>]) {
        let want = |v: Var| reach[v.0];
        let val = |v: Var| self.nodes[v.0].value.data();
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if want(*b) {
                    acc(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if want(*b) {
                    acc(grads, *b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    acc(
                        grads,
                        *a,
                        g.iter().zip(val(*b)).map(|(x, y)| x * y).collect(),
                    );
                }
                if want(*b) {
                    acc(
                        grads,
                        *b,
                        g.iter().zip(val(*a)).map(|(x, y)| x * y).collect(),
                    );
                }
            }
            Op::AddRow(x, b) => {
                if want(*x) {
                    acc(grads, *x, g.to_vec());
                }
                if want(*b) {
                    let c = self.nodes[b.0].value.len();
                    let mut gb = vec![0.0; c];
                    for row in g.chunks_exact(c) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => {
                if want(*a) {
                    acc(grads, *a, g.iter().map(|v| v * s).collect());
                }
            }
            Op::Sum(a) => {
                if want(*a) {
                    acc(grads, *a, vec![g[0]; self.nodes[a.0].value.len()]);
                }
            }
            Op::Mean(a) => {
                if want(*a) {
                    let n = self.nodes[a.0].value.len();
                    acc(grads, *a, vec![g[0] / n as f64; n]);
                }
            }
            Op::Reshape(a) | Op::StraightThrough(a) => {
                if want(*a) {
                    acc(grads, *a, g.to_vec());
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.nodes[a.0].value.matrix_dims().expect("matrix");
                let p = self.nodes[b.0].value.cols();
                if want(*a) {
                    let bt = transpose(val(*b), k, p);
                    acc(grads, *a, matmul_nn(g, &bt, m, p, k));
                }
                if want(*b) {
                    let mut gb = vec![0.0; k * p];
                    matmul_tn_acc(val(*a), g, m, k, p, &mut gb);
                    acc(grads, *b, gb);
                }
            }
            Op::Linear(x, w) => {
                let (p, k) = self.nodes[w.0].value.matrix_dims().expect("matrix");
                let r = self.nodes[x.0].value.rows();
                if want(*x) {
                    acc(grads, *x, matmul_nn(g, val(*w), r, p, k));
                }
                if want(*w) {
                    let mut gw = vec![0.0; p * k];
                    matmul_tn_acc(g, val(*x), r, p, k, &mut gw);
                    acc(grads, *w, gw);
                }
            }
            Op::Softmax(a) => {
                if want(*a) {
                    let y = node.value.data();
                    let c = node.value.cols();
                    let mut ga = vec![0.0; y.len()];
                    for ((yr, gr), out) in y
                        .chunks_exact(c)
                        .zip(g.chunks_exact(c))
                        .zip(ga.chunks_exact_mut(c))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(grads, *a, ga);
                }
            }
            Op::Sigmoid(a) => {
                if want(*a) {
                    let y = node.value.data();
                    acc(
                        grads,
                        *a,
                        g.iter().zip(y).map(|(gv, s)| gv * s * (1.0 - s)).collect(),
                    );
                }
            }
            Op::Gelu { x: a, tanh } => {
                if want(*a) {
                    let x = val(*a);
                    let ga = g
                        .iter()
                        .zip(x)
                        .zip(tanh)
                        .map(|((gv, &x), &t)| {
                            let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                            gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                        })
                        .collect();
                    acc(grads, *a, ga);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = node.value.cols();
                let gam = val(*gamma);
                if want(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for (r, (gr, hr)) in g.chunks_exact(c).zip(xhat.chunks_exact(c)).enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            gx[r * c + j] = rstd[r] * (gr[j] * gam[j] - m1 - hr[j] * m2);
                        }
                    }
                    acc(grads, *x, gx);
                }
                if want(*gamma) {
                    let mut gg = vec![0.0; c];
                    for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                    acc(grads, *gamma, gg);
                }
                if want(*beta) {
                    let mut gb = vec![0.0; c];
                    for gr in g.chunks_exact(c) {
                        for j in 0..c {
                            gb[j] += gr[j];
                        }
                    }
                    acc(grads, *beta, gb);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                tokens,
                heads,
                probs,
            } => {
                self.attention_backward(
                    g,
                    (*q, *k, *v),
                    (*batch, *tokens, *heads),
                    probs,
                    reach,
                    grads,
                );
            }
            Op::HeadScale { x, w, heads } => {
                let d = node.value.cols();
                let n = d / heads;
                if want(*x) {
                    let wv = val(*w);
                    let mut gx = g.to_vec();
                    for row in gx.chunks_exact_mut(d) {
                        for (h, block) in row.chunks_exact_mut(n).enumerate() {
                            for v in block {
                                *v *= wv[h];
                            }
                        }
                    }
                    acc(grads, *x, gx);
                }
                if want(*w) {
                    let xv = val(*x);
                    let mut gw = vec![0.0; *heads];
                    for (gr, xr) in g.chunks_exact(d).zip(xv.chunks_exact(d)) {
                        for h in 0..*heads {
                            for j in h * n..(h + 1) * n {
                                gw[h] += gr[j] * xr[j];
                            }
                        }
                    }
                    acc(grads, *w, gw);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let c = self.nodes[p.0].value.cols();
                    if want(p) {
                        let mut gp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + off..r * total + off + c]);
                        }
                        acc(grads, p, gp);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    if want(p) {
                        acc(grads, p, g[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::SelectRows { x, idx } => {
                if want(*x) {
                    let c = node.value.cols();
                    let mut gx = vec![0.0; self.nodes[x.0].value.len()];
                    for (k, &r) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[r * c + j] += g[k * c + j];
                        }
                    }
                    acc(grads, *x, gx);
                }
            }
            Op::NormalizeRows { x, norms } => {
                if want(*x) {
                    let y = node.value.data();
                    let c = node.value.cols();
                    let mut gx = vec![0.0; y.len()];
                    for (r, (yr, gr)) in y.chunks_exact(c).zip(g.chunks_exact(c)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] = (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                    acc(grads, *x, gx);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if want(*logits) {
                    let c = self.nodes[logits.0].value.cols();
                    let n = labels.len() as f64;
                    let mut gl = probs.clone();
                    for (i, &y) in labels.iter().enumerate() {
                        gl[i * c + y] -= 1.0;
                    }
                    for v in gl.iter_mut() {
                        *v *= g[0] / n;
                    }
                    acc(grads, *logits, gl);
                }
            }
            Op::GaussianKernel { x, y, bandwidths } => {
                let tx = &self.nodes[x.0].value;
                let ty = &self.nodes[y.0].value;
                let (n, d, m) = (tx.rows(), tx.cols(), ty.rows());
                let coef: Vec<f64> = bandwidths.iter().map(|s| -0.5 / (s * s)).collect();
                let inv_k = 1.0 / bandwidths.len() as f64;
                let mut gx = want(*x).then(|| vec![0.0; n * d]);
                let mut gy = want(*y).then(|| vec![0.0; m * d]);
                for i in 0..n {
                    let xi = tx.row(i);
                    for j in 0..m {
                        let yj = ty.row(j);
                        let d2 = sq_dist(xi, yj);
                        // dK/d(d2) = mean_σ exp(c d2) c
                        let dk: f64 =
                            coef.iter().map(|c| c * libm::exp(c * d2)).sum::<f64>() * inv_k;
                        let s = 2.0 * g[i * m + j] * dk;
                        if s == 0.0 {
                            continue;
                        }
                        for t in 0..d {
                            let diff = xi[t] - yj[t];
                            if let Some(gx) = gx.as_mut() {
                                gx[i * d + t] += s * diff;
                            }
                            if let Some(gy) = gy.as_mut() {
                                gy[j * d + t] -= s * diff;
                            }
                        }
                    }
                }
                if let Some(gx) = gx {
                    acc(grads, *x, gx);
                }
                if let Some(gy) = gy {
                    acc(grads, *y, gy);
                }
            }
        }
    }

    fn attention_backward(
        &self,
        g: &[f64],
        (q, k, v): (Var, Var, Var),
        (batch, tokens, heads): (usize, usize, usize),
        probs: &[f64],
        reach: &[bool],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let tq = &self.nodes[q.0].value;
        let d = tq.cols();
        let n = d / heads;
        let inv = 1.0 / libm::sqrt(n as f64);
        let (qd, kd, vd) = (
            tq.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let need_qk = reach[q.0] || reach[k.0];
        let mut gq = vec![0.0; qd.len()];
        let mut gk = vec![0.0; qd.len()];
        let mut gv = vec![0.0; qd.len()];
        let mut dp = vec![0.0; tokens];
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * tokens * tokens;
                for i in 0..tokens {
                    let gi = &g[(b * tokens + i) * d + h * n..][..n];
                    let prow = &probs[pbase + i * tokens..][..tokens];
                    // dV_j += p_ij * gO_i ; dP_ij = gO_i · V_j
                    let mut dot = 0.0;
                    for j in 0..tokens {
                        let base = (b * tokens + j) * d + h * n;
                        let vj = &vd[base..base + n];
                        let mut s = 0.0;
                        for t in 0..n {
                            s += gi[t] * vj[t];
                            gv[base + t] += prow[j] * gi[t];
                        }
                        dp[j] = s;
                        dot += s * prow[j];
                    }
                    if !need_qk {
                        continue;
                    }
                    let qbase = (b * tokens + i) * d + h * n;
                    for j in 0..tokens {
                        let ds = prow[j] * (dp[j] - dot) * inv;
                        if ds == 0.0 {
                            continue;
                        }
                        let kbase = (b * tokens + j) * d + h * n;
                        for t in 0..n {
                            gq[qbase + t] += ds * kd[kbase + t];
                            gk[kbase + t] += ds * qd[qbase + t];
                        }
                    }
                }
            }
        }
        if reach[q.0] {
            acc(grads, q, gq);
        }
        if reach[k.0] {
            acc(grads, k, gk);
        }
        if reach[v.0] {
            acc(grads, v, gv);
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(&g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_gradient_six_at_three() {
        let mut t = Tape::new();
        let w = t.param(Tensor::scalar(3.0));
        let y = t.mul(w, w).unwrap();
        let g = t.reverse_grad(y, &[w]).unwrap();
        assert_eq!(g[0].item(), 6.0);
    }

    #[test]
    fn unrelated_parameter_gets_zero_of_its_shape() {
        let mut t = Tape::new();
        let w = t.param(Tensor::scalar(2.0));
        let u = t.param(Tensor::zeros(&[2, 3]));
        let y = t.scale(w, 4.0);
        let g = t.reverse_grad(y, &[w, u]).unwrap();
        assert_eq!(g[0].item(), 4.0);
        assert_eq!(g[1], Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut t = Tape::new();
        let w = t.param(Tensor::zeros(&[2]));
        assert!(t.reverse_grad(w, &[w]).is_err());
    }

    #[test]
    fn parameters_outside_the_request_are_not_visited() {
        // y = a*b; asking only for a must not depend on b being tracked.
        let mut t = Tape::new();
        let a = t.param(Tensor::scalar(2.0));
        let b = t.param(Tensor::scalar(5.0));
        let y = t.mul(a, b).unwrap();
        let g = t.reverse_grad(y, &[a]).unwrap();
        assert_eq!(g[0].item(), 5.0);
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(
            Tensor::new(
                &[3, 2],
                alloc::vec![0.0, 0.0, libm::log(3.0), 0.0, 1000.0, 0.0],
            )
            .unwrap(),
        );
        let y = t.softmax(x);
        let v = t.value(y).data();
        assert_eq!(&v[0..2], &[0.5, 0.5]);
        assert!((v[2] - 0.75).abs() < 1e-15 && (v[3] - 0.25).abs() < 1e-15);
        assert!((v[4] - 1.0).abs() < 1e-15 && v[5] >= 0.0 && v[5] < 1e-300);
    }
}
