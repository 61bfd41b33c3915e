//! Reverse-mode autodiff on an arena tape.
//!
//! Nodes are pushed in construction order, so the index order is already a
//! topological order and `backward` is a single reverse sweep that visits
//! each node once. Values are computed eagerly as nodes are pushed; the few
//! ops that need forward auxiliaries (argmax, normalization stats) cache
//! them inside the op. Gradients accumulate additively when a node feeds
//! more than one consumer.
//!
//! Convolution uses the cross-correlation convention (no kernel flip).
//! `conv2d` kernels are laid out [Co, Ci, k, k]; `tconv2d` kernels
//! [Ci, Co, k, k], so a conv kernel handed unchanged to tconv2d acts as the
//! exact adjoint of the conv. The backward-input path of conv2d is its own
//! loop and never calls the tconv forward; the pair stays independent so
//! one can be checked against the other.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::num;
use crate::params::ParamId;
use crate::tensor::{mm_nn, mm_nt, mm_tn, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    MulConst(Var, f64),
    /// Broadcast-add a [1] scalar variable.
    AddScalar(Var, Var),
    /// Broadcast-multiply by a [1] scalar variable.
    ScaleScalar(Var, Var),
    Relu(Var),
    Gelu(Var),
    Clamp01(Var),
    SumAll(Var),
    /// A[m,k] @ B[k,n]
    Matmul(Var, Var),
    /// A[m,k] @ B[n,k]^T
    MatmulNT(Var, Var),
    /// x[m,n] + b[n] per row
    AddRowBias(Var, Var),
    /// x[C,H,W] + b[C] per channel
    AddChanBias(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    TConv2d {
        x: Var,
        w: Var,
        stride: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Gather {
        x: Var,
        indices: Arc<Vec<usize>>,
    },
    Reshape(Var),
}

struct Node {
    op: Op,
    value: Tensor,
    param: Option<ParamId>,
}

pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by one backward sweep.
pub struct Grads {
    g: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.g.get(v.0).and_then(|o| o.as_deref())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    pub fn param_of(&self, v: Var) -> Option<ParamId> {
        self.nodes[v.0].param
    }

    /// (node index, param id) for every parameter leaf on the tape.
    pub fn param_leaves(&self) -> impl Iterator<Item = (Var, ParamId)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (Var(i), p)))
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn param(&mut self, value: Tensor, id: ParamId) -> Var {
        let v = self.push(Op::Leaf, value);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::Dimension(alloc::format!(
                "add: shape {:?} vs {:?}",
                ta.shape,
                tb.shape
            )));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let t = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        Ok(self.push(Op::Add(a, b), t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::Dimension(alloc::format!(
                "mul: shape {:?} vs {:?}",
                ta.shape,
                tb.shape
            )));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let t = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        Ok(self.push(Op::Mul(a, b), t))
    }

    pub fn mul_const(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|x| x * c).collect(),
        };
        self.push(Op::MulConst(a, c), t)
    }

    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Dimension(alloc::format!(
                "add_scalar: scalar operand has shape {:?}",
                self.value(s).shape
            )));
        }
        let sv = self.value(s).data[0];
        let tx = self.value(x);
        let t = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|v| v + sv).collect(),
        };
        Ok(self.push(Op::AddScalar(x, s), t))
    }

    pub fn scale_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Dimension(alloc::format!(
                "scale_scalar: scalar operand has shape {:?}",
                self.value(s).shape
            )));
        }
        let sv = self.value(s).data[0];
        let tx = self.value(x);
        let t = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|v| v * sv).collect(),
        };
        Ok(self.push(Op::ScaleScalar(x, s), t))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
        };
        self.push(Op::Relu(a), t)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| num::gelu(x)).collect(),
        };
        self.push(Op::Gelu(a), t)
    }

    pub fn clamp01(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| x.clamp(0.0, 1.0)).collect(),
        };
        self.push(Op::Clamp01(a), t)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.expect_rank(2, "matmul lhs")?;
        tb.expect_rank(2, "matmul rhs")?;
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::Dimension(alloc::format!(
                "matmul: [{m},{k}] @ [{k2},{n}]"
            )));
        }
        let mut out = vec![0.0; m * n];
        mm_nn(&ta.data, &tb.data, &mut out, m, k, n);
        let t = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.push(Op::Matmul(a, b), t))
    }

    /// a[m,k] @ b[n,k]^T -> [m,n]
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.expect_rank(2, "matmul_nt lhs")?;
        tb.expect_rank(2, "matmul_nt rhs")?;
        let (m, k) = (ta.rows(), ta.cols());
        let (n, k2) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::Dimension(alloc::format!(
                "matmul_nt: [{m},{k}] @ [{n},{k2}]^T"
            )));
        }
        let mut out = vec![0.0; m * n];
        mm_nt(&ta.data, &tb.data, &mut out, m, k, n);
        let t = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.push(Op::MatmulNT(a, b), t))
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        tx.expect_rank(2, "add_row_bias input")?;
        tb.expect_rank(1, "add_row_bias bias")?;
        let (m, n) = (tx.rows(), tx.cols());
        if tb.len() != n {
            return Err(Error::Dimension(alloc::format!(
                "add_row_bias: bias len {} vs cols {n}",
                tb.len()
            )));
        }
        let mut data = tx.data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += tb.data[j];
            }
        }
        let t = Tensor {
            shape: vec![m, n],
            data,
        };
        Ok(self.push(Op::AddRowBias(x, b), t))
    }

    pub fn add_chan_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        tx.expect_rank(3, "add_chan_bias input")?;
        tb.expect_rank(1, "add_chan_bias bias")?;
        let (c, h, w) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        if tb.len() != c {
            return Err(Error::Dimension(alloc::format!(
                "add_chan_bias: bias len {} vs channels {c}",
                tb.len()
            )));
        }
        let mut data = tx.data.clone();
        for ci in 0..c {
            let bias = tb.data[ci];
            for v in &mut data[ci * h * w..(ci + 1) * h * w] {
                *v += bias;
            }
        }
        let t = Tensor {
            shape: vec![c, h, w],
            data,
        };
        Ok(self.push(Op::AddChanBias(x, b), t))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        tx.expect_rank(3, "conv2d input")?;
        tw.expect_rank(4, "conv2d kernel")?;
        let xs = [tx.shape[0], tx.shape[1], tx.shape[2]];
        let ws = [tw.shape[0], tw.shape[1], tw.shape[2], tw.shape[3]];
        let (out, os) = conv2d_fwd(&tx.data, xs, &tw.data, ws, stride, pad)?;
        let t = Tensor {
            shape: os.to_vec(),
            data: out,
        };
        Ok(self.push(Op::Conv2d { x, w, stride, pad }, t))
    }

    pub fn tconv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        tx.expect_rank(3, "tconv2d input")?;
        tw.expect_rank(4, "tconv2d kernel")?;
        let xs = [tx.shape[0], tx.shape[1], tx.shape[2]];
        let ws = [tw.shape[0], tw.shape[1], tw.shape[2], tw.shape[3]];
        let (out, os) = tconv2d_fwd(&tx.data, xs, &tw.data, ws, stride)?;
        let t = Tensor {
            shape: os.to_vec(),
            data: out,
        };
        Ok(self.push(Op::TConv2d { x, w, stride }, t))
    }

    pub fn max_pool(&mut self, x: Var, size: usize) -> Result<Var> {
        let tx = self.value(x);
        tx.expect_rank(3, "max_pool input")?;
        let (c, h, w) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        if size == 0 || h % size != 0 || w % size != 0 {
            return Err(Error::Dimension(alloc::format!(
                "max_pool: size {size} does not divide {h}x{w}"
            )));
        }
        let (ho, wo) = (h / size, w / size);
        let mut out = vec![0.0; c * ho * wo];
        let mut argmax = vec![0usize; c * ho * wo];
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..size {
                        for kx in 0..size {
                            let iy = oy * size + ky;
                            let ix = ox * size + kx;
                            let idx = (ci * h + iy) * w + ix;
                            // strict > keeps the first index on ties
                            let v = tx.data[idx];
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (ci * ho + oy) * wo + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let t = Tensor {
            shape: vec![c, ho, wo],
            data: out,
        };
        Ok(self.push(Op::MaxPool { x, argmax }, t))
    }

    /// Layer norm over the last dimension, learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.layer_norm_eps(x, gain, bias, LN_EPS)
    }

    /// Layer norm with an explicit variance floor. Backward needs no eps of
    /// its own: it runs off the cached per-row mean and rstd.
    pub fn layer_norm_eps(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        if !(eps > 0.0) {
            return Err(Error::Parameter(alloc::format!(
                "layer_norm: eps must be positive, got {eps}"
            )));
        }
        if tx.rank() == 0 {
            return Err(Error::Dimension("layer_norm: rank-0 input".into()));
        }
        let d = *tx.shape.last().unwrap();
        if tg.shape != [d] || tb.shape != [d] {
            return Err(Error::Dimension(alloc::format!(
                "layer_norm: gain {:?} / bias {:?} vs last dim {d}",
                tg.shape,
                tb.shape
            )));
        }
        let rows = tx.len() / d;
        let mut data = vec![0.0; tx.len()];
        let mut means = vec![0.0; rows];
        let mut rstds = vec![0.0; rows];
        for r in 0..rows {
            let xr = &tx.data[r * d..(r + 1) * d];
            let m = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64;
            let rstd = 1.0 / num::sqrt(var + eps);
            means[r] = m;
            rstds[r] = rstd;
            for j in 0..d {
                data[r * d + j] = (xr[j] - m) * rstd * tg.data[j] + tb.data[j];
            }
        }
        let t = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
            t,
        ))
    }

    /// Softmax over the last dimension, max-subtracted for stability.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() == 0 || tx.is_empty() {
            return Err(Error::Dimension("softmax: empty input".into()));
        }
        let d = *tx.shape.last().unwrap();
        let rows = tx.len() / d;
        let mut data = vec![0.0; tx.len()];
        for r in 0..rows {
            let xr = &tx.data[r * d..(r + 1) * d];
            let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..d {
                let e = num::exp(xr[j] - m);
                data[r * d + j] = e;
                sum += e;
            }
            for j in 0..d {
                data[r * d + j] /= sum;
            }
        }
        let t = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        Ok(self.push(Op::Softmax(x), t))
    }

    /// -log softmax(logits)[label] for a rank-1 logit vector.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let tl = self.value(logits);
        tl.expect_rank(1, "cross_entropy logits")?;
        let k = tl.len();
        if label >= k {
            return Err(Error::Input(alloc::format!(
                "cross_entropy: label {label} out of range for {k} classes"
            )));
        }
        let m = tl.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs = vec![0.0; k];
        let mut sum = 0.0;
        for j in 0..k {
            let e = num::exp(tl.data[j] - m);
            probs[j] = e;
            sum += e;
        }
        for p in &mut probs {
            *p /= sum;
        }
        let loss = -num::ln(probs[label]);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            Tensor::scalar(loss),
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Dimension("concat: no inputs".into()));
        }
        let first = self.value(inputs[0]).shape.clone();
        if axis >= first.len() {
            return Err(Error::Dimension(alloc::format!(
                "concat: axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut axis_total = 0usize;
        for &v in inputs {
            let s = &self.value(v).shape;
            if s.len() != first.len() {
                return Err(Error::Dimension("concat: rank mismatch".into()));
            }
            for (i, (&a, &b)) in s.iter().zip(&first).enumerate() {
                if i != axis && a != b {
                    return Err(Error::Dimension(alloc::format!(
                        "concat: shape {:?} vs {:?} off axis {axis}",
                        s,
                        first
                    )));
                }
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * axis_total * inner];
        let row = axis_total * inner;
        let mut col_off = 0usize;
        for &v in inputs {
            let t = self.value(v);
            let ai = t.shape[axis];
            let block = ai * inner;
            for o in 0..outer {
                let src = &t.data[o * block..(o + 1) * block];
                let dst = &mut data[o * row + col_off..o * row + col_off + block];
                dst.copy_from_slice(src);
            }
            col_off += block;
        }
        let t = Tensor {
            shape: out_shape,
            data,
        };
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            t,
        ))
    }

    /// Rows [start, start+len) along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() == 0 || start + len > tx.shape[0] {
            return Err(Error::Dimension(alloc::format!(
                "slice_rows: [{start}, {}) of shape {:?}",
                start + len,
                tx.shape
            )));
        }
        let inner: usize = tx.shape[1..].iter().product();
        let data = tx.data[start * inner..(start + len) * inner].to_vec();
        let mut shape = tx.shape.clone();
        shape[0] = len;
        let t = Tensor { shape, data };
        Ok(self.push(Op::SliceRows { x, start }, t))
    }

    /// out[i] = x.data[indices[i]], reshaped to `out_shape`.
    pub fn gather(&mut self, x: Var, indices: Arc<Vec<usize>>, out_shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let want: usize = out_shape.iter().product();
        if want != indices.len() {
            return Err(Error::Dimension(alloc::format!(
                "gather: {} indices vs out shape {:?}",
                indices.len(),
                out_shape
            )));
        }
        let n = tx.len();
        let mut data = vec![0.0; indices.len()];
        for (o, &idx) in indices.iter().enumerate() {
            if idx >= n {
                return Err(Error::Dimension(alloc::format!(
                    "gather: index {idx} out of range {n}"
                )));
            }
            data[o] = tx.data[idx];
        }
        let t = Tensor {
            shape: out_shape.to_vec(),
            data,
        };
        Ok(self.push(Op::Gather { x, indices }, t))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let want: usize = shape.iter().product();
        if want != tx.len() {
            return Err(Error::Dimension(alloc::format!(
                "reshape: {:?} -> {:?}",
                tx.shape,
                shape
            )));
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data: tx.data.clone(),
        };
        Ok(self.push(Op::Reshape(x), t))
    }

    /// Single reverse sweep from a scalar root. Every reachable node gets a
    /// gradient buffer; leaves keep theirs for the caller to read.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Input("backward: root not on tape".into()));
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Dimension(alloc::format!(
                "backward: root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape
            )));
        }
        let mut g: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        g[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(dy) = g[i].take() else { continue };
            self.distribute(i, &dy, &mut g);
            g[i] = Some(dy);
        }
        Ok(Grads { g })
    }

    fn buf<'a>(g: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut [f64] {
        g[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn distribute(&self, i: usize, dy: &[f64], g: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                {
                    let da = Self::buf(g, *a, dy.len());
                    for (d, &v) in da.iter_mut().zip(dy) {
                        *d += v;
                    }
                }
                let db = Self::buf(g, *b, dy.len());
                for (d, &v) in db.iter_mut().zip(dy) {
                    *d += v;
                }
            }
            Op::Mul(a, b) => {
                {
                    let bval = &self.nodes[b.0].value.data;
                    let da = Self::buf(g, *a, dy.len());
                    for j in 0..dy.len() {
                        da[j] += dy[j] * bval[j];
                    }
                }
                let aval = &self.nodes[a.0].value.data;
                let db = Self::buf(g, *b, dy.len());
                for j in 0..dy.len() {
                    db[j] += dy[j] * aval[j];
                }
            }
            Op::MulConst(a, c) => {
                let da = Self::buf(g, *a, dy.len());
                for (d, &v) in da.iter_mut().zip(dy) {
                    *d += c * v;
                }
            }
            Op::AddScalar(x, s) => {
                {
                    let dx = Self::buf(g, *x, dy.len());
                    for (d, &v) in dx.iter_mut().zip(dy) {
                        *d += v;
                    }
                }
                let ds = Self::buf(g, *s, 1);
                ds[0] += dy.iter().sum::<f64>();
            }
            Op::ScaleScalar(x, s) => {
                let sv = self.nodes[s.0].value.data[0];
                {
                    let dx = Self::buf(g, *x, dy.len());
                    for (d, &v) in dx.iter_mut().zip(dy) {
                        *d += sv * v;
                    }
                }
                let xval = &self.nodes[x.0].value.data;
                let ds = Self::buf(g, *s, 1);
                ds[0] += dy.iter().zip(xval).map(|(&d, &x)| d * x).sum::<f64>();
            }
            Op::Relu(a) => {
                let aval = &self.nodes[a.0].value.data;
                let da = Self::buf(g, *a, dy.len());
                for j in 0..dy.len() {
                    if aval[j] > 0.0 {
                        da[j] += dy[j];
                    }
                }
            }
            Op::Gelu(a) => {
                let aval = &self.nodes[a.0].value.data;
                let da = Self::buf(g, *a, dy.len());
                for j in 0..dy.len() {
                    da[j] += dy[j] * num::gelu_grad(aval[j]);
                }
            }
            Op::Clamp01(a) => {
                // zero subgradient at the boundary points themselves
                let aval = &self.nodes[a.0].value.data;
                let da = Self::buf(g, *a, dy.len());
                for j in 0..dy.len() {
                    if aval[j] > 0.0 && aval[j] < 1.0 {
                        da[j] += dy[j];
                    }
                }
            }
            Op::SumAll(a) => {
                let len = self.nodes[a.0].value.len();
                let da = Self::buf(g, *a, len);
                for d in da.iter_mut() {
                    *d += dy[0];
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = {
                    let t = &self.nodes[a.0].value;
                    (t.rows(), t.cols())
                };
                let n = self.nodes[b.0].value.cols();
                {
                    let bval = &self.nodes[b.0].value.data;
                    let da = Self::buf(g, *a, m * k);
                    mm_nt(dy, bval, da, m, n, k);
                }
                let aval = &self.nodes[a.0].value.data;
                let db = Self::buf(g, *b, k * n);
                mm_tn(aval, dy, db, m, k, n);
            }
            Op::MatmulNT(a, b) => {
                let (m, k) = {
                    let t = &self.nodes[a.0].value;
                    (t.rows(), t.cols())
                };
                let n = self.nodes[b.0].value.rows();
                {
                    let bval = &self.nodes[b.0].value.data;
                    let da = Self::buf(g, *a, m * k);
                    mm_nn(dy, bval, da, m, n, k);
                }
                let aval = &self.nodes[a.0].value.data;
                let db = Self::buf(g, *b, n * k);
                mm_tn(dy, aval, db, m, n, k);
            }
            Op::AddRowBias(x, b) => {
                let (m, n) = {
                    let t = &self.nodes[x.0].value;
                    (t.rows(), t.cols())
                };
                {
                    let dx = Self::buf(g, *x, m * n);
                    for (d, &v) in dx.iter_mut().zip(dy) {
                        *d += v;
                    }
                }
                let db = Self::buf(g, *b, n);
                for i in 0..m {
                    for j in 0..n {
                        db[j] += dy[i * n + j];
                    }
                }
            }
            Op::AddChanBias(x, b) => {
                let (c, h, w) = {
                    let s = &self.nodes[x.0].value.shape;
                    (s[0], s[1], s[2])
                };
                {
                    let dx = Self::buf(g, *x, c * h * w);
                    for (d, &v) in dx.iter_mut().zip(dy) {
                        *d += v;
                    }
                }
                let db = Self::buf(g, *b, c);
                for ci in 0..c {
                    db[ci] += dy[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>();
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let xs = {
                    let s = &self.nodes[x.0].value.shape;
                    [s[0], s[1], s[2]]
                };
                let ws = {
                    let s = &self.nodes[w.0].value.shape;
                    [s[0], s[1], s[2], s[3]]
                };
                {
                    let wval = &self.nodes[w.0].value.data;
                    let dx = Self::buf(g, *x, xs.iter().product());
                    conv2d_bwd_x(dy, wval, dx, xs, ws, *stride, *pad);
                }
                let xval = &self.nodes[x.0].value.data;
                let dw = Self::buf(g, *w, ws.iter().product());
                conv2d_bwd_w(dy, xval, dw, xs, ws, *stride, *pad);
            }
            Op::TConv2d { x, w, stride } => {
                let xs = {
                    let s = &self.nodes[x.0].value.shape;
                    [s[0], s[1], s[2]]
                };
                let ws = {
                    let s = &self.nodes[w.0].value.shape;
                    [s[0], s[1], s[2], s[3]]
                };
                {
                    let wval = &self.nodes[w.0].value.data;
                    let dx = Self::buf(g, *x, xs.iter().product());
                    tconv2d_bwd_x(dy, wval, dx, xs, ws, *stride);
                }
                let xval = &self.nodes[x.0].value.data;
                let dw = Self::buf(g, *w, ws.iter().product());
                tconv2d_bwd_w(dy, xval, dw, xs, ws, *stride);
            }
            Op::MaxPool { x, argmax } => {
                let len = self.nodes[x.0].value.len();
                let dx = Self::buf(g, *x, len);
                for (o, &idx) in argmax.iter().enumerate() {
                    dx[idx] += dy[o];
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let d = *self.nodes[x.0].value.shape.last().unwrap();
                let rows = self.nodes[x.0].value.len() / d;
                let xval = &self.nodes[x.0].value.data;
                let gval = &self.nodes[gain.0].value.data;
                {
                    let dx = Self::buf(g, *x, rows * d);
                    for r in 0..rows {
                        let xr = &xval[r * d..(r + 1) * d];
                        let dyr = &dy[r * d..(r + 1) * d];
                        let (m, rs) = (mean[r], rstd[r]);
                        let mut sum_t = 0.0;
                        let mut sum_tx = 0.0;
                        for j in 0..d {
                            let t = dyr[j] * gval[j];
                            let xhat = (xr[j] - m) * rs;
                            sum_t += t;
                            sum_tx += t * xhat;
                        }
                        let mt = sum_t / d as f64;
                        let mtx = sum_tx / d as f64;
                        for j in 0..d {
                            let t = dyr[j] * gval[j];
                            let xhat = (xr[j] - m) * rs;
                            dx[r * d + j] += rs * (t - mt - xhat * mtx);
                        }
                    }
                }
                {
                    let dg = Self::buf(g, *gain, d);
                    for r in 0..rows {
                        let (m, rs) = (mean[r], rstd[r]);
                        for j in 0..d {
                            let xhat = (xval[r * d + j] - m) * rs;
                            dg[j] += dy[r * d + j] * xhat;
                        }
                    }
                }
                let db = Self::buf(g, *bias, d);
                for r in 0..rows {
                    for j in 0..d {
                        db[j] += dy[r * d + j];
                    }
                }
            }
            Op::Softmax(x) => {
                let yval = &node.value.data;
                let d = *node.value.shape.last().unwrap();
                let rows = yval.len() / d;
                let dx = Self::buf(g, *x, yval.len());
                for r in 0..rows {
                    let yr = &yval[r * d..(r + 1) * d];
                    let dyr = &dy[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(dyr).map(|(&y, &dv)| y * dv).sum();
                    for j in 0..d {
                        dx[r * d + j] += yr[j] * (dyr[j] - dot);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let dl = Self::buf(g, *logits, probs.len());
                for j in 0..probs.len() {
                    let ind = if j == *label { 1.0 } else { 0.0 };
                    dl[j] += dy[0] * (probs[j] - ind);
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = &node.value.shape;
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let row = out_shape[*axis] * inner;
                let mut col_off = 0usize;
                for &v in inputs {
                    let (ai, len) = {
                        let t = &self.nodes[v.0].value;
                        (t.shape[*axis], t.len())
                    };
                    let block = ai * inner;
                    let dv = Self::buf(g, v, len);
                    for o in 0..outer {
                        let src = &dy[o * row + col_off..o * row + col_off + block];
                        for (d, &s) in dv[o * block..(o + 1) * block].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    col_off += block;
                }
            }
            Op::SliceRows { x, start } => {
                let inner: usize = self.nodes[x.0].value.shape[1..].iter().product();
                let len = self.nodes[x.0].value.len();
                let dx = Self::buf(g, *x, len);
                for (d, &v) in dx[start * inner..start * inner + dy.len()]
                    .iter_mut()
                    .zip(dy)
                {
                    *d += v;
                }
            }
            Op::Gather { x, indices } => {
                let len = self.nodes[x.0].value.len();
                let dx = Self::buf(g, *x, len);
                for (o, &idx) in indices.iter().enumerate() {
                    dx[idx] += dy[o];
                }
            }
            Op::Reshape(x) => {
                let dx = Self::buf(g, *x, dy.len());
                for (d, &v) in dx.iter_mut().zip(dy) {
                    *d += v;
                }
            }
        }
    }
}

fn conv_out_dim(h: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = h + 2 * pad;
    if stride == 0 {
        return Err(Error::Dimension("conv: zero stride".into()));
    }
    if padded < k || (padded - k) % stride != 0 {
        return Err(Error::Dimension(alloc::format!(
            "conv: input {h} (pad {pad}) incompatible with kernel {k} stride {stride}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// x [Ci,H,W] cross-correlated with w [Co,Ci,k,k].
pub fn conv2d_fwd(
    x: &[f64],
    xs: [usize; 3],
    w: &[f64],
    ws: [usize; 4],
    stride: usize,
    pad: usize,
) -> Result<(Vec<f64>, [usize; 3])> {
    let [ci, h, wd] = xs;
    let [co, ci2, kh, kw] = ws;
    if ci != ci2 || kh != kw {
        return Err(Error::Dimension(alloc::format!(
            "conv: input channels {ci} vs kernel {ws:?}"
        )));
    }
    let k = kh;
    let ho = conv_out_dim(h, k, stride, pad)?;
    let wo = conv_out_dim(wd, k, stride, pad)?;
    let mut out = vec![0.0; co * ho * wo];
    for c_out in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for c_in in 0..ci {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let xi = (c_in * h + iy as usize) * wd + ix as usize;
                            let wi = ((c_out * ci + c_in) * k + ky) * k + kx;
                            acc += x[xi] * w[wi];
                        }
                    }
                }
                out[(c_out * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Ok((out, [co, ho, wo]))
}

/// dL/dx for conv2d. Direct accumulation loop; deliberately not routed
/// through the tconv2d forward so the two stay independent.
pub fn conv2d_bwd_x(
    dy: &[f64],
    w: &[f64],
    dx: &mut [f64],
    xs: [usize; 3],
    ws: [usize; 4],
    stride: usize,
    pad: usize,
) {
    let [ci, h, wd] = xs;
    let [co, _, k, _] = ws;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    for c_out in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let gy = dy[(c_out * ho + oy) * wo + ox];
                if gy == 0.0 {
                    continue;
                }
                for c_in in 0..ci {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let xi = (c_in * h + iy as usize) * wd + ix as usize;
                            let wi = ((c_out * ci + c_in) * k + ky) * k + kx;
                            dx[xi] += gy * w[wi];
                        }
                    }
                }
            }
        }
    }
}

/// dL/dw for conv2d.
pub fn conv2d_bwd_w(
    dy: &[f64],
    x: &[f64],
    dw: &mut [f64],
    xs: [usize; 3],
    ws: [usize; 4],
    stride: usize,
    pad: usize,
) {
    let [ci, h, wd] = xs;
    let [co, _, k, _] = ws;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    for c_out in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let gy = dy[(c_out * ho + oy) * wo + ox];
                if gy == 0.0 {
                    continue;
                }
                for c_in in 0..ci {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let xi = (c_in * h + iy as usize) * wd + ix as usize;
                            let wi = ((c_out * ci + c_in) * k + ky) * k + kx;
                            dw[wi] += gy * x[xi];
                        }
                    }
                }
            }
        }
    }
}

/// x [Ci,H,W] scattered through w [Ci,Co,k,k] to [Co,(H-1)s+k,(W-1)s+k].
pub fn tconv2d_fwd(
    x: &[f64],
    xs: [usize; 3],
    w: &[f64],
    ws: [usize; 4],
    stride: usize,
) -> Result<(Vec<f64>, [usize; 3])> {
    let [ci, h, wd] = xs;
    let [ci2, co, kh, kw] = ws;
    if ci != ci2 || kh != kw {
        return Err(Error::Dimension(alloc::format!(
            "tconv: input channels {ci} vs kernel {ws:?}"
        )));
    }
    if stride == 0 || h == 0 || wd == 0 {
        return Err(Error::Dimension("tconv: degenerate input".into()));
    }
    let k = kh;
    let ho = (h - 1) * stride + k;
    let wo = (wd - 1) * stride + k;
    let mut out = vec![0.0; co * ho * wo];
    for c_in in 0..ci {
        for iy in 0..h {
            for ix in 0..wd {
                let xv = x[(c_in * h + iy) * wd + ix];
                if xv == 0.0 {
                    continue;
                }
                for c_out in 0..co {
                    for ky in 0..k {
                        for kx in 0..k {
                            let oy = iy * stride + ky;
                            let ox = ix * stride + kx;
                            let wi = ((c_in * co + c_out) * k + ky) * k + kx;
                            out[(c_out * ho + oy) * wo + ox] += xv * w[wi];
                        }
                    }
                }
            }
        }
    }
    Ok((out, [co, ho, wo]))
}

pub fn tconv2d_bwd_x(
    dy: &[f64],
    w: &[f64],
    dx: &mut [f64],
    xs: [usize; 3],
    ws: [usize; 4],
    stride: usize,
) {
    let [ci, h, wd] = xs;
    let [_, co, k, _] = ws;
    let ho = (h - 1) * stride + k;
    let wo = (wd - 1) * stride + k;
    for c_in in 0..ci {
        for iy in 0..h {
            for ix in 0..wd {
                let mut acc = 0.0;
                for c_out in 0..co {
                    for ky in 0..k {
                        for kx in 0..k {
                            let oy = iy * stride + ky;
                            let ox = ix * stride + kx;
                            let wi = ((c_in * co + c_out) * k + ky) * k + kx;
                            acc += dy[(c_out * ho + oy) * wo + ox] * w[wi];
                        }
                    }
                }
                dx[(c_in * h + iy) * wd + ix] += acc;
            }
        }
    }
}

pub fn tconv2d_bwd_w(
    dy: &[f64],
    x: &[f64],
    dw: &mut [f64],
    xs: [usize; 3],
    ws: [usize; 4],
    stride: usize,
) {
    let [ci, h, wd] = xs;
    let [_, co, k, _] = ws;
    let ho = (h - 1) * stride + k;
    let wo = (wd - 1) * stride + k;
    for c_in in 0..ci {
        for iy in 0..h {
            for ix in 0..wd {
                let xv = x[(c_in * h + iy) * wd + ix];
                if xv == 0.0 {
                    continue;
                }
                for c_out in 0..co {
                    for ky in 0..k {
                        for kx in 0..k {
                            let oy = iy * stride + ky;
                            let ox = ix * stride + kx;
                            let wi = ((c_in * co + c_out) * k + ky) * k + kx;
                            dw[wi] += xv * dy[(c_out * ho + oy) * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn leaf2(g: &mut Graph, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        g.leaf(Tensor::new(&[rows, cols], data).unwrap())
    }

    #[test]
    fn conv_hand_case() {
        // 1x3x3 input, 1x1x2x2 kernel of ones, stride 1, no pad:
        // each output is the sum of a 2x2 window.
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::new(
                &[1, 3, 3],
                vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
            )
            .unwrap(),
        );
        let w = g.leaf(Tensor::new(&[1, 1, 2, 2], vec![1.0; 4]).unwrap());
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.value(y).shape, vec![1, 2, 2]);
        assert_eq!(g.value(y).data, vec![12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn conv_padding_keeps_size() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[2, 4, 4], 1.0));
        let w = g.leaf(Tensor::full(&[3, 2, 3, 3], 0.5));
        let y = g.conv2d(x, w, 1, 1).unwrap();
        assert_eq!(g.value(y).shape, vec![3, 4, 4]);
        // center output: full 3x3 window over 2 channels of ones * 0.5 = 9
        assert_eq!(g.value(y).data[(0 * 4 + 1) * 4 + 1], 9.0);
        // corner: 2x2 window visible
        assert_eq!(g.value(y).data[0], 4.0);
    }

    #[test]
    fn tconv_output_size() {
        // (2-1)*2 + 2 = 4
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 2, 2], 1.0));
        let w = g.leaf(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.tconv2d(x, w, 2).unwrap();
        assert_eq!(g.value(y).shape, vec![1, 4, 4]);
        // stride 2 with k=2 tiles without overlap: all ones
        assert!(g.value(y).data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn conv_tconv_adjoint_identity() {
        // <conv(x; w), y> == <x, tconv(y; w)> with the kernel passed unchanged
        let mut rng = crate::rng::Rng::seed_from_u64(42);
        for _ in 0..8 {
            let (ci, co, h, k, s) = (2, 3, 6, 3, 1);
            let x: Vec<f64> = (0..ci * h * h).map(|_| rng.normal()).collect();
            let w: Vec<f64> = (0..co * ci * k * k).map(|_| rng.normal()).collect();
            let (cx, os) = conv2d_fwd(&x, [ci, h, h], &w, [co, ci, k, k], s, 0).unwrap();
            let y: Vec<f64> = (0..cx.len()).map(|_| rng.normal()).collect();
            let (ty, ts) = tconv2d_fwd(&y, os, &w, [co, ci, k, k], s).unwrap();
            assert_eq!(ts, [ci, h, h]);
            let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&ty).map(|(a, b)| a * b).sum();
            assert!(
                (lhs - rhs).abs() <= 1e-8 * lhs.abs().max(1.0),
                "lhs={lhs} rhs={rhs}"
            );
        }
    }

    #[test]
    fn max_pool_first_index_tie_break() {
        let mut g = Graph::new();
        // all-equal window: gradient must land on the first element scanned
        let x = g.leaf(Tensor::full(&[1, 2, 2], 3.5));
        let y = g.max_pool(x, 2).unwrap();
        assert_eq!(g.value(y).data, vec![3.5]);
        let s = g.sum_all(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = leaf2(&mut g, 2, 3, vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]);
        let y = g.softmax(x).unwrap();
        let d = g.value(y);
        for r in 0..2 {
            let s: f64 = d.data[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut g = Graph::new();
        let a = leaf2(&mut g, 1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf2(&mut g, 1, 4, vec![1001.0, 1002.0, 1003.0, 1004.0]);
        let sa = g.softmax(a).unwrap();
        let sb = g.softmax(b).unwrap();
        for j in 0..4 {
            assert!((g.value(sa).data[j] - g.value(sb).data[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[5], vec![0.3; 5]).unwrap());
        let ce = g.cross_entropy(x, 2).unwrap();
        assert!((g.value(ce).data[0] - num::ln(5.0)).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_normalizes() {
        let mut g = Graph::new();
        let x = leaf2(&mut g, 1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let gain = g.leaf(Tensor::full(&[4], 1.0));
        let bias = g.leaf(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        let d = &g.value(y).data;
        let mean: f64 = d.iter().sum::<f64>() / 4.0;
        let var: f64 = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4); // eps pulls variance slightly under 1
    }

    #[test]
    fn concat_slice_round_trip() {
        let mut g = Graph::new();
        let a = leaf2(&mut g, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf2(&mut g, 1, 2, vec![5.0, 6.0]);
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.value(c).shape, vec![3, 2]);
        let back = g.slice_rows(c, 2, 1).unwrap();
        assert_eq!(g.value(back).data, vec![5.0, 6.0]);
    }

    #[test]
    fn concat_axis1() {
        let mut g = Graph::new();
        let a = leaf2(&mut g, 2, 1, vec![1.0, 3.0]);
        let b = leaf2(&mut g, 2, 2, vec![10.0, 11.0, 30.0, 31.0]);
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).shape, vec![2, 3]);
        assert_eq!(g.value(c).data, vec![1.0, 10.0, 11.0, 3.0, 30.0, 31.0]);
    }

    #[test]
    fn grads_accumulate_over_shared_input() {
        // y = x*x summed: dy/dx = 2x
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let y = g.mul(x, x).unwrap();
        let s = g.sum_all(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn matmul_grads_hand_case() {
        // f = sum(A @ B); dA = row sums of B broadcast, dB = col sums of A
        let mut g = Graph::new();
        let a = leaf2(&mut g, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf2(&mut g, 2, 2, vec![5.0, 6.0, 7.0, 8.0]);
        let c = g.matmul(a, b).unwrap();
        let s = g.sum_all(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.get(b).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn matmul_nt_matches_matmul_with_transpose() {
        let mut g = Graph::new();
        let a = leaf2(&mut g, 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = leaf2(&mut g, 2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5]);
        let bt = leaf2(&mut g, 3, 2, vec![0.5, 1.5, -1.0, 0.0, 2.0, -0.5]);
        let y1 = g.matmul_nt(a, b).unwrap();
        let y2 = g.matmul(a, bt).unwrap();
        assert_eq!(g.value(y1).data, g.value(y2).data);
    }

    #[test]
    fn gather_scatters_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[4], vec![10.0, 20.0, 30.0, 40.0]).unwrap());
        let y = g
            .gather(x, Arc::new(vec![2, 2, 0]), &[3])
            .unwrap();
        assert_eq!(g.value(y).data, vec![30.0, 30.0, 10.0]);
        let s = g.sum_all(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 0.0, 2.0, 0.0]);
    }
}
