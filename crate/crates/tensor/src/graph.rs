//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its variables. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and returns
//! the gradients of a scalar output with respect to every parameter read
//! through [`Graph::param`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result, TensorError};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{gemm, gemm_view, Tensor, View};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Softmax(Var),
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f32>,
    },
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f32>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SumRows(Var),
    Sum(Var),
}

struct Node {
    value: Value,
    op: Op,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    train: bool,
    rng: ChaCha8Rng,
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

impl<'a> Graph<'a> {
    /// `train` enables dropout; `seed` drives the dropout masks.
    pub fn new(store: &'a ParamStore, train: bool, seed: u64) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.value(*id),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient outside the graph.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.shape().len() != 2 {
            return Err(shape_err(
                op,
                format!("expected a matrix, got {:?}", t.shape()),
            ));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    /// `[n, k] x [k, m] -> [n, m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims("matmul", a)?;
        let (k2, m) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{n}, {k}] x [{k2}, {m}]")));
        }
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(
                "add",
                format!("{:?} + {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a length-`d` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let d = tx.cols();
        if tr.numel() != d {
            return Err(shape_err(
                "add_row",
                format!("{:?} + row {:?}", tx.shape(), tr.shape()),
            ));
        }
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_mut(d.max(1)) {
            for (o, r) in chunk.iter_mut().zip(tr.data()) {
                *o += r;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(x, row)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(
                "mul",
                format!("{:?} * {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * s).collect())
            .expect("same shape");
        self.push(out, Op::Scale(x, s))
    }

    /// Gathers rows of `table` (`[vocab, d]`) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.matrix_dims("embedding", table)?;
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::Index {
                    op: "embedding",
                    index: id,
                    size: vocab,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Row-wise layer normalization; `gamma` and `beta` hold `d` values each.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.numel() != d || tb.numel() != d {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    tx.shape(),
                    tg.shape(),
                    tb.shape()
                ),
            ));
        }
        let rows = tx.rows();
        let mut out = vec![0.0; tx.numel()];
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let c = v as f64 - mean;
                    c * c
                })
                .sum::<f64>()
                / d as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as f32;
            for c in 0..d {
                let h = ((row[c] as f64 - mean) * rs) as f32;
                xhat[r * d + c] = h;
                out[r * d + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            softmax_in_place(row);
        }
        let out = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(out, Op::Softmax(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Gelu(x))
    }

    /// Multi-head scaled dot-product attention over one sequence.
    ///
    /// `q`, `k`, `v` are `[T, d]` with heads laid out as contiguous column
    /// blocks of width `d / heads`. With `causal`, position `i` attends to
    /// positions `j <= i` only.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (t, d) = self.matrix_dims("attention", q)?;
        if self.value(k).shape() != [t, d] || self.value(v).shape() != [t, d] {
            return Err(shape_err(
                "attention",
                format!(
                    "q {:?}, k {:?}, v {:?}",
                    self.value(q).shape(),
                    self.value(k).shape(),
                    self.value(v).shape()
                ),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err(
                "attention",
                format!("width {d} not divisible by {heads} heads"),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (tq, tk, tv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; heads * t * t];
        let mut out = vec![0.0; t * d];
        for h in 0..heads {
            let p = &mut probs[h * t * t..(h + 1) * t * t];
            let block = View::col_block(d, h * dh);
            gemm_view(
                t,
                dh,
                t,
                scale,
                tq,
                block,
                tk,
                block.t(),
                0.0,
                p,
                View::dense(t),
            );
            for i in 0..t {
                let row = &mut p[i * t..(i + 1) * t];
                if causal {
                    row[i + 1..].iter_mut().for_each(|x| *x = f32::NEG_INFINITY);
                }
                softmax_in_place(row);
            }
            gemm_view(
                t,
                t,
                dh,
                1.0,
                p,
                View::dense(t),
                tv,
                block,
                0.0,
                &mut out,
                block,
            );
        }
        let out = Tensor::new(vec![t, d], out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    /// Inverted dropout; the identity outside training or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f32) -> Var {
        if !self.train || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let n = self.value(x).numel();
        let mask: Vec<f32> = (0..n)
            .map(|_| {
                if self.rng.random::<f32>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Dropout { x, mask })
    }

    /// Mean negative log-likelihood over rows with a target. Rows whose target
    /// is `None` contribute nothing; with no targets the loss is zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, c) = (t.rows(), t.cols());
        if targets.len() != rows {
            return Err(shape_err(
                "cross_entropy",
                format!("{rows} rows of logits, {} targets", targets.len()),
            ));
        }
        let mut probs = t.data().to_vec();
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, target) in targets.iter().enumerate() {
            let row = &mut probs[r * c..(r + 1) * c];
            softmax_in_place(row);
            if let Some(k) = *target {
                if k >= c {
                    return Err(TensorError::Index {
                        op: "cross_entropy",
                        index: k,
                        size: c,
                    });
                }
                // log-softmax from the logits directly for accuracy.
                let lr = t.row(r);
                let max = lr.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                let lse = lr.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
                total += lse - lr[k] as f64;
                count += 1;
            }
        }
        let loss = if count == 0 {
            0.0
        } else {
            total / count as f64
        };
        Ok(self.push(
            Tensor::scalar(loss as f32),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(TensorError::Index {
                    op: "select_rows",
                    index: r,
                    size: n,
                });
            }
            data.extend_from_slice(t.row(r));
        }
        let out = Tensor::new(vec![rows.len(), d], data)?;
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = match parts.first() {
            Some(&p) => self.value(p).cols(),
            None => return Err(shape_err("concat_rows", "no inputs")),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != d {
                return Err(shape_err(
                    "concat_rows",
                    format!("width {} vs {d}", t.cols()),
                ));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, d], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// `[n, d] -> [1, d]`
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = t.cols();
        let mut acc = vec![0.0f32; d];
        for r in 0..t.rows() {
            for (a, v) in acc.iter_mut().zip(t.row(r)) {
                *a += v;
            }
        }
        let out = Tensor::new(vec![1, d], acc).expect("shape");
        self.push(out, Op::SumRows(x))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v as f64).sum::<f64>();
        self.push(Tensor::scalar(s as f32), Op::Sum(x))
    }

    /// `x W + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Reverse pass from the scalar `output`. Consumes the graph.
    pub fn backward(self, output: Var) -> ParamGrads {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        let out_len = self.value(output).numel();
        grads[output.0] = Some(vec![1.0; out_len]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Value::Param(_) = self.nodes[i].value {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }

        let mut out = ParamGrads {
            grads: vec![None; self.store.len()],
        };
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Value::Param(id), Some(g)) = (&node.value, g) {
                match &mut out.grads[id.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                    slot => *slot = Some(g),
                }
            }
        }
        out
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let out = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let ga = grad_slot(grads, *a, n * k);
                gemm(n, m, k, g, false, tb.data(), true, ga, 1.0);
                let gb = grad_slot(grads, *b, k * m);
                gemm(k, n, m, ta.data(), true, g, false, gb, 1.0);
            }
            Op::Add(a, b) => {
                accumulate(grad_slot(grads, *a, g.len()), g);
                accumulate(grad_slot(grads, *b, g.len()), g);
            }
            Op::AddRow(x, row) => {
                accumulate(grad_slot(grads, *x, g.len()), g);
                let d = out.cols();
                let gr = grad_slot(grads, *row, d);
                for chunk in g.chunks(d.max(1)) {
                    accumulate(gr, chunk);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let ga = grad_slot(grads, *a, g.len());
                for ((o, gv), bv) in ga.iter_mut().zip(g).zip(tb) {
                    *o += gv * bv;
                }
                let gb = grad_slot(grads, *b, g.len());
                for ((o, gv), av) in gb.iter_mut().zip(g).zip(ta) {
                    *o += gv * av;
                }
            }
            Op::Scale(x, s) => {
                let gx = grad_slot(grads, *x, g.len());
                for (o, gv) in gx.iter_mut().zip(g) {
                    *o += gv * s;
                }
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let d = tt.cols();
                let gt = grad_slot(grads, *table, tt.numel());
                for (r, &id) in ids.iter().enumerate() {
                    accumulate(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = out.cols();
                let rows = out.rows();
                let tg = self.value(*gamma).data();
                {
                    let gg = grad_slot(grads, *gamma, d);
                    for r in 0..rows {
                        for c in 0..d {
                            gg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                {
                    let gb = grad_slot(grads, *beta, d);
                    for r in 0..rows {
                        accumulate(gb, &g[r * d..(r + 1) * d]);
                    }
                }
                let gx = grad_slot(grads, *x, rows * d);
                let mut dxhat = vec![0.0f32; d];
                for r in 0..rows {
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_dx = 0.0f64;
                    let mut mean_dx_xh = 0.0f64;
                    for c in 0..d {
                        dxhat[c] = g[r * d + c] * tg[c];
                        mean_dx += dxhat[c] as f64;
                        mean_dx_xh += (dxhat[c] * xh[c]) as f64;
                    }
                    mean_dx /= d as f64;
                    mean_dx_xh /= d as f64;
                    for c in 0..d {
                        let v = dxhat[c] as f64 - mean_dx - xh[c] as f64 * mean_dx_xh;
                        gx[r * d + c] += (v * rstd[r] as f64) as f32;
                    }
                }
            }
            Op::Softmax(x) => {
                let d = out.cols();
                let y = out.data();
                let gx = grad_slot(grads, *x, y.len());
                for r in 0..out.rows() {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..d {
                        gx[r * d + c] += yr[c] * (gr[c] - dot);
                    }
                }
            }
            Op::Gelu(x) => {
                let xs = self.value(*x).data();
                let gx = grad_slot(grads, *x, xs.len());
                for ((o, &v), gv) in gx.iter_mut().zip(xs).zip(g) {
                    let u = GELU_C * (v + GELU_A * v * v * v);
                    let th = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    *o += gv * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.backprop_attention(*q, *k, *v, *heads, probs, g, grads),
            Op::Dropout { x, mask } => {
                let gx = grad_slot(grads, *x, g.len());
                for ((o, gv), m) in gx.iter_mut().zip(g).zip(mask) {
                    *o += gv * m;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let count = targets.iter().filter(|t| t.is_some()).count();
                if count == 0 {
                    return;
                }
                let s = g[0] / count as f32;
                let gl = grad_slot(grads, *logits, probs.len());
                for (r, target) in targets.iter().enumerate() {
                    if let Some(k) = *target {
                        for j in 0..c {
                            let onehot = if j == k { 1.0 } else { 0.0 };
                            gl[r * c + j] += s * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                let tx = self.value(*x);
                let d = tx.cols();
                let gx = grad_slot(grads, *x, tx.numel());
                for (i, &r) in rows.iter().enumerate() {
                    accumulate(&mut gx[r * d..(r + 1) * d], &g[i * d..(i + 1) * d]);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    accumulate(grad_slot(grads, p, len), &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::SumRows(x) => {
                let tx = self.value(*x);
                let d = tx.cols();
                let gx = grad_slot(grads, *x, tx.numel());
                for chunk in gx.chunks_mut(d.max(1)) {
                    accumulate(chunk, g);
                }
            }
            Op::Sum(x) => {
                let len = self.value(*x).numel();
                grad_slot(grads, *x, len)
                    .iter_mut()
                    .for_each(|o| *o += g[0]);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f32],
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (t, d) = (tq.shape()[0], tq.shape()[1]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut gq = vec![0.0; t * d];
        let mut gk = vec![0.0; t * d];
        let mut gv = vec![0.0; t * d];
        let mut dp = vec![0.0; t * t];
        for h in 0..heads {
            let p = &probs[h * t * t..(h + 1) * t * t];
            let block = View::col_block(d, h * dh);
            let dense = View::dense(t);
            // dV = P^T dO
            gemm_view(t, t, dh, 1.0, p, dense.t(), g, block, 0.0, &mut gv, block);
            // dP = dO V^T
            gemm_view(
                t,
                dh,
                t,
                1.0,
                g,
                block,
                tv.data(),
                block.t(),
                0.0,
                &mut dp,
                dense,
            );
            // dS = P * (dP - rowsum(dP * P)), scaled by 1/sqrt(dh)
            for i in 0..t {
                let (pr, dr) = (&p[i * t..(i + 1) * t], &mut dp[i * t..(i + 1) * t]);
                let dot: f32 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for j in 0..t {
                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                }
            }
            // dQ = dS K, dK = dS^T Q
            gemm_view(
                t,
                t,
                dh,
                1.0,
                &dp,
                dense,
                tk.data(),
                block,
                0.0,
                &mut gq,
                block,
            );
            gemm_view(
                t,
                t,
                dh,
                1.0,
                &dp,
                dense.t(),
                tq.data(),
                block,
                0.0,
                &mut gk,
                block,
            );
        }
        accumulate(grad_slot(grads, q, t * d), &gq);
        accumulate(grad_slot(grads, k, t * d), &gk);
        accumulate(grad_slot(grads, v, t * d), &gv);
    }
}

fn grad_slot(grads: &mut [Option<Vec<f32>>], v: Var, len: usize) -> &mut [f32] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Numerically stable softmax; `-inf` entries get probability zero.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        return;
    }
    let mut sum = 0.0f64;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x as f64;
    }
    let inv = (1.0 / sum) as f32;
    row.iter_mut().for_each(|x| *x *= inv);
}
