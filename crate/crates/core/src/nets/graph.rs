//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! walks the record in reverse and returns exact gradients for every node that
//! depends on a parameter. Sequence operations (LSTM, attention, convolution
//! windows, pooling) are fused so a forward pass stays a few hundred nodes.

use std::rc::Rc;

use indexmap::IndexMap;

use crate::tensor::{gemm, Matrix};

/// Clamp applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Time-major layout of a sequence tensor: `steps * batch` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqGeom {
    pub steps: usize,
    pub batch: usize,
}

impl SeqGeom {
    #[inline]
    pub fn rows(&self) -> usize {
        self.steps * self.batch
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

/// One target distribution in a binary cross-entropy sum.
#[derive(Clone, Debug)]
pub struct BceTerm {
    pub targets: Vec<f64>,
    pub weight: f64,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    ConcatCols(Vec<usize>),
    Gather {
        table: usize,
        ids: Rc<Vec<u32>>,
    },
    Im2Col {
        x: usize,
        kernel: usize,
        dilation: usize,
        geom: SeqGeom,
    },
    Pool {
        x: usize,
        kind: PoolKind,
        kernel: usize,
        geom: SeqGeom,
        argmax: Vec<u32>,
    },
    Lstm {
        xw: usize,
        wh: usize,
        geom: SeqGeom,
        gates: Matrix,
        cells: Matrix,
        cell_tanh: Matrix,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        geom: SeqGeom,
        probs: Vec<f64>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    MaskedMean {
        x: usize,
        geom: SeqGeom,
        mask: Rc<Vec<f64>>,
    },
    SoftmaxRows(usize),
    ScaleByEntry {
        x: usize,
        s: usize,
        idx: usize,
    },
    StraightThrough {
        x: usize,
        p: usize,
        idx: usize,
        factor: f64,
    },
    DotConst {
        x: usize,
        w: Vec<f64>,
    },
    Bce {
        p: usize,
        terms: Vec<BceTerm>,
    },
}

#[derive(Default)]
pub struct Graph {
    values: Vec<Matrix>,
    ops: Vec<Op>,
    requires_grad: Vec<bool>,
    params: Vec<(String, usize)>,
}

/// Gradients of a scalar node with respect to every upstream node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    fn take(&mut self, idx: usize) -> Option<Matrix> {
        self.grads[idx].take()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.values[v.0]
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires_grad.push(requires_grad);
        Var(self.values.len() - 1)
    }

    fn rg(&self, idx: usize) -> bool {
        self.requires_grad[idx]
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf registered under `name`.
    pub fn param(&mut self, name: &str, value: &Matrix) -> Var {
        let v = self.push(value.clone(), Op::Leaf, true);
        self.params.push((name.to_string(), v.0));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.values[a.0].matmul(&self.values[b.0]);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(value, Op::MatMul(a.0, b.0), rg)
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let mut value = self.values[a.0].clone();
        let b = &self.values[bias.0];
        assert_eq!(b.rows(), 1, "bias must be a row vector");
        assert_eq!(b.cols(), value.cols(), "bias width mismatch");
        for r in 0..value.rows() {
            for (o, bv) in value.row_mut(r).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let rg = self.rg(a.0) || self.rg(bias.0);
        self.push(value, Op::AddBias(a.0, bias.0), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.values[a.0].clone();
        assert_eq!(
            value.shape(),
            self.values[b.0].shape(),
            "add shape mismatch"
        );
        value.add_assign(&self.values[b.0]);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(value, Op::Add(a.0, b.0), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.values[a.0].clone();
        assert_eq!(
            value.shape(),
            self.values[b.0].shape(),
            "mul shape mismatch"
        );
        for (x, y) in value.data_mut().iter_mut().zip(self.values[b.0].data()) {
            *x *= y;
        }
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(value, Op::Mul(a.0, b.0), rg)
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        let mut value = self.values[a.0].clone();
        value.scale_assign(alpha);
        let rg = self.rg(a.0);
        self.push(value, Op::Scale(a.0, alpha), rg)
    }

    /// `a + c` for a constant `c` of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Matrix) -> Var {
        let mut value = self.values[a.0].clone();
        value.add_assign(c);
        let rg = self.rg(a.0);
        self.push(value, Op::AddConst(a.0), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.values[a.0].map(sigmoid);
        let rg = self.rg(a.0);
        self.push(value, Op::Sigmoid(a.0), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.values[a.0].map(f64::tanh);
        let rg = self.rg(a.0);
        self.push(value, Op::Tanh(a.0), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.values[a.0].map(|x| x.max(0.0));
        let rg = self.rg(a.0);
        self.push(value, Op::Relu(a.0), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.values[parts[0].0].rows();
        let cols: usize = parts.iter().map(|p| self.values[p.0].cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let m = &self.values[p.0];
            assert_eq!(m.rows(), rows, "concat row mismatch");
            for r in 0..rows {
                value.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        self.push(
            value,
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
            rg,
        )
    }

    /// Embedding lookup. Id 0 is padding and yields a zero row.
    pub fn gather(&mut self, table: Var, ids: Rc<Vec<u32>>) -> Var {
        let t = &self.values[table.0];
        let mut value = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            if id != 0 {
                value.row_mut(r).copy_from_slice(t.row(id as usize));
            }
        }
        let rg = self.rg(table.0);
        self.push(
            value,
            Op::Gather {
                table: table.0,
                ids,
            },
            rg,
        )
    }

    /// Unfolds SAME-padded stride-1 windows: `[T*B, C] -> [T*B, k*C]`.
    pub fn im2col(&mut self, x: Var, kernel: usize, dilation: usize, geom: SeqGeom) -> Var {
        let xv = &self.values[x.0];
        let c = xv.cols();
        assert_eq!(xv.rows(), geom.rows(), "im2col geometry mismatch");
        let half = (kernel / 2) as isize;
        let mut value = Matrix::zeros(geom.rows(), kernel * c);
        for t in 0..geom.steps {
            for j in 0..kernel {
                let src = t as isize + (j as isize - half) * dilation as isize;
                if src < 0 || src >= geom.steps as isize {
                    continue;
                }
                let src = src as usize;
                for b in 0..geom.batch {
                    let dst_row = t * geom.batch + b;
                    let src_row = src * geom.batch + b;
                    value.row_mut(dst_row)[j * c..(j + 1) * c].copy_from_slice(xv.row(src_row));
                }
            }
        }
        let rg = self.rg(x.0);
        self.push(
            value,
            Op::Im2Col {
                x: x.0,
                kernel,
                dilation,
                geom,
            },
            rg,
        )
    }

    /// SAME-padded stride-1 pooling. Average pooling divides by the full
    /// kernel width (padding counts as zeros).
    pub fn pool(&mut self, x: Var, kind: PoolKind, kernel: usize, geom: SeqGeom) -> Var {
        let xv = &self.values[x.0];
        let c = xv.cols();
        let half = (kernel / 2) as isize;
        let mut value = Matrix::zeros(geom.rows(), c);
        let mut argmax = Vec::new();
        if kind == PoolKind::Max {
            argmax = vec![0u32; geom.rows() * c];
        }
        for t in 0..geom.steps {
            let lo = (t as isize - half).max(0) as usize;
            let hi = ((t as isize + half) as usize).min(geom.steps - 1);
            for b in 0..geom.batch {
                let dst = t * geom.batch + b;
                for ch in 0..c {
                    match kind {
                        PoolKind::Avg => {
                            let mut s = 0.0;
                            for src in lo..=hi {
                                s += xv.get(src * geom.batch + b, ch);
                            }
                            value.set(dst, ch, s / kernel as f64);
                        }
                        PoolKind::Max => {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_row = 0;
                            for src in lo..=hi {
                                let row = src * geom.batch + b;
                                let v = xv.get(row, ch);
                                if v > best {
                                    best = v;
                                    best_row = row;
                                }
                            }
                            value.set(dst, ch, best);
                            argmax[dst * c + ch] = best_row as u32;
                        }
                    }
                }
            }
        }
        let rg = self.rg(x.0);
        self.push(
            value,
            Op::Pool {
                x: x.0,
                kind,
                kernel,
                geom,
                argmax,
            },
            rg,
        )
    }

    /// Single LSTM layer over a time-major sequence.
    ///
    /// `xw` holds the input projections plus bias, `[T*B, 4H]`, laid out as
    /// gate blocks `[input | forget | output | candidate]`; `wh` is the
    /// `[H, 4H]` recurrent matrix. Returns all hidden states `[T*B, H]`.
    pub fn lstm(&mut self, xw: Var, wh: Var, geom: SeqGeom) -> Var {
        let xwv = &self.values[xw.0];
        let whv = &self.values[wh.0];
        let h4 = whv.cols();
        let hdim = whv.rows();
        assert_eq!(h4, 4 * hdim, "recurrent matrix must be [H, 4H]");
        assert_eq!(xwv.cols(), h4, "input projection width mismatch");
        assert_eq!(xwv.rows(), geom.rows(), "lstm geometry mismatch");
        let bsz = geom.batch;
        let mut gates = Matrix::zeros(geom.rows(), h4);
        let mut cells = Matrix::zeros(geom.rows(), hdim);
        let mut cell_tanh = Matrix::zeros(geom.rows(), hdim);
        let mut hidden = Matrix::zeros(geom.rows(), hdim);
        let mut h_prev = Matrix::zeros(bsz, hdim);
        let mut c_prev = Matrix::zeros(bsz, hdim);
        for t in 0..geom.steps {
            let mut pre = xwv.row_block(t * bsz, bsz);
            gemm(&h_prev, false, whv, false, &mut pre, 1.0);
            for b in 0..bsz {
                let row = t * bsz + b;
                let p = pre.row(b);
                for j in 0..hdim {
                    let i_g = sigmoid(p[j]);
                    let f_g = sigmoid(p[hdim + j]);
                    let o_g = sigmoid(p[2 * hdim + j]);
                    let g_g = p[3 * hdim + j].tanh();
                    let c = f_g * c_prev.get(b, j) + i_g * g_g;
                    let tc = c.tanh();
                    let g_row = gates.row_mut(row);
                    g_row[j] = i_g;
                    g_row[hdim + j] = f_g;
                    g_row[2 * hdim + j] = o_g;
                    g_row[3 * hdim + j] = g_g;
                    cells.set(row, j, c);
                    cell_tanh.set(row, j, tc);
                    hidden.set(row, j, o_g * tc);
                }
            }
            h_prev = hidden.row_block(t * bsz, bsz);
            c_prev = cells.row_block(t * bsz, bsz);
        }
        let rg = self.rg(xw.0) || self.rg(wh.0);
        self.push(
            hidden,
            Op::Lstm {
                xw: xw.0,
                wh: wh.0,
                geom,
                gates,
                cells,
                cell_tanh,
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product self-attention over projected
    /// queries/keys/values `[T*B, D]`. Keys at masked positions are ignored.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        geom: SeqGeom,
        mask: Rc<Vec<f64>>,
    ) -> Var {
        let (qv, kv, vv) = (&self.values[q.0], &self.values[k.0], &self.values[v.0]);
        let d = qv.cols();
        assert_eq!(d % heads, 0, "attention width not divisible by heads");
        assert_eq!(qv.rows(), geom.rows(), "attention geometry mismatch");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (steps, bsz) = (geom.steps, geom.batch);
        let mut probs = vec![0.0; bsz * heads * steps * steps];
        let mut out = Matrix::zeros(geom.rows(), d);
        let mut scores = vec![0.0; steps];
        for b in 0..bsz {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..steps {
                    let qi = &qv.row(i * bsz + b)[c0..c0 + dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        if mask[j * bsz + b] == 0.0 {
                            *s = f64::NEG_INFINITY;
                            continue;
                        }
                        let kj = &kv.row(j * bsz + b)[c0..c0 + dh];
                        let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                        *s = dot * scale;
                        max = max.max(*s);
                    }
                    let base = ((b * heads + h) * steps + i) * steps;
                    let mut total = 0.0;
                    for (j, s) in scores.iter().enumerate() {
                        let e = if s.is_finite() { (s - max).exp() } else { 0.0 };
                        probs[base + j] = e;
                        total += e;
                    }
                    let orow = i * bsz + b;
                    for j in 0..steps {
                        let a = probs[base + j] / total;
                        probs[base + j] = a;
                        if a == 0.0 {
                            continue;
                        }
                        let vj = &vv.row(j * bsz + b)[c0..c0 + dh];
                        let o = &mut out.row_mut(orow)[c0..c0 + dh];
                        for (oc, vc) in o.iter_mut().zip(vj) {
                            *oc += a * vc;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q.0) || self.rg(k.0) || self.rg(v.0);
        self.push(
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                geom,
                probs,
            },
            rg,
        )
    }

    /// Per-row layer normalization with affine `gamma`/`beta` (`[1, D]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = &self.values[x.0];
        let (rows, d) = xv.shape();
        let (g, be) = (&self.values[gamma.0], &self.values[beta.0]);
        let mut xhat = Matrix::zeros(rows, d);
        let mut out = Matrix::zeros(rows, d);
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..d {
                let xh = (row[c] - mean) * inv;
                xhat.set(r, c, xh);
                out.set(r, c, g.data()[c] * xh + be.data()[c]);
            }
        }
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Mean over unmasked time steps: `[T*B, D] -> [B, D]`.
    pub fn masked_mean(&mut self, x: Var, geom: SeqGeom, mask: Rc<Vec<f64>>) -> Var {
        let xv = &self.values[x.0];
        let d = xv.cols();
        let mut out = Matrix::zeros(geom.batch, d);
        for b in 0..geom.batch {
            let mut count = 0.0;
            for t in 0..geom.steps {
                let m = mask[t * geom.batch + b];
                if m == 0.0 {
                    continue;
                }
                count += m;
                let src = xv.row(t * geom.batch + b);
                for (o, s) in out.row_mut(b).iter_mut().zip(src) {
                    *o += m * s;
                }
            }
            assert!(count > 0.0, "sample {b} has no unmasked positions");
            for o in out.row_mut(b) {
                *o /= count;
            }
        }
        let rg = self.rg(x.0);
        self.push(out, Op::MaskedMean { x: x.0, geom, mask }, rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = &self.values[x.0];
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let rg = self.rg(x.0);
        self.push(out, Op::SoftmaxRows(x.0), rg)
    }

    /// `x * s[idx]` where `s` is a node (gradient flows to both).
    pub fn scale_by_entry(&mut self, x: Var, s: Var, idx: usize) -> Var {
        let factor = self.values[s.0].data()[idx];
        let mut out = self.values[x.0].clone();
        out.scale_assign(factor);
        let rg = self.rg(x.0) || self.rg(s.0);
        self.push(
            out,
            Op::ScaleByEntry {
                x: x.0,
                s: s.0,
                idx,
            },
            rg,
        )
    }

    /// Straight-through scaling `(1 - detach(p[idx]) + p[idx]) * x`.
    ///
    /// The forward value equals `x` up to rounding of the unit factor; the
    /// gradient reaches `p[idx]` as if the output were `p[idx] * x`.
    pub fn straight_through(&mut self, x: Var, p: Var, idx: usize) -> Var {
        let pv = self.values[p.0].data()[idx];
        self.straight_through_with(x, p, idx, pv)
    }

    /// `(1 - detached + p[idx]) * x` with `detached` held constant; equals
    /// [`Graph::straight_through`] when `detached == p[idx]`.
    pub fn straight_through_with(&mut self, x: Var, p: Var, idx: usize, detached: f64) -> Var {
        let pv = self.values[p.0].data()[idx];
        let factor = (1.0 - detached) + pv;
        let mut out = self.values[x.0].clone();
        out.scale_assign(factor);
        let rg = self.rg(x.0) || self.rg(p.0);
        self.push(
            out,
            Op::StraightThrough {
                x: x.0,
                p: p.0,
                idx,
                factor,
            },
            rg,
        )
    }

    /// Scalar `sum(x .* w)` for a constant `w`.
    pub fn dot_const(&mut self, x: Var, w: Vec<f64>) -> Var {
        let xv = &self.values[x.0];
        assert_eq!(xv.len(), w.len(), "dot_const length mismatch");
        let value: f64 = xv.data().iter().zip(&w).map(|(a, b)| a * b).sum();
        let rg = self.rg(x.0);
        self.push(Matrix::scalar(value), Op::DotConst { x: x.0, w }, rg)
    }

    /// `sum_k weight_k * mean_i bce(p_i, target_ki)` with `p` clamped to
    /// `[PROB_EPS, 1 - PROB_EPS]`. `p` is a `[n, 1]` column of probabilities.
    pub fn bce(&mut self, p: Var, terms: Vec<BceTerm>) -> Var {
        let pv = self.values[p.0].data();
        let mut total = 0.0;
        for term in &terms {
            assert_eq!(term.targets.len(), pv.len(), "bce target length mismatch");
            total += term.weight * super::loss::binary_cross_entropy(pv, &term.targets);
        }
        let rg = self.rg(p.0);
        self.push(Matrix::scalar(total), Op::Bce { p: p.0, terms }, rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.values[root.0].len(), 1, "backward root must be scalar");
        let n = root.0 + 1;
        let mut g = Gradients {
            grads: (0..self.values.len()).map(|_| None).collect(),
        };
        g.grads[root.0] = Some(Matrix::scalar(1.0));
        for idx in (0..n).rev() {
            if !self.requires_grad[idx] {
                continue;
            }
            let Some(dy) = g.take(idx) else { continue };
            self.backward_op(idx, &dy, &mut g);
            g.grads[idx] = Some(dy);
        }
        g
    }

    /// Gradients of registered parameters, by name. Parameters that the
    /// root does not depend on are omitted.
    pub fn param_grads(&self, grads: &Gradients) -> IndexMap<String, Matrix> {
        let mut out: IndexMap<String, Matrix> = IndexMap::new();
        for (name, idx) in &self.params {
            if let Some(gm) = &grads.grads[*idx] {
                match out.get_mut(name) {
                    Some(acc) => acc.add_assign(gm),
                    None => {
                        out.insert(name.clone(), gm.clone());
                    }
                }
            }
        }
        out
    }

    fn accumulate(&self, g: &mut Gradients, idx: usize, delta: Matrix) {
        if !self.requires_grad[idx] {
            return;
        }
        match &mut g.grads[idx] {
            Some(acc) => acc.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn zeros_like(&self, idx: usize) -> Matrix {
        let (r, c) = self.values[idx].shape();
        Matrix::zeros(r, c)
    }

    fn backward_op(&self, idx: usize, dy: &Matrix, g: &mut Gradients) {
        let y = &self.values[idx];
        match &self.ops[idx] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.values[*a], &self.values[*b]);
                if self.rg(*a) {
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    gemm(dy, false, bv, true, &mut da, 0.0);
                    self.accumulate(g, *a, da);
                }
                if self.rg(*b) {
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    gemm(av, true, dy, false, &mut db, 0.0);
                    self.accumulate(g, *b, db);
                }
            }
            Op::AddBias(a, b) => {
                if self.rg(*b) {
                    self.accumulate(g, *b, dy.col_sums());
                }
                self.accumulate(g, *a, dy.clone());
            }
            Op::Add(a, b) => {
                self.accumulate(g, *a, dy.clone());
                self.accumulate(g, *b, dy.clone());
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let mut da = dy.clone();
                    for (d, v) in da.data_mut().iter_mut().zip(self.values[*b].data()) {
                        *d *= v;
                    }
                    self.accumulate(g, *a, da);
                }
                if self.rg(*b) {
                    let mut db = dy.clone();
                    for (d, v) in db.data_mut().iter_mut().zip(self.values[*a].data()) {
                        *d *= v;
                    }
                    self.accumulate(g, *b, db);
                }
            }
            Op::Scale(a, alpha) => {
                let mut da = dy.clone();
                da.scale_assign(*alpha);
                self.accumulate(g, *a, da);
            }
            Op::AddConst(a) => self.accumulate(g, *a, dy.clone()),
            Op::Sigmoid(a) => {
                let mut da = dy.clone();
                for (d, s) in da.data_mut().iter_mut().zip(y.data()) {
                    *d *= s * (1.0 - s);
                }
                self.accumulate(g, *a, da);
            }
            Op::Tanh(a) => {
                let mut da = dy.clone();
                for (d, t) in da.data_mut().iter_mut().zip(y.data()) {
                    *d *= 1.0 - t * t;
                }
                self.accumulate(g, *a, da);
            }
            Op::Relu(a) => {
                let mut da = dy.clone();
                for (d, v) in da.data_mut().iter_mut().zip(y.data()) {
                    if *v <= 0.0 {
                        *d = 0.0;
                    }
                }
                self.accumulate(g, *a, da);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.values[p].cols();
                    if self.rg(p) {
                        let mut dp = Matrix::zeros(dy.rows(), w);
                        for r in 0..dy.rows() {
                            dp.row_mut(r)
                                .copy_from_slice(&dy.row(r)[offset..offset + w]);
                        }
                        self.accumulate(g, p, dp);
                    }
                    offset += w;
                }
            }
            Op::Gather { table, ids } => {
                let mut dt = self.zeros_like(*table);
                for (r, &id) in ids.iter().enumerate() {
                    if id == 0 {
                        continue;
                    }
                    for (o, d) in dt.row_mut(id as usize).iter_mut().zip(dy.row(r)) {
                        *o += d;
                    }
                }
                self.accumulate(g, *table, dt);
            }
            Op::Im2Col {
                x,
                kernel,
                dilation,
                geom,
            } => {
                let mut dx = self.zeros_like(*x);
                let c = dx.cols();
                let half = (*kernel / 2) as isize;
                for t in 0..geom.steps {
                    for j in 0..*kernel {
                        let src = t as isize + (j as isize - half) * *dilation as isize;
                        if src < 0 || src >= geom.steps as isize {
                            continue;
                        }
                        let src = src as usize;
                        for b in 0..geom.batch {
                            let grad = &dy.row(t * geom.batch + b)[j * c..(j + 1) * c];
                            for (o, d) in dx.row_mut(src * geom.batch + b).iter_mut().zip(grad) {
                                *o += d;
                            }
                        }
                    }
                }
                self.accumulate(g, *x, dx);
            }
            Op::Pool {
                x,
                kind,
                kernel,
                geom,
                argmax,
            } => {
                let mut dx = self.zeros_like(*x);
                let c = dx.cols();
                match kind {
                    PoolKind::Max => {
                        for row in 0..geom.rows() {
                            for ch in 0..c {
                                let src = argmax[row * c + ch] as usize;
                                let v = dx.get(src, ch) + dy.get(row, ch);
                                dx.set(src, ch, v);
                            }
                        }
                    }
                    PoolKind::Avg => {
                        let half = (*kernel / 2) as isize;
                        let inv = 1.0 / *kernel as f64;
                        for t in 0..geom.steps {
                            let lo = (t as isize - half).max(0) as usize;
                            let hi = ((t as isize + half) as usize).min(geom.steps - 1);
                            for b in 0..geom.batch {
                                let grad = dy.row(t * geom.batch + b).to_vec();
                                for src in lo..=hi {
                                    for (o, d) in
                                        dx.row_mut(src * geom.batch + b).iter_mut().zip(&grad)
                                    {
                                        *o += d * inv;
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(g, *x, dx);
            }
            Op::Lstm {
                xw,
                wh,
                geom,
                gates,
                cells,
                cell_tanh,
            } => self.lstm_backward(*xw, *wh, *geom, gates, cells, cell_tanh, y, dy, g),
            Op::Attention {
                q,
                k,
                v,
                heads,
                geom,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, *geom, probs, dy, g),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, d) = xhat.shape();
                let gv = &self.values[*gamma];
                if self.rg(*gamma) {
                    let mut dg = Matrix::zeros(1, d);
                    for r in 0..rows {
                        for c in 0..d {
                            dg.data_mut()[c] += dy.get(r, c) * xhat.get(r, c);
                        }
                    }
                    self.accumulate(g, *gamma, dg);
                }
                if self.rg(*beta) {
                    self.accumulate(g, *beta, dy.col_sums());
                }
                if self.rg(*x) {
                    let mut dx = Matrix::zeros(rows, d);
                    let df = d as f64;
                    for r in 0..rows {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..d {
                            let dxh = dy.get(r, c) * gv.data()[c];
                            sum_d += dxh;
                            sum_dx += dxh * xhat.get(r, c);
                        }
                        for c in 0..d {
                            let dxh = dy.get(r, c) * gv.data()[c];
                            let v = inv_std[r] / df * (df * dxh - sum_d - xhat.get(r, c) * sum_dx);
                            dx.set(r, c, v);
                        }
                    }
                    self.accumulate(g, *x, dx);
                }
            }
            Op::MaskedMean { x, geom, mask } => {
                let mut dx = self.zeros_like(*x);
                for b in 0..geom.batch {
                    let count: f64 = (0..geom.steps).map(|t| mask[t * geom.batch + b]).sum();
                    for t in 0..geom.steps {
                        let m = mask[t * geom.batch + b];
                        if m == 0.0 {
                            continue;
                        }
                        let w = m / count;
                        for (o, d) in dx.row_mut(t * geom.batch + b).iter_mut().zip(dy.row(b)) {
                            *o = w * d;
                        }
                    }
                }
                self.accumulate(g, *x, dx);
            }
            Op::SoftmaxRows(x) => {
                let mut dx = dy.clone();
                for r in 0..dx.rows() {
                    let yr = y.row(r);
                    let dot: f64 = dy.row(r).iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (d, yv) in dx.row_mut(r).iter_mut().zip(yr) {
                        *d = yv * (*d - dot);
                    }
                }
                self.accumulate(g, *x, dx);
            }
            Op::ScaleByEntry { x, s, idx: i } => {
                let xv = &self.values[*x];
                let factor = self.values[*s].data()[*i];
                if self.rg(*s) {
                    let mut ds = self.zeros_like(*s);
                    ds.data_mut()[*i] = dy.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                    self.accumulate(g, *s, ds);
                }
                if self.rg(*x) {
                    let mut dx = dy.clone();
                    dx.scale_assign(factor);
                    self.accumulate(g, *x, dx);
                }
            }
            Op::StraightThrough {
                x,
                p,
                idx: i,
                factor,
            } => {
                let xv = &self.values[*x];
                if self.rg(*p) {
                    let mut dp = self.zeros_like(*p);
                    dp.data_mut()[*i] = dy.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                    self.accumulate(g, *p, dp);
                }
                if self.rg(*x) {
                    let mut dx = dy.clone();
                    dx.scale_assign(*factor);
                    self.accumulate(g, *x, dx);
                }
            }
            Op::DotConst { x, w } => {
                let s = dy.scalar_value();
                let (r, c) = self.values[*x].shape();
                let dx = Matrix::from_vec(r, c, w.iter().map(|v| v * s).collect());
                self.accumulate(g, *x, dx);
            }
            Op::Bce { p, terms } => {
                let pv = &self.values[*p];
                let n = pv.len() as f64;
                let s = dy.scalar_value();
                let mut dp = self.zeros_like(*p);
                for (i, d) in dp.data_mut().iter_mut().enumerate() {
                    let pr = pv.data()[i];
                    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&pr) {
                        continue;
                    }
                    let denom = pr * (1.0 - pr);
                    for term in terms {
                        *d += s * term.weight * (pr - term.targets[i]) / (denom * n);
                    }
                }
                self.accumulate(g, *p, dp);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn lstm_backward(
        &self,
        xw: usize,
        wh: usize,
        geom: SeqGeom,
        gates: &Matrix,
        cells: &Matrix,
        cell_tanh: &Matrix,
        hidden: &Matrix,
        dy: &Matrix,
        g: &mut Gradients,
    ) {
        let whv = &self.values[wh];
        let hdim = whv.rows();
        let bsz = geom.batch;
        let mut dxw = Matrix::zeros(geom.rows(), 4 * hdim);
        let mut dwh = Matrix::zeros(hdim, 4 * hdim);
        let mut dh_next = Matrix::zeros(bsz, hdim);
        let mut dc_next = Matrix::zeros(bsz, hdim);
        for t in (0..geom.steps).rev() {
            let mut dpre = Matrix::zeros(bsz, 4 * hdim);
            for b in 0..bsz {
                let row = t * bsz + b;
                let gr = gates.row(row);
                for j in 0..hdim {
                    let (i_g, f_g, o_g, g_g) =
                        (gr[j], gr[hdim + j], gr[2 * hdim + j], gr[3 * hdim + j]);
                    let tc = cell_tanh.get(row, j);
                    let dh = dy.get(row, j) + dh_next.get(b, j);
                    let d_o = dh * tc;
                    let dc = dh * o_g * (1.0 - tc * tc) + dc_next.get(b, j);
                    let c_prev = if t > 0 { cells.get(row - bsz, j) } else { 0.0 };
                    let d_i = dc * g_g;
                    let d_g = dc * i_g;
                    let d_f = dc * c_prev;
                    dc_next.set(b, j, dc * f_g);
                    let pr = dpre.row_mut(b);
                    pr[j] = d_i * i_g * (1.0 - i_g);
                    pr[hdim + j] = d_f * f_g * (1.0 - f_g);
                    pr[2 * hdim + j] = d_o * o_g * (1.0 - o_g);
                    pr[3 * hdim + j] = d_g * (1.0 - g_g * g_g);
                }
            }
            if t > 0 {
                let h_prev = hidden.row_block((t - 1) * bsz, bsz);
                gemm(&h_prev, true, &dpre, false, &mut dwh, 1.0);
            }
            gemm(&dpre, false, whv, true, &mut dh_next, 0.0);
            dxw.data_mut()[t * bsz * 4 * hdim..(t + 1) * bsz * 4 * hdim]
                .copy_from_slice(dpre.data());
        }
        self.accumulate(g, xw, dxw);
        self.accumulate(g, wh, dwh);
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        geom: SeqGeom,
        probs: &[f64],
        dy: &Matrix,
        g: &mut Gradients,
    ) {
        let (qv, kv, vv) = (&self.values[q], &self.values[k], &self.values[v]);
        let d = qv.cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (steps, bsz) = (geom.steps, geom.batch);
        let mut dq = Matrix::zeros(geom.rows(), d);
        let mut dk = Matrix::zeros(geom.rows(), d);
        let mut dv = Matrix::zeros(geom.rows(), d);
        let mut da = vec![0.0; steps];
        for b in 0..bsz {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..steps {
                    let base = ((b * heads + h) * steps + i) * steps;
                    let a = &probs[base..base + steps];
                    let doi = &dy.row(i * bsz + b)[c0..c0 + dh];
                    let mut weighted = 0.0;
                    for j in 0..steps {
                        if a[j] == 0.0 {
                            da[j] = 0.0;
                            continue;
                        }
                        let vj = &vv.row(j * bsz + b)[c0..c0 + dh];
                        da[j] = doi.iter().zip(vj).map(|(x, y)| x * y).sum();
                        weighted += a[j] * da[j];
                        let dvj = &mut dv.row_mut(j * bsz + b)[c0..c0 + dh];
                        for (o, x) in dvj.iter_mut().zip(doi) {
                            *o += a[j] * x;
                        }
                    }
                    let qi = qv.row(i * bsz + b)[c0..c0 + dh].to_vec();
                    for j in 0..steps {
                        if a[j] == 0.0 {
                            continue;
                        }
                        let ds = a[j] * (da[j] - weighted) * scale;
                        let kj = &kv.row(j * bsz + b)[c0..c0 + dh];
                        let dqi = &mut dq.row_mut(i * bsz + b)[c0..c0 + dh];
                        for (o, x) in dqi.iter_mut().zip(kj) {
                            *o += ds * x;
                        }
                        let dkj = &mut dk.row_mut(j * bsz + b)[c0..c0 + dh];
                        for (o, x) in dkj.iter_mut().zip(&qi) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        self.accumulate(g, q, dq);
        self.accumulate(g, k, dk);
        self.accumulate(g, v, dv);
    }
}
