//! Minimal reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A [`Graph`] records every operation applied to its nodes. Calling
//! [`Graph::backward`] on a `1 x 1` node walks the record in reverse and
//! returns gradients for every node that (transitively) depends on a leaf
//! created with `requires_grad = true`.
//!
//! The op set is small and mostly fused (layer norm, multi-head attention,
//! softmax cross-entropy) since every model in this crate is built from the
//! same handful of pieces.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-8;
const LOG_FLOOR: f64 = 1e-7;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulTransB(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<T>,
        inv_std: Vec<T>,
    },
    Attention {
        qkv: Var,
        seq: usize,
        heads: usize,
        probs: Vec<Array2<T>>,
    },
    GroupMax {
        x: Var,
        argmax: Array2<usize>,
    },
    PrependCls {
        tokens: Var,
        cls: Var,
        per_sample: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    FillRows {
        x: Var,
        fill: Var,
        rows: Vec<bool>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Array2<T>,
    },
    CosineDistance {
        x: Var,
        target: Array2<T>,
        weights: Vec<T>,
    },
    NegativeLabel {
        logits: Var,
        low: Array2<bool>,
        weights: Vec<T>,
        probs: Array2<T>,
    },
    Chamfer {
        pred: Var,
        target: Array2<T>,
        points: usize,
        weight: T,
        pred_nn: Vec<usize>,
        target_nn: Vec<usize>,
    },
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of recorded tensor operations.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Array2<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Array2<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

pub fn softmax_rows<T: Scalar>(logits: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn log_sum_exp<T: Scalar>(row: ndarray::ArrayView1<'_, T>) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let k = T::c((2.0 / std::f64::consts::PI).sqrt());
    let u = k * (x + T::c(0.044715) * x * x * x);
    T::c(0.5) * x * (T::one() + u.tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::c((2.0 / std::f64::consts::PI).sqrt());
    let a = T::c(0.044715);
    let u = k * (x + a * x * x * x);
    let t = u.tanh();
    T::c(0.5) * (T::one() + t)
        + T::c(0.5) * x * (T::one() - t * t) * k * (T::one() + T::c(3.0) * a * x * x)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Array2<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, var: Var) -> T {
        self.nodes[var.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulTransB(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a) * factor;
        self.push(value, Op::Scale(a, factor), &[a])
    }

    /// `x · w + b`
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let h = self.matmul(x, weight);
        self.add_row(h, bias)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let input = self.value(x);
        let (rows, dim) = input.dim();
        let eps = T::c(LAYER_NORM_EPS);
        let n = T::from_usize(dim).unwrap();
        let mut xhat = Array2::zeros((rows, dim));
        let mut inv_std = Vec::with_capacity(rows);
        for (row, mut out) in input.rows().into_iter().zip(xhat.rows_mut()) {
            let mean = row.sum() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            Zip::from(&mut out).and(&row).for_each(|o, &v| *o = (v - mean) * inv);
            inv_std.push(inv);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Multi-head self-attention over a packed `[q | k | v]` projection.
    ///
    /// `qkv` holds `batch * seq` rows of width `3 * dim`; attention is applied
    /// independently to each consecutive block of `seq` rows.
    pub fn attention(&mut self, qkv: Var, seq: usize, heads: usize) -> Var {
        let input = self.value(qkv);
        let (rows, width) = input.dim();
        assert_eq!(width % 3, 0, "qkv width must be 3 * dim");
        assert_eq!(rows % seq, 0, "rows must be a multiple of seq");
        let dim = width / 3;
        assert_eq!(dim % heads, 0, "dim must be divisible by heads");
        let head_dim = dim / heads;
        let scale = T::one() / T::from_usize(head_dim).unwrap().sqrt();
        let mut out = Array2::zeros((rows, dim));
        let mut probs = Vec::with_capacity(rows / seq * heads);
        for b in 0..rows / seq {
            let r0 = b * seq;
            let r1 = r0 + seq;
            for h in 0..heads {
                let c0 = h * head_dim;
                let c1 = c0 + head_dim;
                let q = input.slice(s![r0..r1, c0..c1]);
                let k = input.slice(s![r0..r1, dim + c0..dim + c1]);
                let v = input.slice(s![r0..r1, 2 * dim + c0..2 * dim + c1]);
                let scores = q.dot(&k.t()) * scale;
                let p = softmax_rows(scores.view());
                out.slice_mut(s![r0..r1, c0..c1]).assign(&p.dot(&v));
                probs.push(p);
            }
        }
        self.push(out, Op::Attention { qkv, seq, heads, probs }, &[qkv])
    }

    /// Column-wise max over consecutive groups of `group` rows.
    pub fn group_max(&mut self, x: Var, group: usize) -> Var {
        let input = self.value(x);
        let (rows, cols) = input.dim();
        assert_eq!(rows % group, 0, "rows must be a multiple of group");
        let groups = rows / group;
        let mut out = Array2::zeros((groups, cols));
        let mut argmax = Array2::zeros((groups, cols));
        for g in 0..groups {
            for c in 0..cols {
                let mut best = g * group;
                let mut best_v = input[[best, c]];
                for r in g * group + 1..(g + 1) * group {
                    let v = input[[r, c]];
                    if v > best_v {
                        best = r;
                        best_v = v;
                    }
                }
                out[[g, c]] = best_v;
                argmax[[g, c]] = best;
            }
        }
        self.push(out, Op::GroupMax { x, argmax }, &[x])
    }

    /// Interleaves a shared `1 x d` class token in front of every block of
    /// `per_sample` token rows.
    pub fn prepend_cls(&mut self, tokens: Var, cls: Var, per_sample: usize) -> Var {
        let t = self.value(tokens);
        let c = self.value(cls);
        let (rows, dim) = t.dim();
        assert_eq!(rows % per_sample, 0);
        let batch = rows / per_sample;
        let seq = per_sample + 1;
        let mut out = Array2::zeros((batch * seq, dim));
        for b in 0..batch {
            out.row_mut(b * seq).assign(&c.row(0));
            out.slice_mut(s![b * seq + 1..(b + 1) * seq, ..])
                .assign(&t.slice(s![b * per_sample..(b + 1) * per_sample, ..]));
        }
        self.push(
            out,
            Op::PrependCls {
                tokens,
                cls,
                per_sample,
            },
            &[tokens, cls],
        )
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let value = self.value(x).select(Axis(0), &rows);
        self.push(value, Op::GatherRows { x, rows }, &[x])
    }

    /// Replaces the rows flagged in `rows` with the `1 x d` row `fill`.
    pub fn fill_rows(&mut self, x: Var, fill: Var, rows: Vec<bool>) -> Var {
        let mut value = self.value(x).clone();
        assert_eq!(rows.len(), value.nrows());
        let f = self.value(fill).row(0).to_owned();
        for (r, &flag) in rows.iter().enumerate() {
            if flag {
                value.row_mut(r).assign(&f);
            }
        }
        self.push(value, Op::FillRows { x, fill, rows }, &[x, fill])
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let eps = T::c(NORM_EPS);
        let mut norms = Vec::with_capacity(value.nrows());
        for mut row in value.rows_mut() {
            let n = row.dot(&row).sqrt().max(eps);
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        self.push(value, Op::NormalizeRows { x, norms }, &[x])
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[target_i])` as a `1 x 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>, weights: Vec<T>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.nrows(), targets.len());
        assert_eq!(z.nrows(), weights.len());
        let mut total = T::zero();
        for ((row, &t), &w) in z.rows().into_iter().zip(&targets).zip(&weights) {
            if w != T::zero() {
                total += w * (log_sum_exp(row) - row[t]);
            }
        }
        let probs = softmax_rows(z.view());
        self.push(
            Array2::from_elem((1, 1), total),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            },
            &[logits],
        )
    }

    /// `Σ_i w_i · (1 − cos(x_i, target_i))` with `target` held constant.
    pub fn cosine_distance(&mut self, x: Var, target: Array2<T>, weights: Vec<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.dim(), target.dim());
        let mut total = T::zero();
        for ((a, b), &w) in xv.rows().into_iter().zip(target.rows()).zip(&weights) {
            let denom = (a.dot(&a).sqrt() * b.dot(&b).sqrt()).max(T::c(NORM_EPS));
            total += w * (T::one() - a.dot(&b) / denom);
        }
        self.push(
            Array2::from_elem((1, 1), total),
            Op::CosineDistance { x, target, weights },
            &[x],
        )
    }

    /// Negative-label cross-entropy `Σ_i w_i Σ_{c ∈ low_i} −log(1 − p_ic)`.
    pub fn negative_label(&mut self, logits: Var, low: Array2<bool>, weights: Vec<T>) -> Var {
        let probs = softmax_rows(self.value(logits).view());
        assert_eq!(probs.dim(), low.dim());
        let floor = T::c(LOG_FLOOR);
        let mut total = T::zero();
        for ((p, l), &w) in probs.rows().into_iter().zip(low.rows()).zip(&weights) {
            let mut term = T::zero();
            for (&pc, &is_low) in p.iter().zip(l.iter()) {
                if is_low {
                    term -= (T::one() - pc).max(floor).ln();
                }
            }
            total += w * term;
        }
        self.push(
            Array2::from_elem((1, 1), total),
            Op::NegativeLabel {
                logits,
                low,
                weights,
                probs,
            },
            &[logits],
        )
    }

    /// Symmetric Chamfer distance between predicted and target point groups.
    ///
    /// Each row of `pred`/`target` packs `points` xyz triples. The result is
    /// `weight · Σ_groups [mean_p min_q ‖p−q‖² + mean_q min_p ‖p−q‖²]`.
    pub fn chamfer(&mut self, pred: Var, target: Array2<T>, points: usize, weight: T) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.dim(), target.dim());
        assert_eq!(pv.ncols(), points * 3);
        let groups = pv.nrows();
        let inv_k = T::one() / T::from_usize(points).unwrap();
        let mut pred_nn = Vec::with_capacity(groups * points);
        let mut target_nn = Vec::with_capacity(groups * points);
        let mut total = T::zero();
        for g in 0..groups {
            let p = pv.row(g);
            let q = target.row(g);
            let d2 = |i: usize, j: usize| {
                let dx = p[3 * i] - q[3 * j];
                let dy = p[3 * i + 1] - q[3 * j + 1];
                let dz = p[3 * i + 2] - q[3 * j + 2];
                dx * dx + dy * dy + dz * dz
            };
            for i in 0..points {
                let (best, dist) = (0..points)
                    .map(|j| (j, d2(i, j)))
                    .fold((0, T::infinity()), |acc, c| if c.1 < acc.1 { c } else { acc });
                pred_nn.push(best);
                total += weight * inv_k * dist;
            }
            for j in 0..points {
                let (best, dist) = (0..points)
                    .map(|i| (i, d2(i, j)))
                    .fold((0, T::infinity()), |acc, c| if c.1 < acc.1 { c } else { acc });
                target_nn.push(best);
                total += weight * inv_k * dist;
            }
        }
        self.push(
            Array2::from_elem((1, 1), total),
            Op::Chamfer {
                pred,
                target,
                points,
                weight,
                pred_nn,
                target_nn,
            },
            &[pred],
        )
    }

    /// Reverse pass from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar node");
        self.backward_from(loss, Array2::from_elem((1, 1), T::one()))
    }

    /// Reverse pass seeded with an arbitrary upstream gradient for `output`.
    pub fn backward_from(&self, output: Var, seed: Array2<T>) -> Gradients<T> {
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        op: &Op<T>,
        out_value: &Array2<T>,
        g: &Array2<T>,
        grads: &mut [Option<Array2<T>>],
    ) {
        let mut acc = |v: Var, delta: Array2<T>| match &mut grads[v.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.wants(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulTransB(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.dot(self.value(*b)));
                }
                if self.wants(*b) {
                    acc(*b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*row) {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, f) => {
                if self.wants(*a) {
                    acc(*a, g * *f);
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let mut d = g.clone();
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d *= gelu_grad(x));
                    acc(*a, d);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.wants(*gamma) {
                    acc(*gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.wants(*beta) {
                    acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.wants(*x) {
                    let dxhat = g * self.value(*gamma);
                    let n = T::from_usize(g.ncols()).unwrap();
                    let mut dx = Array2::zeros(g.dim());
                    for r in 0..g.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let mean_dh = dh.sum() / n;
                        let mean_dhx = dh.dot(&xh) / n;
                        let inv = inv_std[r];
                        Zip::from(dx.row_mut(r))
                            .and(&dh)
                            .and(&xh)
                            .for_each(|o, &d, &h| *o = inv * (d - mean_dh - h * mean_dhx));
                    }
                    acc(*x, dx);
                }
            }
            Op::Attention {
                qkv,
                seq,
                heads,
                probs,
            } => {
                if self.wants(*qkv) {
                    let input = self.value(*qkv);
                    let (rows, width) = input.dim();
                    let dim = width / 3;
                    let head_dim = dim / heads;
                    let scale = T::one() / T::from_usize(head_dim).unwrap().sqrt();
                    let mut dqkv = Array2::zeros((rows, width));
                    let mut pi = 0;
                    for b in 0..rows / seq {
                        let r0 = b * seq;
                        let r1 = r0 + seq;
                        for h in 0..*heads {
                            let c0 = h * head_dim;
                            let c1 = c0 + head_dim;
                            let q = input.slice(s![r0..r1, c0..c1]);
                            let k = input.slice(s![r0..r1, dim + c0..dim + c1]);
                            let v = input.slice(s![r0..r1, 2 * dim + c0..2 * dim + c1]);
                            let p = &probs[pi];
                            pi += 1;
                            let d_out = g.slice(s![r0..r1, c0..c1]);
                            let dv = p.t().dot(&d_out);
                            let dp = d_out.dot(&v.t());
                            let mut ds = &dp * p;
                            for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(p.rows()) {
                                let dot = ds_row.sum();
                                Zip::from(&mut ds_row)
                                    .and(&p_row)
                                    .for_each(|d, &pv| *d -= pv * dot);
                            }
                            let dq = ds.dot(&k) * scale;
                            let dk = ds.t().dot(&q) * scale;
                            dqkv.slice_mut(s![r0..r1, c0..c1]).assign(&dq);
                            dqkv.slice_mut(s![r0..r1, dim + c0..dim + c1]).assign(&dk);
                            dqkv.slice_mut(s![r0..r1, 2 * dim + c0..2 * dim + c1])
                                .assign(&dv);
                        }
                    }
                    acc(*qkv, dqkv);
                }
            }
            Op::GroupMax { x, argmax, .. } => {
                if self.wants(*x) {
                    let mut dx = Array2::zeros(self.value(*x).dim());
                    for ((gi, c), &r) in argmax.indexed_iter() {
                        dx[[r, c]] += g[[gi, c]];
                    }
                    acc(*x, dx);
                }
            }
            Op::PrependCls {
                tokens,
                cls,
                per_sample,
            } => {
                let seq = per_sample + 1;
                let batch = g.nrows() / seq;
                if self.wants(*tokens) {
                    let mut dt = Array2::zeros(self.value(*tokens).dim());
                    for b in 0..batch {
                        dt.slice_mut(s![b * per_sample..(b + 1) * per_sample, ..])
                            .assign(&g.slice(s![b * seq + 1..(b + 1) * seq, ..]));
                    }
                    acc(*tokens, dt);
                }
                if self.wants(*cls) {
                    let mut dc = Array2::zeros(self.value(*cls).dim());
                    for b in 0..batch {
                        let mut row = dc.row_mut(0);
                        row += &g.row(b * seq);
                    }
                    acc(*cls, dc);
                }
            }
            Op::GatherRows { x, rows } => {
                if self.wants(*x) {
                    let mut dx = Array2::zeros(self.value(*x).dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut row = dx.row_mut(r);
                        row += &g.row(i);
                    }
                    acc(*x, dx);
                }
            }
            Op::FillRows { x, fill, rows } => {
                if self.wants(*x) {
                    let mut dx = g.clone();
                    for (r, &flag) in rows.iter().enumerate() {
                        if flag {
                            dx.row_mut(r).fill(T::zero());
                        }
                    }
                    acc(*x, dx);
                }
                if self.wants(*fill) {
                    let mut df = Array2::zeros((1, g.ncols()));
                    for (r, &flag) in rows.iter().enumerate() {
                        if flag {
                            let mut row = df.row_mut(0);
                            row += &g.row(r);
                        }
                    }
                    acc(*fill, df);
                }
            }
            Op::NormalizeRows { x, norms } => {
                if self.wants(*x) {
                    let mut dx = Array2::zeros(g.dim());
                    for r in 0..g.nrows() {
                        let y = out_value.row(r);
                        let dy = g.row(r);
                        let proj = y.dot(&dy);
                        let n = norms[r];
                        Zip::from(dx.row_mut(r))
                            .and(&y)
                            .and(&dy)
                            .for_each(|o, &yv, &d| *o = (d - yv * proj) / n);
                    }
                    acc(*x, dx);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                if self.wants(*logits) {
                    let up = g[[0, 0]];
                    let mut dz = probs.clone();
                    for (r, mut row) in dz.rows_mut().into_iter().enumerate() {
                        row[targets[r]] -= T::one();
                        let w = weights[r] * up;
                        row.mapv_inplace(|v| v * w);
                    }
                    acc(*logits, dz);
                }
            }
            Op::CosineDistance { x, target, weights } => {
                if self.wants(*x) {
                    let up = g[[0, 0]];
                    let xv = self.value(*x);
                    let mut dx = Array2::zeros(xv.dim());
                    for r in 0..xv.nrows() {
                        let a = xv.row(r);
                        let b = target.row(r);
                        let na = a.dot(&a).sqrt();
                        let nb = b.dot(&b).sqrt();
                        let denom = na * nb;
                        let w = weights[r] * up;
                        if denom < T::c(NORM_EPS) {
                            let eps = T::c(NORM_EPS);
                            Zip::from(dx.row_mut(r))
                                .and(&b)
                                .for_each(|o, &bv| *o = -w * bv / eps);
                        } else {
                            let cos = a.dot(&b) / denom;
                            Zip::from(dx.row_mut(r)).and(&a).and(&b).for_each(|o, &av, &bv| {
                                *o = -w * (bv / denom - cos * av / (na * na));
                            });
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::NegativeLabel {
                logits,
                low,
                weights,
                probs,
            } => {
                if self.wants(*logits) {
                    let up = g[[0, 0]];
                    let floor = T::c(LOG_FLOOR);
                    let mut dz = Array2::zeros(probs.dim());
                    for r in 0..probs.nrows() {
                        let p = probs.row(r);
                        let l = low.row(r);
                        // ratio_c = p_c / (1 - p_c) over the low set
                        let mut ratio_sum = T::zero();
                        for (&pc, &is_low) in p.iter().zip(l.iter()) {
                            if is_low && T::one() - pc > floor {
                                ratio_sum += pc / (T::one() - pc);
                            }
                        }
                        let w = weights[r] * up;
                        for j in 0..p.len() {
                            let pj = p[j];
                            let own = if l[j] && T::one() - pj > floor {
                                pj / (T::one() - pj)
                            } else {
                                T::zero()
                            };
                            dz[[r, j]] = w * (own - pj * ratio_sum);
                        }
                    }
                    acc(*logits, dz);
                }
            }
            Op::Chamfer {
                pred,
                target,
                points,
                weight,
                pred_nn,
                target_nn,
            } => {
                if self.wants(*pred) {
                    let up = g[[0, 0]];
                    let pv = self.value(*pred);
                    let k = *points;
                    let coef = T::c(2.0) * *weight * up / T::from_usize(k).unwrap();
                    let mut dp = Array2::zeros(pv.dim());
                    for grp in 0..pv.nrows() {
                        for i in 0..k {
                            let j = pred_nn[grp * k + i];
                            for c in 0..3 {
                                dp[[grp, 3 * i + c]] +=
                                    coef * (pv[[grp, 3 * i + c]] - target[[grp, 3 * j + c]]);
                            }
                        }
                        for j in 0..k {
                            let i = target_nn[grp * k + j];
                            for c in 0..3 {
                                dp[[grp, 3 * i + c]] +=
                                    coef * (pv[[grp, 3 * i + c]] - target[[grp, 3 * j + c]]);
                            }
                        }
                    }
                    acc(*pred, dp);
                }
            }
        }
    }
}
