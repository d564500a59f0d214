//! Minimal reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records operations as they are applied; [`Graph::backward`]
//! walks the tape in reverse and returns gradients for the parameter leaves.

use std::rc::Rc;

use super::tensor::{dot, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// `a + b` with `b` a single row broadcast over `a`'s rows.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    /// Row-wise RMS normalization scaled by a `1 x cols` weight.
    RmsNorm {
        x: Var,
        weight: Var,
        inv_rms: Vec<f64>,
    },
    Softmax(Var),
    /// Adds `table[bucket][head]` elementwise.
    RelBias {
        scores: Var,
        table: Var,
        buckets: Rc<Vec<usize>>,
        head: usize,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Var, Var),
    Gather(Var, Rc<Vec<usize>>),
    CrossEntropy {
        logits: Var,
        targets: Rc<Vec<Option<usize>>>,
        normalizer: f64,
        probs: Tensor,
    },
}

struct Node {
    op: Op,
    value: Option<Tensor>,
}

pub struct Graph<'p> {
    params: &'p [Tensor],
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(i), _) => &self.params[*i],
            (_, Some(t)) => t,
            _ => unreachable!("non-parameter node without value"),
        }
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t)
    }

    pub fn param(&mut self, index: usize) -> Var {
        self.nodes.push(Node {
            op: Op::Param(index),
            value: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(Op::MatMulT(a, b), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(Op::Add(a, b), v)
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let row = self.value(b);
        assert_eq!(row.rows, 1);
        let mut v = self.value(a).clone();
        for r in 0..v.rows {
            for (x, y) in v.row_mut(r).iter_mut().zip(&row.data) {
                *x += y;
            }
        }
        self.push(Op::AddRow(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert!(x.same_shape(y));
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let v = Tensor::from_vec(x.rows, x.cols, data);
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(Op::Gelu(a), v)
    }

    pub fn rms_norm(&mut self, x: Var, weight: Var, eps: f64) -> Var {
        let (xv, w) = (self.value(x), self.value(weight));
        let mut out = xv.clone();
        let mut inv_rms = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let ms = dot(row, row) / xv.cols as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for ((o, &xi), &wi) in out.row_mut(r).iter_mut().zip(row).zip(&w.data) {
                *o = xi * inv * wi;
            }
        }
        self.push(Op::RmsNorm { x, weight, inv_rms }, out)
    }

    /// Row-wise softmax. With `causal`, entries right of the diagonal are
    /// masked out.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows {
            let limit = if causal { (r + 1).min(v.cols) } else { v.cols };
            softmax_in_place(&mut v.row_mut(r)[..limit]);
            v.row_mut(r)[limit..].iter_mut().for_each(|x| *x = 0.0);
        }
        self.push(Op::Softmax(a), v)
    }

    pub fn rel_bias(
        &mut self,
        scores: Var,
        table: Var,
        buckets: Rc<Vec<usize>>,
        head: usize,
    ) -> Var {
        let mut v = self.value(scores).clone();
        assert_eq!(buckets.len(), v.len());
        let t = self.value(table);
        for (x, &b) in v.data.iter_mut().zip(buckets.iter()) {
            *x += t[(b, head)];
        }
        self.push(
            Op::RelBias {
                scores,
                table,
                buckets,
                head,
            },
            v,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let mut v = Tensor::zeros(x.rows, len);
        for r in 0..x.rows {
            v.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        self.push(Op::SliceCols(a, start), v)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut c = 0;
            for &p in parts {
                let src = self.value(p);
                v.row_mut(r)[c..c + src.cols].copy_from_slice(src.row(r));
                c += src.cols;
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols, y.cols);
        let mut data = x.data.clone();
        data.extend_from_slice(&y.data);
        let v = Tensor::from_vec(x.rows + y.rows, x.cols, data);
        self.push(Op::ConcatRows(a, b), v)
    }

    pub fn gather(&mut self, table: Var, ids: Rc<Vec<usize>>) -> Var {
        let t = self.value(table);
        let mut v = Tensor::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            v.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(Op::Gather(table, ids), v)
    }

    /// Summed negative log-likelihood of `targets` (masked where `None`),
    /// divided by `normalizer`. Produces a `1 x 1` node.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: Rc<Vec<Option<usize>>>,
        normalizer: f64,
    ) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows, targets.len());
        let mut probs = l.clone();
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let row = probs.row_mut(r);
            let lse = log_sum_exp(row);
            if let Some(y) = *t {
                total += lse - row[y];
            }
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        let v = Tensor::from_vec(1, 1, vec![total / normalizer]);
        self.push(
            Op::CrossEntropy {
                logits,
                targets,
                normalizer,
                probs,
            },
            v,
        )
    }

    /// Gradients of the scalar `loss` node with respect to every parameter
    /// leaf, indexed like the parameter slice. Unused parameters get `None`.
    pub fn backward(&self, loss: Var) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(1, 1, 1.0));
        let mut param_grads: Vec<Option<Tensor>> = (0..self.params.len()).map(|_| None).collect();

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => match &mut param_grads[*p] {
                    Some(existing) => existing.add_assign(&g),
                    slot @ None => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.t_matmul(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddRow(a, b) => {
                    let mut gb = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (s, x) in gb.data.iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let ga = Tensor::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&y.data).map(|(p, q)| p * q).collect(),
                    );
                    let gb = Tensor::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&x.data).map(|(p, q)| p * q).collect(),
                    );
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.map(|x| x * s)),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let data = g
                        .data
                        .iter()
                        .zip(&x.data)
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    acc(&mut grads, *a, Tensor::from_vec(g.rows, g.cols, data));
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let data = g
                        .data
                        .iter()
                        .zip(&x.data)
                        .map(|(gv, xv)| gv * gelu_grad(*xv))
                        .collect();
                    acc(&mut grads, *a, Tensor::from_vec(g.rows, g.cols, data));
                }
                Op::RmsNorm { x, weight, inv_rms } => {
                    let (xv, w) = (self.value(*x), self.value(*weight));
                    let n = xv.cols as f64;
                    let mut gx = Tensor::zeros(xv.rows, xv.cols);
                    let mut gw = Tensor::zeros(1, xv.cols);
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let (xr, gr) = (xv.row(r), g.row(r));
                        let mut proj = 0.0;
                        for c in 0..xv.cols {
                            let xhat = xr[c] * inv;
                            gw.data[c] += gr[c] * xhat;
                            proj += gr[c] * w.data[c] * xhat;
                        }
                        proj /= n;
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            let xhat = xr[c] * inv;
                            *o = (gr[c] * w.data[c] - xhat * proj) * inv;
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *weight, gw);
                }
                Op::Softmax(a) => {
                    let p = node.value.as_ref().expect("softmax value");
                    let mut gx = Tensor::zeros(p.rows, p.cols);
                    for r in 0..p.rows {
                        let s = dot(g.row(r), p.row(r));
                        for ((o, &pv), &gv) in gx.row_mut(r).iter_mut().zip(p.row(r)).zip(g.row(r))
                        {
                            *o = pv * (gv - s);
                        }
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::RelBias {
                    scores,
                    table,
                    buckets,
                    head,
                } => {
                    let t = self.value(*table);
                    let mut gt = Tensor::zeros(t.rows, t.cols);
                    for (gv, &b) in g.data.iter().zip(buckets.iter()) {
                        gt[(b, *head)] += gv;
                    }
                    acc(&mut grads, *scores, g);
                    acc(&mut grads, *table, gt);
                }
                Op::SliceCols(a, start) => {
                    let x = self.value(*a);
                    let mut gx = Tensor::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        gx.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut c = 0;
                    for &p in parts {
                        let cols = self.value(p).cols;
                        let mut gp = Tensor::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[c..c + cols]);
                        }
                        c += cols;
                        acc(&mut grads, p, gp);
                    }
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.value(*a).rows;
                    let split = ra * g.cols;
                    acc(
                        &mut grads,
                        *a,
                        Tensor::from_vec(ra, g.cols, g.data[..split].to_vec()),
                    );
                    acc(
                        &mut grads,
                        *b,
                        Tensor::from_vec(g.rows - ra, g.cols, g.data[split..].to_vec()),
                    );
                }
                Op::Gather(table, ids) => {
                    let t = self.value(*table);
                    let mut gt = Tensor::zeros(t.rows, t.cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, x) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    normalizer,
                    probs,
                } => {
                    let scale = g.data[0] / normalizer;
                    let mut gl = Tensor::zeros(probs.rows, probs.cols);
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(y) = *t {
                            for (o, p) in gl.row_mut(r).iter_mut().zip(probs.row(r)) {
                                *o = p * scale;
                            }
                            gl[(r, y)] -= scale;
                        }
                    }
                    acc(&mut grads, *logits, gl);
                }
            }
        }
        param_grads
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}
