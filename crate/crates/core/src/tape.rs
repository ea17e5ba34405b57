//! A small reverse-mode autodiff tape over row-major `f64` matrices.
//!
//! Every value is an `Array2<f64>`; scalars are `1 x 1`. Nodes are appended in
//! evaluation order and [`Tape::backward`] walks them in reverse. Parameters
//! enter either as trainable leaves (which receive gradients) or as frozen
//! leaves (borrowed, never differentiated). Nodes whose inputs carry no
//! gradient skip their backward rule entirely.

use std::borrow::Cow;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::rope::{rotate_in_place, RopeAngles};

pub type Var = usize;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;
const LN_EPS: f64 = 1e-6;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Modulate {
        x: Var,
        shift: Var,
        scale: Var,
    },
    GatedAdd {
        res: Var,
        gate: Var,
        y: Var,
    },
    Gather {
        src: Var,
        idx: Arc<Vec<usize>>,
    },
    SliceRows {
        src: Var,
        start: usize,
    },
    SliceCols {
        src: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    GroupMean {
        src: Var,
        groups: Arc<Vec<Vec<usize>>>,
    },
    Rope {
        src: Var,
        angles: Arc<RopeAngles>,
    },
    Attention(Box<AttentionSave>),
    SqErr {
        pred: Var,
        target: Array2<f64>,
        row_weight: Vec<f64>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct AttentionSave {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    groups: Arc<Vec<Vec<usize>>>,
    /// Softmax probabilities, indexed `[group][head]`.
    probs: Vec<Vec<Array2<f64>>>,
}

struct Node<'a> {
    value: Cow<'a, Array2<f64>>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// `0.5 * (1 + tanh(z))` written as the logistic function of `2z`.
fn gelu_gate(x: f64) -> f64 {
    let z = GELU_C * (x + GELU_K * x * x * x);
    1.0 / (1.0 + (-2.0 * z).exp())
}

fn gelu(x: f64) -> f64 {
    x * gelu_gate(x)
}

fn gelu_grad(x: f64) -> f64 {
    let s = gelu_gate(x);
    s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|v| v / sum);
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Array2<f64>>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        self.nodes.len() - 1
    }

    fn owned(&mut self, value: Array2<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.push(Cow::Owned(value), op, needs)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v].value[[0, 0]]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v].needs_grad
    }

    /// A constant input.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    /// A borrowed leaf; gradients are collected for it iff `trainable`.
    pub fn param(&mut self, value: &'a Array2<f64>, trainable: bool) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.owned(v, Op::MatMul(a, b), &[a, b])
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let v = self.value(a) + &self.value(bias).row(0);
        self.owned(v, Op::AddBias(a, bias), &[a, bias])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.owned(v, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.owned(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.owned(v, Op::Scale(a, c), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(silu);
        self.owned(v, Op::Silu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.owned(v, Op::Gelu(a), &[a])
    }

    /// Row-wise layer norm without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let n = src.ncols() as f64;
        let mut out = src.clone();
        let mut inv_std = Vec::with_capacity(src.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        self.owned(out, Op::LayerNorm { x, inv_std }, &[x])
    }

    /// `x * (1 + scale) + shift`, all the same shape.
    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var) -> Var {
        let mut v = self.value(x).clone();
        Zip::from(&mut v)
            .and(self.value(shift))
            .and(self.value(scale))
            .for_each(|o, &sh, &sc| *o = *o * (1.0 + sc) + sh);
        self.owned(v, Op::Modulate { x, shift, scale }, &[x, shift, scale])
    }

    /// `res + gate * y`, all the same shape.
    pub fn gated_add(&mut self, res: Var, gate: Var, y: Var) -> Var {
        let mut v = self.value(res).clone();
        Zip::from(&mut v)
            .and(self.value(gate))
            .and(self.value(y))
            .for_each(|o, &g, &b| *o += g * b);
        self.owned(v, Op::GatedAdd { res, gate, y }, &[res, gate, y])
    }

    /// Selects rows of `src` (indices may repeat).
    pub fn gather(&mut self, src: Var, idx: Arc<Vec<usize>>) -> Var {
        let v = self.value(src).select(Axis(0), &idx);
        self.owned(v, Op::Gather { src, idx }, &[src])
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, end: usize) -> Var {
        let v = self.value(src).slice(s![start..end, ..]).to_owned();
        self.owned(v, Op::SliceRows { src, start }, &[src])
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, end: usize) -> Var {
        let v = self.value(src).slice(s![.., start..end]).to_owned();
        self.owned(v, Op::SliceCols { src, start }, &[src])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.owned(v, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// One output row per group: the mean of the listed rows of `src`.
    pub fn group_mean(&mut self, src: Var, groups: Arc<Vec<Vec<usize>>>) -> Var {
        let x = self.value(src);
        let mut v = Array2::zeros((groups.len(), x.ncols()));
        for (g, rows) in groups.iter().enumerate() {
            let w = 1.0 / rows.len() as f64;
            for &r in rows {
                v.row_mut(g).scaled_add(w, &x.row(r));
            }
        }
        self.owned(v, Op::GroupMean { src, groups }, &[src])
    }

    /// Rotary position encoding on each head of each row.
    pub fn rope(&mut self, src: Var, angles: Arc<RopeAngles>) -> Var {
        let mut v = self.value(src).clone();
        rotate_in_place(&mut v.view_mut(), &angles, false);
        self.owned(v, Op::Rope { src, angles }, &[src])
    }

    /// Multi-head softmax attention. Rows attend only within their group.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, groups: Arc<Vec<Vec<usize>>>) -> Var {
        let (qa, ka, va) = (self.value(q), self.value(k), self.value(v));
        let d = qa.ncols();
        let hd = d / heads;
        let inv = 1.0 / (hd as f64).sqrt();
        let mut out = Array2::zeros(qa.raw_dim());
        let mut probs = Vec::with_capacity(groups.len());
        for rows in groups.iter() {
            let (qg, kg, vg) = (
                qa.select(Axis(0), rows),
                ka.select(Axis(0), rows),
                va.select(Axis(0), rows),
            );
            let mut per_head = Vec::with_capacity(heads);
            for h in 0..heads {
                let cols = s![.., h * hd..(h + 1) * hd];
                let mut p = qg.slice(cols).dot(&kg.slice(cols).t()) * inv;
                softmax_rows(&mut p);
                let o = p.dot(&vg.slice(cols));
                for (i, &r) in rows.iter().enumerate() {
                    out.slice_mut(s![r, h * hd..(h + 1) * hd]).assign(&o.row(i));
                }
                per_head.push(p);
            }
            probs.push(per_head);
        }
        let save = AttentionSave {
            q,
            k,
            v,
            heads,
            groups,
            probs,
        };
        self.owned(out, Op::Attention(Box::new(save)), &[q, k, v])
    }

    /// Attention probabilities of an attention node, `[group][head]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[Vec<Array2<f64>>]> {
        match &self.nodes[v].op {
            Op::Attention(save) => Some(&save.probs),
            _ => None,
        }
    }

    /// `sum_r row_weight[r] * sum_c (pred - target)^2` as a `1 x 1` scalar.
    pub fn sq_err(&mut self, pred: Var, target: Array2<f64>, row_weight: Vec<f64>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.dim(), target.dim(), "sq_err shape");
        assert_eq!(row_weight.len(), p.nrows(), "sq_err weights");
        let mut total = 0.0;
        for ((pr, tr), w) in p.rows().into_iter().zip(target.rows()).zip(&row_weight) {
            if *w != 0.0 {
                total += w * pr.iter().zip(tr).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
        }
        let v = Array2::from_elem((1, 1), total);
        self.owned(
            v,
            Op::SqErr {
                pred,
                target,
                row_weight,
            },
            &[pred],
        )
    }

    /// `sum_i c_i * x_i` over equally shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut v = Array2::zeros(self.value(terms[0].0).raw_dim());
        for &(t, c) in terms {
            v.scaled_add(c, self.value(t));
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.owned(v, Op::WeightedSum(terms.to_vec()), &inputs)
    }

    /// Reverse pass from a scalar `root` seeded with gradient 1.
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(Array2::ones(self.value(root).raw_dim()));
        for id in (0..=root).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v].needs_grad
    }

    fn backward_node(&self, id: Var, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let mut acc = |v: Var, d: Array2<f64>| match &mut grads[v] {
            Some(e) => *e += &d,
            slot @ None => *slot = Some(d),
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.wants(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::AddBias(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Add(a, b) => {
                for &x in [a, b] {
                    if self.wants(x) {
                        acc(x, g.clone());
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g * self.value(*b));
                }
                if self.wants(*b) {
                    acc(*b, g * self.value(*a));
                }
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::Silu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    let sg = 1.0 / (1.0 + (-x).exp());
                    *d *= sg * (1.0 + x * (1.0 - sg));
                });
                acc(*a, d);
            }
            Op::Gelu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| *d *= gelu_grad(x));
                acc(*a, d);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = self.value(id);
                let n = y.ncols() as f64;
                let mut d = g.clone();
                for ((mut dr, yr), &inv) in d.rows_mut().into_iter().zip(y.rows()).zip(inv_std) {
                    let mean_g = dr.sum() / n;
                    let mean_gy = dr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    Zip::from(&mut dr)
                        .and(&yr)
                        .for_each(|d, &yv| *d = inv * (*d - mean_g - yv * mean_gy));
                }
                acc(*x, d);
            }
            Op::Modulate { x, shift, scale } => {
                if self.wants(*x) {
                    acc(*x, g * &self.value(*scale).mapv(|s| 1.0 + s));
                }
                if self.wants(*shift) {
                    acc(*shift, g.clone());
                }
                if self.wants(*scale) {
                    acc(*scale, g * self.value(*x));
                }
            }
            Op::GatedAdd { res, gate, y } => {
                if self.wants(*res) {
                    acc(*res, g.clone());
                }
                if self.wants(*gate) {
                    acc(*gate, g * self.value(*y));
                }
                if self.wants(*y) {
                    acc(*y, g * self.value(*gate));
                }
            }
            Op::Gather { src, idx } => {
                let mut d = Array2::zeros(self.value(*src).raw_dim());
                for (i, &r) in idx.iter().enumerate() {
                    let mut row = d.row_mut(r);
                    row += &g.row(i);
                }
                acc(*src, d);
            }
            Op::SliceRows { src, start } => {
                let mut d = Array2::zeros(self.value(*src).raw_dim());
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                acc(*src, d);
            }
            Op::SliceCols { src, start } => {
                let mut d = Array2::zeros(self.value(*src).raw_dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(*src, d);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let n = self.value(p).nrows();
                    if self.wants(p) {
                        acc(p, g.slice(s![at..at + n, ..]).to_owned());
                    }
                    at += n;
                }
            }
            Op::GroupMean { src, groups } => {
                let mut d = Array2::zeros(self.value(*src).raw_dim());
                for (gi, rows) in groups.iter().enumerate() {
                    let w = 1.0 / rows.len() as f64;
                    for &r in rows {
                        d.row_mut(r).scaled_add(w, &g.row(gi));
                    }
                }
                acc(*src, d);
            }
            Op::Rope { src, angles } => {
                let mut d = g.clone();
                rotate_in_place(&mut d.view_mut(), angles, true);
                acc(*src, d);
            }
            Op::Attention(save) => self.attention_backward(save, g, &mut acc),
            Op::SqErr {
                pred,
                target,
                row_weight,
            } => {
                let c = g[[0, 0]];
                let mut d = self.value(*pred) - target;
                for (mut row, &w) in d.rows_mut().into_iter().zip(row_weight) {
                    row *= 2.0 * w * c;
                }
                acc(*pred, d);
            }
            Op::WeightedSum(terms) => {
                for &(t, c) in terms {
                    if self.wants(t) {
                        acc(t, g * c);
                    }
                }
            }
        }
    }

    fn attention_backward(&self, save: &AttentionSave, g: &Array2<f64>, acc: &mut impl FnMut(Var, Array2<f64>)) {
        let (qa, ka, va) = (self.value(save.q), self.value(save.k), self.value(save.v));
        let d = qa.ncols();
        let hd = d / save.heads;
        let inv = 1.0 / (hd as f64).sqrt();
        let mut dq = Array2::zeros(qa.raw_dim());
        let mut dk = Array2::zeros(ka.raw_dim());
        let mut dv = Array2::zeros(va.raw_dim());
        for (rows, probs) in save.groups.iter().zip(&save.probs) {
            let (qg, kg, vg, gg) = (
                qa.select(Axis(0), rows),
                ka.select(Axis(0), rows),
                va.select(Axis(0), rows),
                g.select(Axis(0), rows),
            );
            for (h, p) in probs.iter().enumerate() {
                let cols = s![.., h * hd..(h + 1) * hd];
                let go = gg.slice(cols);
                let dvh = p.t().dot(&go);
                let dp = go.dot(&vg.slice(cols).t());
                let mut ds = dp;
                for (mut dr, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    Zip::from(&mut dr).and(&pr).for_each(|d, &pv| *d = pv * (*d - dot));
                }
                ds *= inv;
                let dqh = ds.dot(&kg.slice(cols));
                let dkh = ds.t().dot(&qg.slice(cols));
                for (i, &r) in rows.iter().enumerate() {
                    let dst = s![r, h * hd..(h + 1) * hd];
                    dq.slice_mut(dst).assign(&dqh.row(i));
                    dk.slice_mut(dst).assign(&dkh.row(i));
                    dv.slice_mut(dst).assign(&dvh.row(i));
                }
            }
        }
        if self.wants(save.q) {
            acc(save.q, dq);
        }
        if self.wants(save.k) {
            acc(save.k, dk);
        }
        if self.wants(save.v) {
            acc(save.v, dv);
        }
    }
}
