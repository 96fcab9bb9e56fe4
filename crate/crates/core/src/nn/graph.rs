//! Reverse-mode automatic differentiation over row-major f64 matrices.
//!
//! A [`Graph`] records operations eagerly; [`Graph::backward`] walks the
//! record in reverse and returns gradients for every parameter that took
//! part. Parameters are borrowed from a [`ParamStore`] rather than copied.

use std::rc::Rc;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::{Mat, NnError};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row layout shared by attention and pooling: rows of several sequences are
/// stacked, `segments` gives `(start, len)` per sequence and `key_mask`
/// marks real rows.
#[derive(Debug, Clone)]
pub struct SeqLayout {
    pub segments: Vec<(usize, usize)>,
    pub key_mask: Vec<bool>,
}

impl SeqLayout {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut segments = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &len in lengths {
            segments.push((start, len));
            start += len;
        }
        Self {
            segments,
            key_mask: vec![true; start],
        }
    }

    pub fn with_mask(lengths: &[usize], mask: Vec<bool>) -> Self {
        let mut layout = Self::from_lengths(lengths);
        assert_eq!(layout.key_mask.len(), mask.len(), "mask length");
        layout.key_mask = mask;
        layout
    }

    pub fn rows(&self) -> usize {
        self.key_mask.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastiveVariant {
    /// Positive pair removed from each denominator.
    ExcludePositive,
    /// Standard InfoNCE: positive pair kept in the denominator.
    IncludePositive,
}

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: Rc<SeqLayout>,
        heads: usize,
        probs: Vec<Mat>,
    },
    GatherSum {
        table: Var,
        rows: Rc<Vec<Vec<usize>>>,
    },
    Rows {
        sources: Vec<Var>,
        map: Vec<(usize, usize)>,
    },
    MeanPool {
        x: Var,
        layout: Rc<SeqLayout>,
        counts: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Dropout {
        x: Var,
        keep: Mat,
    },
    /// Upstream gradient times a precomputed local gradient.
    ScalarLoss {
        input: Var,
        local_grad: Mat,
    },
    Sum(Var),
}

struct Node {
    value: Option<Mat>,
    op: Op,
    needs_grad: bool,
}

/// Gradients for every parameter of the store; `None` if unused.
#[derive(Debug, Clone)]
pub struct Grads(pub Vec<Option<Mat>>);

impl Grads {
    pub fn get(&self, id: usize) -> Option<&Mat> {
        self.0[id].as_ref()
    }

    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads(vec![None; store.len()])
    }
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    rng: Option<ChaCha8Rng>,
}

fn softmax_rows_in_place(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}

fn log_sum_exp<'a>(values: impl Iterator<Item = &'a f64> + Clone) -> f64 {
    let max = values.clone().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn attention_scores(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    key_mask: &[bool],
    causal: bool,
) -> Mat {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut scores = q.dot(&k.t()) * scale;
    for ((i, j), x) in scores.indexed_iter_mut() {
        if !key_mask[j] || (causal && j > i) {
            *x = f64::NEG_INFINITY;
        }
    }
    softmax_rows_in_place(&mut scores);
    scores
}

impl<'p> Graph<'p> {
    /// Evaluation graph: dropout is the identity.
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
            rng: None,
        }
    }

    /// Training graph: dropout draws from `rng`.
    pub fn training(store: &'p ParamStore, rng: ChaCha8Rng) -> Self {
        Self {
            rng: Some(rng),
            ..Self::new(store)
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn into_rng(self) -> Option<ChaCha8Rng> {
        self.rng
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    /// Attention probabilities per (segment, head), segment-major.
    pub fn attention_probs(&self, v: Var) -> Option<&[Mat]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.param_nodes[id] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds a `1 × m` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let out = self.value(x) + self.value(row);
        let ng = self.ng(x) || self.ng(row);
        self.push(out, Op::AddRow(x, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x) * c;
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()));
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Multi-head scaled dot-product attention within each segment.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: Rc<SeqLayout>,
        heads: usize,
        causal: bool,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let dim = qv.ncols();
        let dh = dim / heads;
        let mut out = Mat::zeros((qv.nrows(), dim));
        let mut probs = Vec::with_capacity(layout.segments.len() * heads);
        for &(start, len) in &layout.segments {
            let rows = start..start + len;
            let mask = &layout.key_mask[rows.clone()];
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let p = attention_scores(
                    qv.slice(s![rows.clone(), cols.clone()]),
                    kv.slice(s![rows.clone(), cols.clone()]),
                    mask,
                    causal,
                );
                let o = p.dot(&vv.slice(s![rows.clone(), cols.clone()]));
                out.slice_mut(s![rows.clone(), cols]).assign(&o);
                probs.push(p);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                probs,
            },
            ng,
        )
    }

    /// Row `i` of the output is the sum of `table` rows listed in `rows[i]`.
    /// Equivalent to multiplying a multi-hot matrix by `table`.
    pub fn gather_sum(&mut self, table: Var, rows: Rc<Vec<Vec<usize>>>) -> Var {
        let tv = self.value(table);
        let mut out = Mat::zeros((rows.len(), tv.ncols()));
        for (i, idx) in rows.iter().enumerate() {
            let mut dst = out.row_mut(i);
            for &r in idx {
                dst += &tv.row(r);
            }
        }
        let ng = self.ng(table);
        self.push(out, Op::GatherSum { table, rows }, ng)
    }

    /// Output row `r` copies row `map[r].1` of `sources[map[r].0]`.
    pub fn rows(&mut self, sources: Vec<Var>, map: Vec<(usize, usize)>) -> Var {
        let cols = self.value(sources[0]).ncols();
        let mut out = Mat::zeros((map.len(), cols));
        for (r, &(s, row)) in map.iter().enumerate() {
            out.row_mut(r).assign(&self.value(sources[s]).row(row));
        }
        let ng = sources.iter().any(|&s| self.ng(s));
        self.push(out, Op::Rows { sources, map }, ng)
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        self.rows(vec![x], rows.iter().map(|&r| (0, r)).collect())
    }

    /// Masked mean over each segment; one output row per segment.
    pub fn mean_pool(&mut self, x: Var, layout: Rc<SeqLayout>) -> Result<Var, NnError> {
        let xv = self.value(x);
        let mut out = Mat::zeros((layout.segments.len(), xv.ncols()));
        let mut counts = Vec::with_capacity(layout.segments.len());
        for (s, &(start, len)) in layout.segments.iter().enumerate() {
            let mut n = 0.0;
            let mut dst = out.row_mut(s);
            for i in start..start + len {
                if layout.key_mask[i] {
                    dst += &xv.row(i);
                    n += 1.0;
                }
            }
            if n == 0.0 {
                return Err(NnError::EmptyPool);
            }
            dst /= n;
            counts.push(n);
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::MeanPool { x, layout, counts }, ng))
    }

    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt().max(1e-12);
            row /= n;
            norms.push(n);
        }
        let ng = self.ng(x);
        self.push(out, Op::L2Normalize { x, norms }, ng)
    }

    /// Inverted dropout; identity outside training or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if p <= 0.0 || self.rng.is_none() {
            return x;
        }
        let dim = self.value(x).dim();
        let rng = self.rng.as_mut().expect("training graph");
        let keep = Mat::from_shape_fn(dim, |_| {
            if rng.gen::<f64>() < p {
                0.0
            } else {
                1.0 / (1.0 - p)
            }
        });
        let out = self.value(x) * &keep;
        let ng = self.ng(x);
        self.push(out, Op::Dropout { x, keep }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Mat::from_elem((1, 1), total), Op::Sum(x), ng)
    }

    /// Mean token cross-entropy over rows whose target is `Some`.
    /// Returns a `1 × 1` node (zero when there are no targets).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len(), "one target per logit row");
        let mut probs = lv.clone();
        softmax_rows_in_place(&mut probs);
        let count = targets.iter().filter(|t| t.is_some()).count();
        let mut loss = 0.0;
        let mut grad = Mat::zeros(lv.dim());
        if count > 0 {
            let inv = 1.0 / count as f64;
            for (i, target) in targets.iter().enumerate() {
                if let Some(t) = *target {
                    let row = lv.row(i);
                    loss += log_sum_exp(row.iter()) - row[t];
                    let mut g = grad.row_mut(i);
                    g.assign(&probs.row(i));
                    g[t] -= 1.0;
                    g *= inv;
                }
            }
            loss *= inv;
        }
        let ng = self.ng(logits);
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::ScalarLoss {
                input: logits,
                local_grad: grad,
            },
            ng,
        )
    }

    /// Symmetric contrastive loss over an `N × N` logit matrix whose diagonal
    /// holds the positive pairs: the mean over both directions of
    /// `-(s_ii - log Σ_j exp s_ij)`, with `j = i` left out of the sum for
    /// [`ContrastiveVariant::ExcludePositive`].
    pub fn contrastive(&mut self, logits: Var, variant: ContrastiveVariant) -> Result<Var, NnError> {
        let (loss, grad) = contrastive_loss_and_grad(self.value(logits), variant)?;
        let ng = self.ng(logits);
        Ok(self.push(
            Mat::from_elem((1, 1), loss),
            Op::ScalarLoss {
                input: logits,
                local_grad: grad,
            },
            ng,
        ))
    }

    /// Back-propagates from the `1 × 1` node `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Grads(vec![None; self.store.len()]);
        grads[loss.0] = Some(Mat::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut acc = |v: Var, delta: Mat| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => match &mut out.0[*id] {
                    Some(existing) => *existing += &g,
                    slot @ None => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        acc(*a, g.dot(&self.value(*b).t()));
                    }
                    if self.ng(*b) {
                        acc(*b, self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.ng(*a) {
                        acc(*a, g.dot(self.value(*b)));
                    }
                    if self.ng(*b) {
                        acc(*b, g.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddRow(x, row) => {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*x, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * self.value(*b));
                    acc(*b, &g * self.value(*a));
                }
                Op::Scale(x, c) => acc(*x, g * *c),
                Op::Gelu(x) => {
                    let d = self.value(*x).mapv(|v| {
                        let inner = GELU_C * (v + 0.044715 * v * v * v);
                        let t = inner.tanh();
                        0.5 * (1.0 + t)
                            + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
                    });
                    acc(*x, g * d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(
                        *gamma,
                        (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                    if self.ng(*x) {
                        let dxhat = &g * self.value(*gamma);
                        let d = xhat.ncols() as f64;
                        let mut dx = Mat::zeros(xhat.dim());
                        for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                            let dh = dxhat.row(r);
                            let xh = xhat.row(r);
                            let sum_dh = dh.sum();
                            let sum_dh_xh = dh.dot(&xh);
                            let is = inv_std[r];
                            for c in 0..row.len() {
                                row[c] = is / d * (d * dh[c] - sum_dh - xh[c] * sum_dh_xh);
                            }
                        }
                        acc(*x, dx);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    layout,
                    heads,
                    probs,
                    ..
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let dim = qv.ncols();
                    let dh = dim / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Mat::zeros(qv.dim());
                    let mut dk = Mat::zeros(kv.dim());
                    let mut dv = Mat::zeros(vv.dim());
                    let mut p_iter = probs.iter();
                    for &(start, len) in &layout.segments {
                        let rows = start..start + len;
                        for h in 0..*heads {
                            let p = p_iter.next().expect("probs per head");
                            let cols = h * dh..(h + 1) * dh;
                            let go = g.slice(s![rows.clone(), cols.clone()]);
                            let vh = vv.slice(s![rows.clone(), cols.clone()]);
                            let qh = qv.slice(s![rows.clone(), cols.clone()]);
                            let kh = kv.slice(s![rows.clone(), cols.clone()]);
                            dv.slice_mut(s![rows.clone(), cols.clone()])
                                .assign(&p.t().dot(&go));
                            let dp = go.dot(&vh.t());
                            let mut ds = &dp * p;
                            let row_sums = ds.sum_axis(Axis(1));
                            for (mut row, (pr, rs)) in ds
                                .rows_mut()
                                .into_iter()
                                .zip(p.rows().into_iter().zip(row_sums.iter()))
                            {
                                row.scaled_add(-*rs, &pr);
                            }
                            ds *= scale;
                            dq.slice_mut(s![rows.clone(), cols.clone()])
                                .assign(&ds.dot(&kh));
                            dk.slice_mut(s![rows.clone(), cols])
                                .assign(&ds.t().dot(&qh));
                        }
                    }
                    acc(*q, dq);
                    acc(*k, dk);
                    acc(*v, dv);
                }
                Op::GatherSum { table, rows } => {
                    let mut dt = Mat::zeros(self.value(*table).dim());
                    for (i, idx) in rows.iter().enumerate() {
                        let gi = g.row(i);
                        for &r in idx {
                            let mut dst = dt.row_mut(r);
                            dst += &gi;
                        }
                    }
                    acc(*table, dt);
                }
                Op::Rows { sources, map } => {
                    let mut parts: Vec<Option<Mat>> = sources
                        .iter()
                        .map(|&s| self.ng(s).then(|| Mat::zeros(self.value(s).dim())))
                        .collect();
                    for (r, &(s, row)) in map.iter().enumerate() {
                        if let Some(part) = &mut parts[s] {
                            let mut dst = part.row_mut(row);
                            dst += &g.row(r);
                        }
                    }
                    for (&s, part) in sources.iter().zip(parts) {
                        if let Some(part) = part {
                            acc(s, part);
                        }
                    }
                }
                Op::MeanPool { x, layout, counts } => {
                    let mut dx = Mat::zeros(self.value(*x).dim());
                    for (s, &(start, len)) in layout.segments.iter().enumerate() {
                        let gs = g.row(s).mapv(|v| v / counts[s]);
                        for i in start..start + len {
                            if layout.key_mask[i] {
                                dx.row_mut(i).assign(&gs);
                            }
                        }
                    }
                    acc(*x, dx);
                }
                Op::L2Normalize { x, norms } => {
                    let y = self.nodes[i].value.as_ref().expect("owned value");
                    let mut dx = g.clone();
                    for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let yr = y.row(r);
                        let proj = yr.dot(&g.row(r));
                        row.scaled_add(-proj, &yr);
                        row /= norms[r];
                    }
                    acc(*x, dx);
                }
                Op::Dropout { x, keep } => acc(*x, g * keep),
                Op::ScalarLoss { input, local_grad } => acc(*input, local_grad * g[[0, 0]]),
                Op::Sum(x) => {
                    let dim = self.value(*x).dim();
                    acc(*x, Mat::from_elem(dim, g[[0, 0]]));
                }
            }
        }
        out
    }
}

/// Value and gradient of the symmetric contrastive loss with respect to the
/// logit matrix (see [`Graph::contrastive`]).
pub fn contrastive_loss_and_grad(
    logits: &Mat,
    variant: ContrastiveVariant,
) -> Result<(f64, Mat), NnError> {
    let n = logits.nrows();
    if logits.ncols() != n {
        return Err(NnError::Shape(format!("logits must be square, got {:?}", logits.dim())));
    }
    if n < 2 {
        return Err(NnError::BatchTooSmall(n));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(NnError::NonFiniteInput);
    }
    let include = variant == ContrastiveVariant::IncludePositive;
    // Row-wise (music -> text) and column-wise (text -> music) softmax over
    // the allowed denominator entries.
    let mut row_p = Mat::zeros((n, n));
    let mut col_p = Mat::zeros((n, n));
    let mut total = 0.0;
    for i in 0..n {
        let allowed = |j: &usize| include || *j != i;
        let row: Vec<f64> = (0..n).filter(allowed).map(|j| logits[[i, j]]).collect();
        let col: Vec<f64> = (0..n).filter(allowed).map(|j| logits[[j, i]]).collect();
        let row_lse = log_sum_exp(row.iter());
        let col_lse = log_sum_exp(col.iter());
        total += (logits[[i, i]] - row_lse) + (logits[[i, i]] - col_lse);
        for j in (0..n).filter(allowed) {
            row_p[[i, j]] = (logits[[i, j]] - row_lse).exp();
            col_p[[j, i]] = (logits[[j, i]] - col_lse).exp();
        }
    }
    let coef = -1.0 / (2.0 * n as f64);
    let loss = coef * total;
    // d/ds_ij of the summed log terms: 2·δ_ij − P_row_ij − P_col_ij.
    let mut grad = -(row_p + col_p);
    for i in 0..n {
        grad[[i, i]] += 2.0;
    }
    grad *= coef;
    Ok((loss, grad))
}

/// Row-stacks equally wide matrices.
pub fn stack_rows(parts: &[Array2<f64>]) -> Mat {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal widths")
}
