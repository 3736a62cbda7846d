//! Reverse-mode differentiation over a tape of 2-D matrix operations.
//!
//! Every model forward pass records its operations on a [`Tape`]; calling
//! [`Tape::backward`] on a scalar node returns gradients for every node that
//! depends on a leaf created with `requires_grad`. Parameter leaves borrow
//! their storage, so binding a model to a tape does not copy weights.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::real::Real;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'p, F> {
    Owned(Array2<F>),
    Borrowed(&'p Array2<F>),
}

impl<F> Value<'_, F> {
    fn view(&self) -> ArrayView2<'_, F> {
        match self {
            Value::Owned(a) => a.view(),
            Value::Borrowed(a) => a.view(),
        }
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<F>,
        rstd: Vec<F>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Array2<F>>,
    },
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    Scatter {
        visible: Var,
        fill: Var,
        visible_idx: Vec<usize>,
    },
    MaskedMse {
        pred: Var,
        target: Array2<F>,
        rows: Vec<usize>,
    },
}

struct Node<'p, F> {
    value: Value<'p, F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Array2<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, var: Var) -> Option<&Array2<F>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Array2<F>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

pub struct Tape<'p, F: Real> {
    nodes: Vec<Node<'p, F>>,
}

impl<F: Real> Default for Tape<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, F: Real> Tape<'p, F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf that borrows its storage.
    pub fn param(&mut self, value: &'p Array2<F>) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(value),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients (inputs, positional tables).
    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, F> {
        self.nodes[v.0].value.view()
    }

    pub fn scalar(&self, v: Var) -> F {
        self.value(v)[[0, 0]]
    }

    /// Per-head attention weights recorded by an [`Tape::attention`] node.
    pub fn attention_weights(&self, v: Var) -> Option<&[Array2<F>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) + &self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// `a` (n×m) plus the single row `b` (1×m) broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) + &self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::AddRow(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) * &self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// `a` (n×m) scaled row-wise by the column `c` (n×1).
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let out = &self.value(a) * &self.value(c);
        let rg = self.rg(a) || self.rg(c);
        self.push(out, Op::MulCol(a, c), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// Row-wise layer normalization with affine parameters `gamma`, `beta` (1×m).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, m) = xv.dim();
        let inv_m = F::lit(1.0 / m as f64);
        let mut xhat = Array2::<F>::zeros((n, m));
        let mut rstd = Vec::with_capacity(n);
        for (row, mut out) in xv.outer_iter().zip(xhat.outer_iter_mut()) {
            let mean = row.sum() * inv_m;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_m;
            let r = F::one() / (var + F::lit(eps)).sqrt();
            Zip::from(&mut out).and(&row).for_each(|o, &v| *o = (v - mean) * r);
            rstd.push(r);
        }
        let out = &xhat * &self.value(gamma) + &self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is n×w, `k` and `v` are m×w; the width is split evenly across
    /// `heads`. Each query's weights over the m keys form a softmax.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, w) = qv.dim();
        let m = kv.nrows();
        assert!(heads > 0 && w % heads == 0, "width {w} not divisible by {heads} heads");
        assert_eq!(kv.dim(), (m, w), "key shape");
        assert_eq!(vv.nrows(), m, "value rows");
        let dh = w / heads;
        let scale = F::lit(1.0 / (dh as f64).sqrt());
        let mut out = Array2::<F>::zeros((n, w));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = qv.slice(cols).dot(&kv.slice(cols).t());
            scores.mapv_inplace(|x| x * scale);
            softmax_rows(&mut scores);
            out.slice_mut(cols).assign(&scores.dot(&vv.slice(cols)));
            probs.push(scores);
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        )
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let out = ndarray::concatenate(Axis(0), &[self.value(a), self.value(b)])
            .expect("concat_rows: column counts differ");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::ConcatRows(a, b), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let out = ndarray::concatenate(Axis(1), &[self.value(a), self.value(b)])
            .expect("concat_cols: row counts differ");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::ConcatCols(a, b), rg)
    }

    /// Builds a `total`-row matrix: row `visible_idx[j]` is row `j` of
    /// `visible`, every other row is the single row `fill`.
    pub fn scatter(&mut self, visible: Var, fill: Var, visible_idx: &[usize], total: usize) -> Var {
        let vis = self.value(visible);
        let fv = self.value(fill);
        assert_eq!(vis.nrows(), visible_idx.len(), "scatter: row count");
        assert_eq!(fv.nrows(), 1, "scatter: fill must be a single row");
        let mut out = Array2::<F>::zeros((total, vis.ncols()));
        for mut row in out.outer_iter_mut() {
            row.assign(&fv.row(0));
        }
        for (j, &i) in visible_idx.iter().enumerate() {
            out.row_mut(i).assign(&vis.row(j));
        }
        let rg = self.rg(visible) || self.rg(fill);
        self.push(
            out,
            Op::Scatter {
                visible,
                fill,
                visible_idx: visible_idx.to_vec(),
            },
            rg,
        )
    }

    /// Mean squared error between `pred` and `target` restricted to `rows`.
    pub fn masked_mse(&mut self, pred: Var, target: Array2<F>, rows: &[usize]) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.dim(), target.dim(), "masked_mse: shape");
        assert!(!rows.is_empty(), "masked_mse: empty row set");
        let mut acc = F::zero();
        for &r in rows {
            for (&p, &t) in pv.row(r).iter().zip(target.row(r)) {
                acc += (p - t) * (p - t);
            }
        }
        let count = F::lit((rows.len() * pv.ncols()) as f64);
        let out = Array2::from_elem((1, 1), acc / count);
        let rg = self.rg(pred);
        self.push(
            out,
            Op::MaskedMse {
                pred,
                target,
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    /// Back-propagates from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::from_elem((1, 1), F::one()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node<'p, F>, g: &Array2<F>, grads: &mut [Option<Array2<F>>]) {
        let mut acc = |v: Var, d: Array2<F>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                if self.rg(*b) {
                    acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g * &self.value(*b));
                }
                if self.rg(*b) {
                    acc(*b, g * &self.value(*a));
                }
            }
            Op::MulCol(a, c) => {
                if self.rg(*a) {
                    acc(*a, g * &self.value(*c));
                }
                if self.rg(*c) {
                    let prod = g * &self.value(*a);
                    acc(*c, prod.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::Gelu(a) => {
                let mut d = self.value(*a).mapv(gelu_grad);
                d *= g;
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = node.value.view().mapv(|y| y * (F::one() - y));
                d *= g;
                acc(*a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                if self.rg(*gamma) {
                    acc(*gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*beta) {
                    acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*x) {
                    let dxhat = g * &self.value(*gamma);
                    let m = F::lit(xhat.ncols() as f64);
                    let mut dx = Array2::<F>::zeros(xhat.dim());
                    for (((mut out, dh), xh), &r) in dx
                        .outer_iter_mut()
                        .zip(dxhat.outer_iter())
                        .zip(xhat.outer_iter())
                        .zip(rstd)
                    {
                        let mean_d = dh.sum() / m;
                        let mean_dx = dh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>() / m;
                        Zip::from(&mut out)
                            .and(&dh)
                            .and(&xh)
                            .for_each(|o, &d, &xv| *o = r * (d - mean_d - xv * mean_dx));
                    }
                    acc(*x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let w = qv.ncols();
                let dh = w / heads;
                let scale = F::lit(1.0 / (dh as f64).sqrt());
                let mut dq = Array2::<F>::zeros(qv.dim());
                let mut dk = Array2::<F>::zeros(kv.dim());
                let mut dv = Array2::<F>::zeros(vv.dim());
                for (h, p) in probs.iter().enumerate() {
                    let cols = s![.., h * dh..(h + 1) * dh];
                    let go = g.slice(cols);
                    dv.slice_mut(cols).assign(&p.t().dot(&go));
                    let dp = go.dot(&vv.slice(cols).t());
                    // softmax Jacobian, row by row
                    let mut ds = &dp * p;
                    for (mut dsr, pr) in ds.outer_iter_mut().zip(p.outer_iter()) {
                        let total = dsr.sum();
                        Zip::from(&mut dsr).and(&pr).for_each(|d, &pv| *d = *d - pv * total);
                    }
                    ds.mapv_inplace(|x| x * scale);
                    dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                    dk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).nrows();
                acc(*a, g.slice(s![..na, ..]).to_owned());
                acc(*b, g.slice(s![na.., ..]).to_owned());
            }
            Op::ConcatCols(a, b) => {
                let na = self.value(*a).ncols();
                acc(*a, g.slice(s![.., ..na]).to_owned());
                acc(*b, g.slice(s![.., na..]).to_owned());
            }
            Op::Scatter {
                visible,
                fill,
                visible_idx,
            } => {
                let mut dvis = Array2::<F>::zeros((visible_idx.len(), g.ncols()));
                let mut is_visible = vec![false; g.nrows()];
                for (j, &i) in visible_idx.iter().enumerate() {
                    dvis.row_mut(j).assign(&g.row(i));
                    is_visible[i] = true;
                }
                acc(*visible, dvis);
                if self.rg(*fill) {
                    let mut dfill = Array2::<F>::zeros((1, g.ncols()));
                    for (row, vis) in g.outer_iter().zip(&is_visible) {
                        if !vis {
                            let mut d = dfill.row_mut(0);
                            d += &row;
                        }
                    }
                    acc(*fill, dfill);
                }
            }
            Op::MaskedMse { pred, target, rows } => {
                let pv = self.value(*pred);
                let count = (rows.len() * pv.ncols()) as f64;
                let coef = g[[0, 0]] * F::lit(2.0 / count);
                let mut d = Array2::<F>::zeros(pv.dim());
                for &r in rows {
                    Zip::from(d.row_mut(r))
                        .and(pv.row(r))
                        .and(target.row(r))
                        .for_each(|o, &p, &t| *o = coef * (p - t));
                }
                acc(*pred, d);
            }
        }
    }
}

pub(crate) fn softmax_rows<F: Real>(a: &mut Array2<F>) {
    for mut row in a.outer_iter_mut() {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<F: Real>(x: F) -> F {
    let u = F::lit(GELU_C) * (x + F::lit(GELU_A) * x * x * x);
    F::lit(0.5) * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let u = F::lit(GELU_C) * (x + F::lit(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = F::lit(GELU_C) * (F::one() + F::lit(3.0 * GELU_A) * x * x);
    F::lit(0.5) * (F::one() + t) + F::lit(0.5) * x * (F::one() - t * t) * du
}

pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}
