//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value is a 2-D matrix; scalars are `1 × 1`. A [`Tape`] records the
//! forward computation and [`Tape::backward`] walks it in reverse. Parameters
//! enter the tape through [`Tape::param`]; frozen parameters become constants.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Additive pre-softmax mask value. `exp` of this underflows to exactly zero.
pub const MASK_NEG: f64 = -1e9;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    Sum(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    Bce { p: Var, targets: Vec<f64>, active: Vec<bool>, denom: f64, clamp: f64 },
    CrossEntropy { logits: Var, targets: Vec<usize>, active: Vec<bool>, probs: Mat },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Recorded computation bound to a parameter store.
pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` was on a gradient path.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every trainable parameter that received one.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.params
            .iter()
            .filter_map(|(id, node)| self.nodes[*node].as_ref().map(|g| (*id, g)))
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, node)| self.nodes[*node].as_ref())
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    /// A constant input. No gradient flows into it.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input that is not a stored parameter.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// The parameter `id`, placed on the tape once and reused afterwards.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let p = self.store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, !p.frozen);
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMulT(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    /// `a + row` with `row` of shape `1 × cols(a)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        assert_eq!(self.shape(a).1, self.shape(row).1, "add_row width");
        let v = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    /// `a ⊙ row` with `row` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        assert_eq!(self.shape(a).1, self.shape(row).1, "mul_row width");
        let v = self.value(a) * self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::MulRow(a, row), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, k), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise standardisation `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let mut v = self.value(x).clone();
        let mut inv_std = Vec::with_capacity(v.nrows());
        for mut row in v.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.fold(0.0, |acc, &x| acc + (x - mean) * (x - mean)) / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|x| (x - mean) * is);
            inv_std.push(is);
        }
        let rg = self.rg(x);
        self.push(v, Op::LayerNorm { x, inv_std }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| gelu_parts(x).0);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        let rg = self.rg(a);
        self.push(v, Op::Log(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        self.push(v, Op::SliceCols(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols rows agree");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows cols agree");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Rows of `table` selected by `indices`, in order.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let v = self.value(table).select(Axis(0), indices);
        let rg = self.rg(table);
        self.push(v, Op::Gather(table, indices.to_vec()), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        let mut norms = Vec::with_capacity(v.nrows());
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt().max(1e-12);
            row.mapv_inplace(|x| x / n);
            norms.push(n);
        }
        let rg = self.rg(x);
        self.push(v, Op::L2NormalizeRows { x, norms }, rg)
    }

    /// Mean binary cross-entropy of probabilities `p` (`n × 1`) against
    /// `targets`, over rows where `active` is true. Probabilities are clamped
    /// to `[clamp, 1 - clamp]`; clamped entries pass no gradient.
    pub fn bce_mean(&mut self, p: Var, targets: &[f64], active: &[bool], clamp: f64) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.dim(), (targets.len(), 1));
        assert_eq!(active.len(), targets.len());
        let count = active.iter().filter(|a| **a).count();
        let denom = count.max(1) as f64;
        let mut total = 0.0;
        for i in 0..targets.len() {
            if !active[i] {
                continue;
            }
            let pi = pv[[i, 0]].clamp(clamp, 1.0 - clamp);
            let y = targets[i];
            total -= y * pi.ln() + (1.0 - y) * (1.0 - pi).ln();
        }
        let rg = self.rg(p);
        self.push(
            Array2::from_elem((1, 1), total / denom),
            Op::Bce {
                p,
                targets: targets.to_vec(),
                active: active.to_vec(),
                denom,
                clamp,
            },
            rg,
        )
    }

    /// Summed negative log-likelihood of `targets[i]` under `softmax(logits[i])`
    /// over rows where `active` is true.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize], active: &[bool]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        assert_eq!(active.len(), targets.len());
        let mut probs = lv.clone();
        let mut total = 0.0;
        for (i, mut row) in probs.rows_mut().into_iter().enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.fold(0.0, |acc, &x| acc + (x - max).exp()).ln();
            if active[i] {
                total += lse - row[targets[i]];
            }
            row.mapv_inplace(|x| (x - lse).exp());
        }
        let rg = self.rg(logits);
        self.push(
            Array2::from_elem((1, 1), total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                active: active.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Gradients of the scalar `loss` with respect to every node on its path.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let rg = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if rg(*a) {
                        accumulate(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if rg(*b) {
                        accumulate(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if rg(*a) {
                        accumulate(&mut grads, *a, g.dot(self.value(*b)));
                    }
                    if rg(*b) {
                        accumulate(&mut grads, *b, g.t().dot(self.value(*a)));
                    }
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    if rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if rg(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if rg(*b) {
                        accumulate(&mut grads, *b, -&g);
                    }
                }
                Op::AddRow(a, row) => {
                    if rg(*row) {
                        accumulate(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::MulRow(a, row) => {
                    if rg(*row) {
                        let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *row, gr);
                    }
                    if rg(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*row));
                    }
                }
                Op::Mul(a, b) => {
                    if rg(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*b));
                    }
                    if rg(*b) {
                        accumulate(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, g * *k),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut dx = &g * y;
                    for (mut row, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let s = row.sum();
                        Zip::from(&mut row).and(&yrow).for_each(|d, &yv| *d -= yv * s);
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::LayerNorm { x, inv_std } => {
                    let xhat = &node.value;
                    let mut dx = g.clone();
                    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let n = row.len() as f64;
                        let xr = xhat.row(i);
                        let mean_g = row.sum() / n;
                        let mean_gx = row.dot(&xr) / n;
                        Zip::from(&mut row).and(&xr).for_each(|d, &xh| {
                            *d = inv_std[i] * (*d - mean_g - xh * mean_gx);
                        });
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gelu(a) => {
                    let dx = Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&gi, &x| gi * gelu_parts(x).1);
                    accumulate(&mut grads, *a, dx);
                }
                Op::Sigmoid(a) => {
                    let dx = Zip::from(&g)
                        .and(&node.value)
                        .map_collect(|&gi, &y| gi * y * (1.0 - y));
                    accumulate(&mut grads, *a, dx);
                }
                Op::Exp(a) => accumulate(&mut grads, *a, &g * &node.value),
                Op::Log(a) => accumulate(&mut grads, *a, &g / self.value(*a)),
                Op::SliceCols(a, start) => {
                    let mut full = Array2::zeros(self.shape(*a));
                    full.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *a, full);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        if rg(*p) {
                            accumulate(&mut grads, *p, g.slice(s![.., off..off + w]).to_owned());
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.shape(*p).0;
                        if rg(*p) {
                            accumulate(&mut grads, *p, g.slice(s![off..off + h, ..]).to_owned());
                        }
                        off += h;
                    }
                }
                Op::Gather(table, indices) => {
                    let mut full = Array2::zeros(self.shape(*table));
                    for (r, &i) in indices.iter().enumerate() {
                        let mut dst = full.row_mut(i);
                        dst += &g.row(r);
                    }
                    accumulate(&mut grads, *table, full);
                }
                Op::Sum(a) => {
                    let k = g[[0, 0]];
                    accumulate(&mut grads, *a, Array2::from_elem(self.shape(*a), k));
                }
                Op::L2NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let mut dx = g.clone();
                    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let yr = y.row(i);
                        let proj = row.dot(&yr);
                        Zip::from(&mut row)
                            .and(&yr)
                            .for_each(|d, &yv| *d = (*d - yv * proj) / norms[i]);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Bce {
                    p,
                    targets,
                    active,
                    denom,
                    clamp,
                } => {
                    let k = g[[0, 0]];
                    let pv = self.value(*p);
                    let clamp = *clamp;
                    let mut dp = Array2::zeros(pv.dim());
                    for i in 0..targets.len() {
                        let pi = pv[[i, 0]];
                        if !active[i] || pi < clamp || pi > 1.0 - clamp {
                            continue;
                        }
                        let y = targets[i];
                        dp[[i, 0]] = -k * (y / pi - (1.0 - y) / (1.0 - pi)) / denom;
                    }
                    accumulate(&mut grads, *p, dp);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    active,
                    probs,
                } => {
                    let k = g[[0, 0]];
                    let mut dl = probs.clone();
                    for (i, mut row) in dl.rows_mut().into_iter().enumerate() {
                        if active[i] {
                            row[targets[i]] -= 1.0;
                            row.mapv_inplace(|x| x * k);
                        } else {
                            row.fill(0.0);
                        }
                    }
                    accumulate(&mut grads, *logits, dl);
                }
            }
        }

        let params = self.params.iter().map(|(id, v)| (*id, v.0)).collect();
        Gradients {
            nodes: grads,
            params,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
