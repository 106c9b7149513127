//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters live
//! in a [`ParamStore`] outside the graph; a graph borrows the store, and each
//! parameter maps to exactly one graph node no matter how often it is used,
//! so gradients of shared weights accumulate in one place.

use std::collections::HashMap;

use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    /// Subject to decoupled weight decay.
    pub decay: bool,
    pub trainable: bool,
}

/// Named, ordered collection of model weights.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on duplicate names; layer construction is static, so a
    /// duplicate is a programming error.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            decay,
            trainable: true,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Sets the trainable flag of every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Additive masking pattern for row softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    None,
    /// Row `i` may attend to columns `0..=i`.
    Causal,
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Gather {
        x: Var,
        index: Vec<Option<usize>>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Matrix,
    },
    Sum(Var),
}

struct Node {
    value: Matrix,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// An input. Gradients flow into it and can be read back with
    /// [`Gradients::of`], but nothing is updated.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param);
        self.param_nodes.insert(id, v);
        v
    }

    /// The graph node of a parameter, if the forward pass touched it.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.param_nodes.get(&id).copied()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "sub shape");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let value = Matrix::from_vec(x.rows(), x.cols(), data);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Matrix::from_vec(x.rows(), x.cols(), data);
        self.push(value, Op::Mul(a, b))
    }

    /// Adds the `1 × c` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (x, b) = (self.value(a), self.value(bias));
        assert_eq!(b.rows(), 1, "bias must be a single row");
        assert_eq!(x.cols(), b.cols(), "bias width");
        let mut value = x.clone();
        for r in 0..value.rows() {
            for (v, bb) in value.row_mut(r).iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        self.push(value, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a))
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let (g, b) = (self.value(gamma), self.value(beta));
        assert_eq!(g.shape(), (1, cols), "layer norm gamma");
        assert_eq!(b.shape(), (1, cols), "layer norm beta");
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat.set(r, c, h);
                out.set(r, c, h * g.data()[c] + b.data()[c]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Row-wise softmax. Masked entries are exactly zero.
    pub fn softmax(&mut self, x: Var, mask: Mask) -> Var {
        let value = softmax_rows(self.value(x), mask);
        self.push(value, Op::Softmax(x))
    }

    /// Builds an `rows × cols` matrix whose flat entry `k` is `x[index[k]]`
    /// (flat row-major index into `x`), or zero for `None`.
    pub fn gather(&mut self, x: Var, rows: usize, cols: usize, index: Vec<Option<usize>>) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index length");
        let src = self.value(x).data();
        let data = index
            .iter()
            .map(|i| i.map_or(0.0, |i| src[i]))
            .collect();
        let value = Matrix::from_vec(rows, cols, data);
        self.push(value, Op::Gather { x, index })
    }

    /// Selects whole rows of `x`.
    pub fn rows(&mut self, x: Var, which: &[usize]) -> Var {
        let cols = self.value(x).cols();
        let index = which
            .iter()
            .flat_map(|&r| (0..cols).map(move |c| Some(r * cols + c)))
            .collect();
        self.gather(x, which.len(), cols, index)
    }

    /// Selects the column range `start..end` of `x`.
    pub fn cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let (rows, cols) = self.value(x).shape();
        assert!(start <= end && end <= cols, "column range");
        let width = end - start;
        let index = (0..rows)
            .flat_map(|r| (start..end).map(move |c| Some(r * cols + c)))
            .collect();
        self.gather(x, rows, width, index)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.value(p).rows(), rows, "concat_cols row count");
                self.value(p).cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Matrix::zeros(rows, total);
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + w].copy_from_slice(src.row(r));
            }
            offset += w;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows column count");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Summed softmax cross-entropy over the rows whose target is `Some`.
    /// Returns a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target per logit row");
        let probs = softmax_rows(lv, Mask::None);
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                loss -= log_softmax_at(lv.row(r), t);
            }
        }
        self.push(
            Matrix::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// Mean of equally shaped nodes.
    pub fn mean(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "mean of nothing");
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        self.scale(acc, 1.0 / parts.len() as f64)
    }

    /// Reverse pass from the scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(
            self.value(output).shape(),
            (1, 1),
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::scalar(1.0));

        for i in (0..=output.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                // Leaves and parameters keep their gradient for the caller.
                Op::Leaf | Op::Param => grads[i] = Some(dy),
                Op::MatMul(a, b) => {
                    let da = dy.matmul_t(self.value(*b));
                    let db = self.value(*a).t_matmul(&dy);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    // y = a bᵀ: da = dy b, db = dyᵀ a
                    let da = dy.matmul(self.value(*b));
                    let db = dy.t_matmul(self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, dy.map(|x| -x));
                    accumulate(&mut grads, *a, dy);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = elementwise(&dy, bv, |g, y| g * y);
                    let db = elementwise(&dy, av, |g, x| g * x);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRow(a, bias) => {
                    let mut db = Matrix::zeros(1, dy.cols());
                    for r in 0..dy.rows() {
                        for (acc, g) in db.data_mut().iter_mut().zip(dy.row(r)) {
                            *acc += g;
                        }
                    }
                    accumulate(&mut grads, *bias, db);
                    accumulate(&mut grads, *a, dy);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, *a, dy.map(|g| g * s));
                }
                Op::Gelu(a) => {
                    let da = elementwise(&dy, self.value(*a), |g, x| g * gelu_grad(x));
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = xhat.shape();
                    let g = self.value(*gamma);
                    let mut dgamma = Matrix::zeros(1, cols);
                    let mut dbeta = Matrix::zeros(1, cols);
                    let mut dx = Matrix::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let dyr = dy.row(r);
                        let xr = xhat.row(r);
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for c in 0..cols {
                            dgamma.data_mut()[c] += dyr[c] * xr[c];
                            dbeta.data_mut()[c] += dyr[c];
                            let dxh = dyr[c] * g.data()[c];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xr[c];
                        }
                        let inv = inv_std[r];
                        for c in 0..cols {
                            let dxh = dyr[c] * g.data()[c];
                            dx.set(
                                r,
                                c,
                                inv / n * (n * dxh - sum_dxhat - xr[c] * sum_dxhat_xhat),
                            );
                        }
                    }
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), dy.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (c, out) in dx.row_mut(r).iter_mut().enumerate() {
                            *out = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gather { x, index } => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut dx = Matrix::zeros(rows, cols);
                    let dst = dx.data_mut();
                    for (k, i) in index.iter().enumerate() {
                        if let Some(i) = *i {
                            dst[i] += dy.data()[k];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, w) = self.value(p).shape();
                        let mut dp = Matrix::zeros(rows, w);
                        for r in 0..rows {
                            dp.row_mut(r)
                                .copy_from_slice(&dy.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        accumulate(&mut grads, p, dp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.value(p).shape();
                        let slice = &dy.data()[offset * cols..(offset + rows) * cols];
                        offset += rows;
                        accumulate(&mut grads, p, Matrix::from_vec(rows, cols, slice.to_vec()));
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let g = dy.item();
                    let mut dl = Matrix::zeros(probs.rows(), probs.cols());
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for (c, out) in dl.row_mut(r).iter_mut().enumerate() {
                                let onehot = if c == t { 1.0 } else { 0.0 };
                                *out = g * (probs.get(r, c) - onehot);
                            }
                        }
                    }
                    accumulate(&mut grads, *logits, dl);
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Matrix::filled(rows, cols, dy.item()));
                }
            }
        }

        let params = self
            .param_nodes
            .iter()
            .filter_map(|(&id, &v)| grads[v.0].clone().map(|g| (id, g)))
            .collect();
        Gradients {
            nodes: grads,
            params,
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn elementwise(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

/// Row softmax; masked entries are exactly `0.0` and never enter the sums.
pub fn softmax_rows(x: &Matrix, mask: Mask) -> Matrix {
    let (rows, cols) = x.shape();
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let visible = match mask {
            Mask::None => cols,
            Mask::Causal => (r + 1).min(cols),
        };
        let row = &x.row(r)[..visible];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let dst = out.row_mut(r);
        for (o, &v) in dst.iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in &mut dst[..visible] {
            *o /= total;
        }
    }
    out
}

pub fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[target] - lse
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: HashMap<ParamId, Matrix>,
}

impl Gradients {
    /// Gradient reaching an input or parameter node.
    pub fn of(&self, v: Var) -> Option<&Matrix> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.get(&id)
    }

    pub fn into_params(self) -> HashMap<ParamId, Matrix> {
        self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    /// Central differences of `f` w.r.t. every entry of input `which`.
    fn numeric_grad(
        inputs: &[Matrix],
        which: usize,
        f: &dyn Fn(&mut Graph, &[Var]) -> Var,
    ) -> Matrix {
        let store = ParamStore::new();
        let h = 1e-6;
        let eval = |ms: &[Matrix]| {
            let mut g = Graph::new(&store);
            let vars: Vec<Var> = ms.iter().map(|m| g.input(m.clone())).collect();
            let out = f(&mut g, &vars);
            g.value(out).item()
        };
        let mut grad = Matrix::zeros(inputs[which].rows(), inputs[which].cols());
        for k in 0..inputs[which].len() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[k] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[k] -= h;
            grad.data_mut()[k] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        grad
    }

    fn check(inputs: Vec<Matrix>, f: &dyn Fn(&mut Graph, &[Var]) -> Var) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = inputs.iter().map(|m| g.input(m.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        for (i, &v) in vars.iter().enumerate() {
            let analytic = grads.of(v).cloned().unwrap_or_else(|| {
                Matrix::zeros(inputs[i].rows(), inputs[i].cols())
            });
            let numeric = numeric_grad(&inputs, i, f);
            let diff = analytic.max_abs_diff(&numeric);
            assert!(diff < 1e-6, "input {i}: max diff {diff}");
        }
    }

    #[test]
    fn matmul_and_bias_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![random(3, 4, &mut rng), random(4, 2, &mut rng), random(1, 2, &mut rng)];
        check(inputs, &|g, v| {
            let y = g.matmul(v[0], v[1]);
            let y = g.add_row(y, v[2]);
            let y = g.gelu(y);
            g.sum(y)
        });
    }

    #[test]
    fn matmul_t_and_softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![random(3, 4, &mut rng), random(3, 4, &mut rng), random(3, 3, &mut rng)];
        check(inputs, &|g, v| {
            let s = g.matmul_t(v[0], v[1]);
            let p = g.softmax(s, Mask::Causal);
            let w = g.mul(p, v[2]);
            g.sum(w)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![random(3, 5, &mut rng), random(1, 5, &mut rng), random(1, 5, &mut rng), random(3, 5, &mut rng)];
        check(inputs, &|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]);
            let w = g.mul(y, v[3]);
            g.sum(w)
        });
    }

    #[test]
    fn gather_concat_and_cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = vec![random(2, 3, &mut rng), random(2, 2, &mut rng), random(3, 5, &mut rng)];
        check(inputs, &|g, v| {
            let c = g.concat_cols(&[v[0], v[1]]);
            let r = g.concat_rows(&[c, c]);
            let picked = g.rows(r, &[0, 3, 1]);
            let t = g.cols(picked, 1, 4);
            let t2 = g.transpose_like(t);
            let logits = g.matmul(t2, v[2]);
            let d = g.sub(logits, logits);
            let logits = g.add(logits, d);
            let logits = g.scale(logits, 0.7);
            g.cross_entropy(logits, vec![Some(2), None, Some(0)])
        });
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::from_rows(&[vec![2.0]]), false);
        let mut g = Graph::new(&store);
        let a = g.param(w);
        let b = g.param(w);
        assert_eq!(a, b);
        let y = g.mul(a, b);
        let grads = g.backward(y);
        assert_eq!(grads.param(w).unwrap().item(), 4.0);
    }

    #[test]
    fn causal_softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(5, 5, &mut rng);
        let p = softmax_rows(&x, Mask::Causal);
        for r in 0..5 {
            let s: f64 = p.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(p.row(r)[r + 1..].iter().all(|&v| v == 0.0));
        }
    }

    impl Graph<'_> {
        // 3x3 transpose through gather, exercising arbitrary index maps.
        fn transpose_like(&mut self, x: Var) -> Var {
            let (rows, cols) = self.shape(x);
            let index = (0..cols)
                .flat_map(|c| (0..rows).map(move |r| Some(r * cols + c)))
                .collect();
            self.gather(x, cols, rows, index)
        }
    }
}
