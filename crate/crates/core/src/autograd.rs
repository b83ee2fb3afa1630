//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices. Every value is 2-D; scalars are `1x1` and vectors are `1xn` rows.
//!
//! Shape mismatches are programming errors and panic.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Optimizer parameter groups with separate learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Encoder,
    Head,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Mat,
    pub group: ParamGroup,
}

/// Named, ordered parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat, group: ParamGroup) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        self.params.push(Param { name, value, group });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Sqrt(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Rows {
        src: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Cols {
        src: Var,
        start: usize,
    },
    MeanRows(Var),
    SumAll(Var),
    L2NormRows {
        x: Var,
        norms: Vec<f64>,
        clamped: Vec<bool>,
    },
    Pick {
        x: Var,
        idx: Vec<(usize, usize)>,
    },
    Dropout {
        x: Var,
        mask: Mat,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "not a scalar");
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    pub fn row(&mut self, v: &[f64]) -> Var {
        self.constant(Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap())
    }

    /// Leaf bound to a stored parameter; each parameter enters the tape once.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// `a + b` with the `1xc` row `b` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(b).0, 1);
        assert_eq!(self.shape(a).1, self.shape(b).1, "add_row width mismatch");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddConst(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()));
        self.push(v, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push(v, Op::LogSoftmaxRows(a))
    }

    /// Row-wise layer normalization with learned `1xd` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let mut xhat = Array2::zeros((n, d));
        let mut inv_std = Vec::with_capacity(n);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for j in 0..d {
                xhat[[i, j]] = (row[j] - mean) * is;
            }
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
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

    /// Gathers rows by index (repeats allowed).
    pub fn rows(&mut self, src: Var, ids: &[usize]) -> Var {
        let sv = self.value(src);
        let v = sv.select(Axis(0), ids);
        self.push(
            v,
            Op::Rows {
                src,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn row_range(&mut self, src: Var, start: usize, len: usize) -> Var {
        let ids: Vec<usize> = (start..start + len).collect();
        self.rows(src, &ids)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows width mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols height mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn cols(&mut self, src: Var, start: usize, len: usize) -> Var {
        let v = self.value(src).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::Cols { src, start })
    }

    /// Column-wise mean over rows, giving a `1xc` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    /// Sum of `1x1` scalars; `0` for an empty list.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        match terms {
            [] => self.scalar_const(0.0),
            [first, rest @ ..] => rest.iter().fold(*first, |acc, t| self.add(acc, *t)),
        }
    }

    /// Mean of `1x1` scalars; `0` for an empty list.
    pub fn mean_all(&mut self, terms: &[Var]) -> Var {
        if terms.is_empty() {
            return self.scalar_const(0.0);
        }
        let s = self.add_all(terms);
        self.scale(s, 1.0 / terms.len() as f64)
    }

    /// Divides each row by its L2 norm. Fails on a zero row.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var, String> {
        let mut v = self.value(x).clone();
        let mut norms = Vec::with_capacity(v.nrows());
        for (i, mut row) in v.rows_mut().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if !(n > 0.0 && n.is_finite()) {
                return Err(format!("row {i} has norm {n}"));
            }
            row.mapv_inplace(|a| a / n);
            norms.push(n);
        }
        let clamped = vec![false; norms.len()];
        Ok(self.push(v, Op::L2NormRows { x, norms, clamped }))
    }

    /// `x / max(||x||, eps)` per row, so zero rows map to zero. Fails only on
    /// non-finite norms.
    pub fn l2_normalize_rows_eps(&mut self, x: Var, eps: f64) -> Result<Var, String> {
        let mut v = self.value(x).clone();
        let mut norms = Vec::with_capacity(v.nrows());
        let mut clamped = Vec::with_capacity(v.nrows());
        for (i, mut row) in v.rows_mut().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if !n.is_finite() {
                return Err(format!("row {i} has norm {n}"));
            }
            let div = n.max(eps);
            row.mapv_inplace(|a| a / div);
            norms.push(div);
            clamped.push(n < eps);
        }
        Ok(self.push(v, Op::L2NormRows { x, norms, clamped }))
    }

    /// Sum of the selected `(row, col)` entries, as a scalar.
    pub fn pick_sum(&mut self, x: Var, idx: &[(usize, usize)]) -> Var {
        let xv = self.value(x);
        let total: f64 = idx.iter().map(|&(r, c)| xv[[r, c]]).sum();
        self.push(
            Array2::from_elem((1, 1), total),
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let shape = self.shape(x);
        let mask = Array2::from_shape_fn(shape, |_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let v = self.value(x) * &mask;
        self.push(v, Op::Dropout { x, mask })
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be a scalar");
        self.backward_with(&[(root, Array2::from_elem((1, 1), 1.0))])
    }

    /// Reverse pass seeded with explicit output gradients.
    pub fn backward_with(&self, seeds: &[(Var, Mat)]) -> Gradients {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (v, g) in seeds {
            assert_eq!(self.shape(*v), g.dim(), "seed gradient shape");
            accumulate(&mut grads, *v, g.clone());
            top = top.max(v.0);
        }
        for i in (0..=top).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.dot(&val(*b).t()));
                accumulate(grads, *b, val(*a).t().dot(g));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g * val(*b));
                accumulate(grads, *b, g * val(*a));
            }
            Op::AddRow(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, s) => accumulate(grads, *a, g * *s),
            Op::AddConst(a) => accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*a), |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                accumulate(grads, *a, d);
            }
            Op::Gelu(a) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*a), |d, &x| {
                    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
                    let dx = 0.5 * (1.0 + t)
                        + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x);
                    *d *= dx;
                });
                accumulate(grads, *a, d);
            }
            Op::Exp(a) => accumulate(grads, *a, g * &node.value),
            Op::Sqrt(a) => {
                let mut d = g.clone();
                d.zip_mut_with(&node.value, |d, &y| *d *= 0.5 / y);
                accumulate(grads, *a, d);
            }
            Op::Transpose(a) => accumulate(grads, *a, g.t().to_owned()),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = g * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let s = drow.sum();
                    drow.zip_mut_with(&yrow, |dv, &yv| *dv -= yv * s);
                }
                accumulate(grads, *a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut d = g.clone();
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let s = drow.sum();
                    drow.zip_mut_with(&yrow, |dv, &yv| *dv -= yv.exp() * s);
                }
                accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                accumulate(
                    grads,
                    *gamma,
                    (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                );
                let dxhat = g * val(*gamma);
                let d = xhat.ncols() as f64;
                let mut dx = Array2::zeros(xhat.dim());
                for i in 0..xhat.nrows() {
                    let dh = dxhat.row(i);
                    let xh = xhat.row(i);
                    let sum_dh = dh.sum();
                    let sum_dh_xh = dh.dot(&xh);
                    for j in 0..xhat.ncols() {
                        dx[[i, j]] =
                            inv_std[i] / d * (d * dh[j] - sum_dh - xh[j] * sum_dh_xh);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Rows { src, ids } => {
                let mut d = Array2::zeros(val(*src).dim());
                for (r, &id) in ids.iter().enumerate() {
                    let mut dst = d.row_mut(id);
                    dst += &g.row(r);
                }
                accumulate(grads, *src, d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(*p).nrows();
                    accumulate(grads, *p, g.slice(s![off..off + n, ..]).to_owned());
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(*p).ncols();
                    accumulate(grads, *p, g.slice(s![.., off..off + n]).to_owned());
                    off += n;
                }
            }
            Op::Cols { src, start } => {
                let mut d = Array2::zeros(val(*src).dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                accumulate(grads, *src, d);
            }
            Op::MeanRows(a) => {
                let n = val(*a).nrows();
                let row = g.row(0).mapv(|x| x / n as f64);
                let d = row.broadcast((n, g.ncols())).unwrap().to_owned();
                accumulate(grads, *a, d);
            }
            Op::SumAll(a) => {
                accumulate(grads, *a, Array2::from_elem(val(*a).dim(), g[[0, 0]]));
            }
            Op::L2NormRows { x, norms, clamped } => {
                let y = &node.value;
                let mut d = g.clone();
                for (i, mut drow) in d.rows_mut().into_iter().enumerate() {
                    if clamped[i] {
                        drow.mapv_inplace(|dv| dv / norms[i]);
                        continue;
                    }
                    let yrow = y.row(i);
                    let s = drow.dot(&yrow);
                    drow.zip_mut_with(&yrow, |dv, &yv| *dv = (*dv - yv * s) / norms[i]);
                }
                accumulate(grads, *x, d);
            }
            Op::Pick { x, idx } => {
                let mut d = Array2::zeros(val(*x).dim());
                for &(r, c) in idx {
                    d[[r, c]] += g[[0, 0]];
                }
                accumulate(grads, *x, d);
            }
            Op::Dropout { x, mask } => accumulate(grads, *x, g * mask),
        }
    }

    /// Parameters that entered this tape, in first-use order.
    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        let mut v: Vec<_> = self.params.iter().map(|(p, v)| (*p, *v)).collect();
        v.sort_by_key(|(_, var)| var.0);
        v.into_iter()
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient per stored parameter (zeros for parameters the root does not reach).
    pub fn for_params(&self, graph: &Graph, store: &ParamStore) -> Vec<Mat> {
        let mut out: Vec<Mat> = store
            .iter()
            .map(|(_, p)| Array2::zeros(p.value.dim()))
            .collect();
        for (pid, var) in graph.param_vars() {
            if let Some(g) = self.get(var) {
                out[pid.0] += g;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of d f / d inputs for a scalar-valued tape builder.
    fn check(inputs: Vec<Mat>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let build = |vals: &[Mat]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|m| g.constant(m.clone())).collect();
            let out = f(&mut g, &vars);
            (g, vars, out)
        };
        let (g, vars, out) = build(&inputs);
        let grads = g.backward(out);
        let eps = 1e-6;
        for (k, m) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[k])
                .cloned()
                .unwrap_or_else(|| Array2::zeros(m.dim()));
            for idx in 0..m.len() {
                let mut plus = inputs.clone();
                let mut minus = inputs.clone();
                plus[k].as_slice_mut().unwrap()[idx] += eps;
                minus[k].as_slice_mut().unwrap()[idx] -= eps;
                let (gp, _, op) = build(&plus);
                let (gm, _, om) = build(&minus);
                let numeric = (gp.scalar(op) - gm.scalar(om)) / (2.0 * eps);
                let a = analytic.as_slice().unwrap()[idx];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "input {k} entry {idx}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn grad_matmul_add_row_gelu() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let inputs = vec![rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 4, 2), rand_mat(&mut rng, 1, 2)];
        check(inputs, |g, v| {
            let m = g.matmul(v[0], v[1]);
            let a = g.add_row(m, v[2]);
            let h = g.gelu(a);
            g.sum(h)
        });
    }

    #[test]
    fn grad_softmax_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_mat(&mut rng, 3, 5);
        let inputs = vec![rand_mat(&mut rng, 3, 5)];
        check(inputs, move |g, v| {
            let s = g.softmax_rows(v[0]);
            let l = g.log_softmax_rows(v[0]);
            let e = g.exp(l);
            let wc = g.constant(w.clone());
            let a = g.mul(s, wc);
            let b = g.mul(e, l);
            let c = g.add(a, b);
            g.sum(c)
        });
    }

    #[test]
    fn grad_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = rand_mat(&mut rng, 2, 6);
        let inputs = vec![rand_mat(&mut rng, 2, 6), rand_mat(&mut rng, 1, 6), rand_mat(&mut rng, 1, 6)];
        check(inputs, move |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]);
            let wc = g.constant(w.clone());
            let p = g.mul(y, wc);
            g.sum(p)
        });
    }

    #[test]
    fn grad_structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![rand_mat(&mut rng, 4, 3), rand_mat(&mut rng, 2, 3)];
        check(inputs, |g, v| {
            let r = g.rows(v[0], &[3, 0, 3]);
            let c = g.concat_rows(&[r, v[1]]);
            let t = g.transpose(c);
            let cc = g.concat_cols(&[t, t]);
            let sl = g.cols(cc, 2, 5);
            let m = g.mean_rows(sl);
            let sq = g.mul(m, m);
            let p = g.pick_sum(sl, &[(0, 1), (2, 4), (0, 1)]);
            let s = g.sum(sq);
            let sc = g.scale(s, 0.7);
            let ac = g.add_const(p, 3.0);
            let out = g.sub(sc, ac);
            let q = g.relu(out);
            g.add(q, out)
        });
    }

    #[test]
    fn grad_norms_and_sqrt() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = rand_mat(&mut rng, 3, 4);
        let inputs = vec![rand_mat(&mut rng, 3, 4)];
        check(inputs, move |g, v| {
            let n = g.l2_normalize_rows(v[0]).unwrap();
            let wc = g.constant(w.clone());
            let p = g.mul(n, wc);
            let s = g.sum(p);
            let sq = g.mul(v[0], v[0]);
            let t = g.sum(sq);
            let r = g.sqrt(t);
            g.add(s, r)
        });
    }

    #[test]
    fn dropout_mask_is_applied_in_both_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.constant(Array2::ones((10, 10)));
        let y = g.dropout(x, 0.5, &mut rng);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap(), g.value(y));
        assert!(g.value(y).iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn param_leaf_is_shared() {
        let mut store = ParamStore::new();
        let id = store.add("w", Array2::ones((2, 2)), ParamGroup::Head);
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let m = g.mul(a, b);
        let s = g.sum(m);
        let grads = g.backward(s).for_params(&g, &store);
        assert_eq!(grads[0], Array2::from_elem((2, 2), 2.0));
    }

    #[test]
    fn zero_row_normalization_fails() {
        let mut g = Graph::new();
        let x = g.constant(Array2::zeros((1, 3)));
        assert!(g.l2_normalize_rows(x).is_err());
    }

    #[test]
    fn clamped_normalization_passes_zero_rows() {
        let mut g = Graph::new();
        let x = g.constant(Array2::from_shape_vec((2, 2), vec![0.0, 0.0, 3.0, 4.0]).unwrap());
        let y = g.l2_normalize_rows_eps(x, 1e-8).unwrap();
        assert_eq!(g.value(y).row(0).to_vec(), [0.0, 0.0]);
        assert_eq!(g.value(y).row(1).to_vec(), [0.6, 0.8]);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().row(0).to_vec(), [1e8, 1e8]);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = rand_mat(&mut rng, 3, 4);
        check(vec![rand_mat(&mut rng, 3, 4)], move |g, v| {
            let n = g.l2_normalize_rows_eps(v[0], 1e-8).unwrap();
            let wc = g.constant(w.clone());
            let p = g.mul(n, wc);
            g.sum(p)
        });
    }
}
