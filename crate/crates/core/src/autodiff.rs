//! A small reverse-mode differentiation tape over `f64` vectors.
//!
//! Every node holds a dense vector; matrices are vectors with a recorded
//! `(rows, cols)` shape and only appear as the weight operand of
//! [`Tape::vec_mat`], which computes `xᵀ W`. Scalars are length-1 vectors.
//! Nodes created with [`Tape::constant`] or [`Tape::detach`] stop gradients.

use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Concat(Var, Var),
    VecMat { x: Var, w: Var },
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Softplus(Var),
    Dot(Var, Var),
    Norm(Var),
    Sum(Var),
    Index(Var, usize),
    Stack(Vec<Var>),
    Softmax(Var),
    WeightedSum { weights: Var, items: Vec<Var> },
    Mean(Vec<Var>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Vec<f64>,
    rows: usize,
    op: Op,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn logistic(x: f64) -> f64 {
    sigmoid(x)
}

/// Max-subtracted softmax.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        let rows = value.len();
        self.push_shaped(value, rows, op)
    }

    fn push_shaped(&mut self, value: Vec<f64>, rows: usize, op: Op) -> Var {
        self.nodes.push(Node { value, rows, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1);
        val[0]
    }

    pub fn leaf(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(vec![value])
    }

    /// A trainable `rows × cols` matrix leaf.
    pub fn matrix_leaf(&mut self, m: &Matrix) -> Var {
        self.push_shaped(m.to_f64(), m.rows(), Op::Leaf)
    }

    pub fn matrix_leaf_raw(&mut self, rows: usize, data: Vec<f64>) -> Var {
        assert!(rows > 0 && data.len().is_multiple_of(rows));
        self.push_shaped(data, rows, Op::Leaf)
    }

    pub fn matrix_constant(&mut self, m: &Matrix) -> Var {
        self.push_shaped(m.to_f64(), m.rows(), Op::Constant)
    }

    /// Copies a value into a gradient-blocking constant.
    pub fn detach(&mut self, v: Var) -> Var {
        let node = &self.nodes[v.0];
        let (value, rows) = (node.value.clone(), node.rows);
        self.push_shaped(value, rows, Op::Constant)
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "length mismatch");
        let value = va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect();
        self.push(value, op)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    /// Adds the constant `c` to every element.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Offset(a), |x| x + c)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).to_vec();
        value.extend_from_slice(self.value(b));
        self.push(value, Op::Concat(a, b))
    }

    /// Row-vector times matrix: `y_j = Σ_i x_i W_ij`.
    pub fn vec_mat(&mut self, x: Var, w: Var) -> Var {
        let rows = self.nodes[w.0].rows;
        let wv = &self.nodes[w.0].value;
        let cols = wv.len() / rows;
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.len(), rows, "vec_mat: x has {} entries for {rows} rows", xv.len());
        let mut y = vec![0.0; cols];
        for (i, &xi) in xv.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &wv[i * cols..(i + 1) * cols];
            for (yj, wij) in y.iter_mut().zip(row) {
                *yj += xi * wij;
            }
        }
        self.push(y, Op::VecMat { x, w })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.map(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, Op::Softplus(a), softplus)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "dot length mismatch");
        let d = va.iter().zip(vb).map(|(x, y)| x * y).sum();
        self.push(vec![d], Op::Dot(a, b))
    }

    /// Euclidean norm.
    pub fn norm(&mut self, a: Var) -> Var {
        let n = self.value(a).iter().map(|x| x * x).sum::<f64>().sqrt();
        self.push(vec![n], Op::Norm(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![s], Op::Sum(a))
    }

    pub fn index(&mut self, a: Var, i: usize) -> Var {
        let v = self.value(a)[i];
        self.push(vec![v], Op::Index(a, i))
    }

    /// Collects scalars into a vector.
    pub fn stack(&mut self, items: &[Var]) -> Var {
        let value = items.iter().map(|&v| self.scalar(v)).collect();
        self.push(value, Op::Stack(items.to_vec()))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax(self.value(a));
        self.push(value, Op::Softmax(a))
    }

    /// `Σ_k weights[k] · items[k]`.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Var {
        let w = self.value(weights);
        assert_eq!(w.len(), items.len(), "weighted_sum arity");
        assert!(!items.is_empty(), "weighted_sum of nothing");
        let mut out = vec![0.0; self.value(items[0]).len()];
        for (&wk, &item) in w.iter().zip(items) {
            for (o, x) in out.iter_mut().zip(self.value(item)) {
                *o += wk * x;
            }
        }
        self.push(
            out,
            Op::WeightedSum {
                weights,
                items: items.to_vec(),
            },
        )
    }

    pub fn mean(&mut self, items: &[Var]) -> Var {
        assert!(!items.is_empty(), "mean of nothing");
        let n = items.len() as f64;
        let mut out = vec![0.0; self.value(items[0]).len()];
        for &item in items {
            for (o, x) in out.iter_mut().zip(self.value(item)) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= n;
        }
        self.push(out, Op::Mean(items.to_vec()))
    }

    /// Sum of a list of scalars.
    pub fn add_all(&mut self, items: &[Var]) -> Var {
        let stacked = self.stack(items);
        self.sum(stacked)
    }

    /// Gradients of the scalar `root` with respect to every leaf.
    pub fn backward(&self, root: Var) -> Gradients {
        self.backward_keeping(root, &[])
    }

    /// Like [`Tape::backward`], also retaining the gradients of `keep`.
    pub fn backward_keeping(&self, root: Var, keep: &[Var]) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut retain = vec![false; root.0 + 1];
        for k in keep.iter().filter(|k| k.0 <= root.0) {
            retain[k.0] = true;
        }

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let len_of = |v: Var| self.nodes[v.0].value.len();
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    for (d, x) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *d += x;
                    }
                    for (d, x) in acc(&mut grads, *b, g.len()).iter_mut().zip(&g) {
                        *d += x;
                    }
                }
                Op::Sub(a, b) => {
                    for (d, x) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *d += x;
                    }
                    for (d, x) in acc(&mut grads, *b, g.len()).iter_mut().zip(&g) {
                        *d -= x;
                    }
                }
                Op::Scale(a, c) => {
                    for (d, x) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *d += c * x;
                    }
                }
                Op::Offset(a) => {
                    for (d, x) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *d += x;
                    }
                }
                Op::Concat(a, b) => {
                    let la = len_of(*a);
                    for (d, x) in acc(&mut grads, *a, la).iter_mut().zip(&g[..la]) {
                        *d += x;
                    }
                    let lb = len_of(*b);
                    for (d, x) in acc(&mut grads, *b, lb).iter_mut().zip(&g[la..]) {
                        *d += x;
                    }
                }
                Op::VecMat { x, w } => {
                    let xv = &self.nodes[x.0].value;
                    let wnode = &self.nodes[w.0];
                    let rows = wnode.rows;
                    let cols = g.len();
                    if !self.is_constant(*x) {
                        let gx = acc(&mut grads, *x, rows);
                        for (i, gxi) in gx.iter_mut().enumerate() {
                            let row = &wnode.value[i * cols..(i + 1) * cols];
                            *gxi += row.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    if !self.is_constant(*w) {
                        let gw = acc(&mut grads, *w, rows * cols);
                        for (i, &xi) in xv.iter().enumerate() {
                            if xi == 0.0 {
                                continue;
                            }
                            for (d, gj) in gw[i * cols..(i + 1) * cols].iter_mut().zip(&g) {
                                *d += xi * gj;
                            }
                        }
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    for ((d, gi), yi) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(y) {
                        *d += gi * (1.0 - yi * yi);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    for ((d, gi), yi) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    let xv = &self.nodes[a.0].value;
                    for ((d, gi), xi) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(xv) {
                        *d += if *xi > 0.0 { *gi } else { slope * gi };
                    }
                }
                Op::Softplus(a) => {
                    let xv = &self.nodes[a.0].value;
                    for ((d, gi), xi) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(xv) {
                        *d += gi * sigmoid(*xi);
                    }
                }
                Op::Dot(a, b) => {
                    let s = g[0];
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    for (d, y) in acc(&mut grads, *a, va.len()).iter_mut().zip(vb) {
                        *d += s * y;
                    }
                    for (d, x) in acc(&mut grads, *b, vb.len()).iter_mut().zip(va) {
                        *d += s * x;
                    }
                }
                Op::Norm(a) => {
                    let n = node.value[0];
                    let xv = &self.nodes[a.0].value;
                    let gx = acc(&mut grads, *a, xv.len());
                    if n > 0.0 {
                        for (d, x) in gx.iter_mut().zip(xv) {
                            *d += g[0] * x / n;
                        }
                    }
                }
                Op::Sum(a) => {
                    let l = len_of(*a);
                    for d in acc(&mut grads, *a, l).iter_mut() {
                        *d += g[0];
                    }
                }
                Op::Index(a, k) => {
                    let l = len_of(*a);
                    acc(&mut grads, *a, l)[*k] += g[0];
                }
                Op::Stack(items) => {
                    for (item, gi) in items.iter().zip(&g) {
                        acc(&mut grads, *item, 1)[0] += gi;
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let gy: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    for ((d, gi), yi) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(y) {
                        *d += yi * (gi - gy);
                    }
                }
                Op::WeightedSum { weights, items } => {
                    let w = &self.nodes[weights.0].value;
                    if !self.is_constant(*weights) {
                        let gw: Vec<f64> = items
                            .iter()
                            .map(|it| {
                                self.nodes[it.0]
                                    .value
                                    .iter()
                                    .zip(&g)
                                    .map(|(a, b)| a * b)
                                    .sum()
                            })
                            .collect();
                        for (d, x) in acc(&mut grads, *weights, w.len()).iter_mut().zip(gw) {
                            *d += x;
                        }
                    }
                    for (item, wk) in items.iter().zip(w) {
                        for (d, gi) in acc(&mut grads, *item, g.len()).iter_mut().zip(&g) {
                            *d += wk * gi;
                        }
                    }
                }
                Op::Mean(items) => {
                    let n = items.len() as f64;
                    for item in items {
                        for (d, gi) in acc(&mut grads, *item, g.len()).iter_mut().zip(&g) {
                            *d += gi / n;
                        }
                    }
                }
            }
            if retain[i] || matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn is_constant(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Constant)
    }
}

/// Gradients produced by [`Tape::backward`]; only leaves and explicitly
/// kept nodes are retained.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn get_or_zero(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}
