use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};
use crate::prob::{normal_cdf, normal_pdf};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Const,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    NormalCdf(Var),
    Softplus(Var),
    Softmax(Var),
    Log(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    tracked: bool,
}

/// Records primitive operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every input precedes its
/// consumers and a single reverse sweep visits each node once. Values of
/// untracked nodes are kept for reading but never receive gradients.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A tracked input whose gradient is retained after [`Tape::backward`].
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An untracked input.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Accumulated gradient of a tracked leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.borrow().get(v.0).cloned().flatten()
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().iter_mut().for_each(|g| *g = None);
    }

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var(nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].tracked
    }

    fn unary(&self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).map(f);
        self.push(out, op, self.tracked(a))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(&self.value(b))?;
        Ok(self.push(out, Op::Matmul(a, b), self.tracked(a) || self.tracked(b)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(&self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), self.tracked(a) || self.tracked(b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(&self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), self.tracked(a) || self.tracked(b)))
    }

    /// Broadcast-adds a length-`n` row vector to every row of an `m × n` matrix.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let av = self.value(a);
        let rv = self.value(row);
        let (m, n) = av.as_matrix("add_row")?;
        if rv.len() != n {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: av.shape().to_vec(),
                rhs: rv.shape().to_vec(),
            });
        }
        let mut data = av.data().to_vec();
        for i in 0..m {
            for (x, &b) in data[i * n..(i + 1) * n].iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        Ok(self.push(
            out,
            Op::AddRow(a, row),
            self.tracked(a) || self.tracked(row),
        ))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(&self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), self.tracked(a) || self.tracked(b)))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Logistic sigmoid `1 / (1 + e^{-x})`.
    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), logistic)
    }

    /// Standard-normal CDF.
    pub fn normal_cdf(&self, a: Var) -> Var {
        self.unary(a, Op::NormalCdf(a), normal_cdf)
    }

    /// `log(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// Softmax along the last axis (each row of a matrix, or a whole vector).
    pub fn softmax(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = softmax_rows(&av);
        self.push(out, Op::Softmax(a), self.tracked(a))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), self.tracked(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let s = self.value(a).mean();
        self.push(Tensor::scalar(s), Op::Mean(a), self.tracked(a))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(a), self.tracked(a)))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a), self.tracked(a)))
    }

    /// Propagates `d loss / d node` to every tracked leaf, adding into any
    /// gradient already held there.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(shape));
        }
        let seed = Tensor::full(&shape, 1.0);
        self.backward_from(loss, seed)
    }

    /// Reverse sweep seeded with an arbitrary upstream gradient for `root`.
    pub fn backward_from(&self, root: Var, seed: Tensor) -> Result<()> {
        let nodes = self.nodes.borrow();
        nodes[root.0]
            .value
            .expect_same_shape(&seed, "backward seed")?;
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adj[root.0] = Some(seed);

        let mut leaf_grads = self.grads.borrow_mut();
        if leaf_grads.len() < nodes.len() {
            leaf_grads.resize(nodes.len(), None);
        }

        for id in (0..=root.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let out = &node.value;
            let val = |v: Var| &nodes[v.0].value;
            let want = |v: Var| nodes[v.0].tracked;
            match node.op {
                Op::Leaf => {
                    match &mut leaf_grads[id] {
                        Some(acc) => acc.add_assign(&g)?,
                        slot => *slot = Some(g),
                    }
                    continue;
                }
                Op::Const => {}
                Op::Matmul(a, b) => {
                    let (m, k) = val(a).as_matrix("matmul")?;
                    let n = val(b).shape()[1];
                    if want(a) {
                        // dA = dC · Bᵀ
                        let mut da = vec![0.0; m * k];
                        gemm(
                            m,
                            n,
                            k,
                            g.data(),
                            (n as isize, 1),
                            val(b).data(),
                            (1, n as isize),
                            &mut da,
                            0.0,
                        );
                        accumulate(&mut adj, a, Tensor::matrix(m, k, da)?)?;
                    }
                    if want(b) {
                        // dB = Aᵀ · dC
                        let mut db = vec![0.0; k * n];
                        gemm(
                            k,
                            m,
                            n,
                            val(a).data(),
                            (1, k as isize),
                            g.data(),
                            (n as isize, 1),
                            &mut db,
                            0.0,
                        );
                        accumulate(&mut adj, b, Tensor::matrix(k, n, db)?)?;
                    }
                }
                Op::Add(a, b) => {
                    if want(b) {
                        accumulate(&mut adj, b, g.clone())?;
                    }
                    if want(a) {
                        accumulate(&mut adj, a, g)?;
                    }
                }
                Op::Sub(a, b) => {
                    if want(b) {
                        accumulate(&mut adj, b, g.map(|x| -x))?;
                    }
                    if want(a) {
                        accumulate(&mut adj, a, g)?;
                    }
                }
                Op::AddRow(a, row) => {
                    if want(row) {
                        let n = g.cols();
                        let mut db = vec![0.0; n];
                        for r in 0..g.rows() {
                            for (d, &x) in db.iter_mut().zip(g.row(r)) {
                                *d += x;
                            }
                        }
                        let db = Tensor::new(val(row).shape().to_vec(), db)?;
                        accumulate(&mut adj, row, db)?;
                    }
                    if want(a) {
                        accumulate(&mut adj, a, g)?;
                    }
                }
                Op::Mul(a, b) => {
                    if want(a) {
                        accumulate(&mut adj, a, g.zip_map(val(b), "mul", |x, y| x * y)?)?;
                    }
                    if want(b) {
                        accumulate(&mut adj, b, g.zip_map(val(a), "mul", |x, y| x * y)?)?;
                    }
                }
                Op::Scale(a, c) => accumulate(&mut adj, a, g.map(|x| c * x))?,
                Op::AddScalar(a) | Op::Reshape(a) => {
                    let shape = val(a).shape().to_vec();
                    accumulate(&mut adj, a, g.reshaped(&shape)?)?;
                }
                Op::Transpose(a) => accumulate(&mut adj, a, g.transpose()?)?,
                Op::Relu(a) => {
                    let d = g.zip_map(val(a), "relu", |x, v| if v > 0.0 { x } else { 0.0 })?;
                    accumulate(&mut adj, a, d)?;
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(out, "sigmoid", |x, s| x * s * (1.0 - s))?;
                    accumulate(&mut adj, a, d)?;
                }
                Op::NormalCdf(a) => {
                    let d = g.zip_map(val(a), "normal_cdf", |x, v| x * normal_pdf(v))?;
                    accumulate(&mut adj, a, d)?;
                }
                Op::Softplus(a) => {
                    let d = g.zip_map(val(a), "softplus", |x, v| x * logistic(v))?;
                    accumulate(&mut adj, a, d)?;
                }
                Op::Log(a) => {
                    let d = g.zip_map(val(a), "log", |x, v| x / v)?;
                    accumulate(&mut adj, a, d)?;
                }
                Op::Exp(a) => {
                    let d = g.zip_map(out, "exp", |x, e| x * e)?;
                    accumulate(&mut adj, a, d)?;
                }
                Op::Softmax(a) => {
                    let c = out.cols();
                    let mut d = vec![0.0; out.len()];
                    for r in 0..out.rows() {
                        let s = out.row(r);
                        let gr = g.row(r);
                        let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[r * c + j] = s[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut adj, a, Tensor::new(out.shape().to_vec(), d)?)?;
                }
                Op::Sum(a) => {
                    let shape = val(a).shape().to_vec();
                    accumulate(&mut adj, a, Tensor::full(&shape, g.item()))?;
                }
                Op::Mean(a) => {
                    let shape = val(a).shape().to_vec();
                    let n = val(a).len() as f64;
                    accumulate(&mut adj, a, Tensor::full(&shape, g.item() / n))?;
                }
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut adj[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => {
            *slot = Some(g);
            Ok(())
        }
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn softmax_rows(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = t.clone();
    for r in 0..t.rows() {
        let row = &mut out.data_mut()[r * c..(r + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            z += *x;
        }
        row.iter_mut().for_each(|x| *x /= z);
    }
    out
}
