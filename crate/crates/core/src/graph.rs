//! Reverse-mode differentiation over a tape of matrix operations.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so the tape is already in
//! topological order; [`Graph::backward`] walks it once in reverse and
//! accumulates (sums) gradients into each parent, which handles shared
//! subexpressions.
//!
//! Operations panic on shape mismatches: shapes are validated at the public
//! entry points of the loss modules, so a mismatch here is a wiring bug.
//! Non-finite values are not a panic. The first node that produces a NaN or
//! infinity is remembered and reported by [`Graph::backward`].
//!
//! The recurrent cell is the standard LSTM with gate order `[i, f, g, o]`:
//!
//! ```text
//! i = sigmoid(x Wi + h Ui + bi)     f = sigmoid(x Wf + h Uf + bf)
//! g = tanh(x Wg + h Ug + bg)        o = sigmoid(x Wo + h Uo + bo)
//! c' = f * c + i * g                h' = o * tanh(c')
//! ```

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type CustomBackward = Box<dyn Fn(&Tensor) -> Vec<Tensor> + Send + Sync>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Tensor),
    MatMul(Var, Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<(usize, usize)>),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    Sqrt(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    SquaredError(Var, Var),
    LstmCell(Box<LstmCellCache>),
    LstmScan(Box<LstmScanCache>),
    PairConcat(Var),
    Custom {
        parents: Vec<Var>,
        backward: CustomBackward,
    },
}

struct LstmCellCache {
    x: Var,
    h: Var,
    c: Var,
    w: Var,
    u: Var,
    b: Var,
    // activated gates, B x 4H
    gates: Tensor,
    tanh_c: Tensor,
}

struct LstmScanCache {
    x: Var,
    w: Var,
    u: Var,
    b: Var,
    reverse: bool,
    gates: Tensor,
    cells: Tensor,
    tanh_c: Tensor,
}

struct Node {
    value: Tensor,
    op: Op,
    name: &'static str,
    requires_grad: bool,
}

/// Location of the first non-finite value, if any.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fault {
    pub node: usize,
    pub op: &'static str,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("fault", &self.fault)
            .finish()
    }
}

/// Gradients indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn fault(&self) -> Option<Fault> {
        self.fault
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_with(value, op, name, requires_grad)
    }

    fn push_with(&mut self, value: Tensor, op: Op, name: &'static str, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some(Fault { node: idx, op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            name,
            requires_grad,
        });
        Var(idx)
    }

    /// A leaf node. Gradients are only reported for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_with(value, Op::Leaf, "leaf", requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].name
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{op}: operand shapes differ");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), "add", &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), "sub", &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), "mul", &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "div");
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b), "div", &[a, b])
    }

    /// `a (r x c) + row (1 x c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let [r, c] = self.shape(a);
        assert_eq!(self.shape(row), [1, c], "add_row: bias shape");
        let bias = self.value(row).data().to_vec();
        let mut v = self.value(a).clone();
        for i in 0..r {
            for (x, b) in v.row_slice_mut(i).iter_mut().zip(&bias) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row), "add_row", &[a, row])
    }

    /// `a (r x c) * col (r x 1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let [r, _] = self.shape(a);
        assert_eq!(self.shape(col), [r, 1], "mul_col: column shape");
        let s = self.value(col).data().to_vec();
        let mut v = self.value(a).clone();
        for (i, &k) in s.iter().enumerate() {
            for x in v.row_slice_mut(i) {
                *x *= k;
            }
        }
        self.push(v, Op::MulCol(a, col), "mul_col", &[a, col])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k), "scale", &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::AddScalar(a), "add_scalar", &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Elementwise product with a constant tensor (masks, fixed noise).
    pub fn mul_const(&mut self, a: Var, m: Tensor) -> Var {
        assert_eq!(self.shape(a), m.shape(), "mul_const: mask shape");
        let v = self.value(a).zip_map(&m, |x, y| x * y);
        self.push(v, Op::MulConst(a, m), "mul_const", &[a])
    }

    /// Inverted Bernoulli dropout: each entry is zeroed with probability `p`
    /// and survivors are scaled by `1/(1-p)`, so the multiplier has mean 1
    /// and variance `p/(1-p)`.
    pub fn dropout_bernoulli<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        let [r, c] = self.shape(a);
        let keep = 1.0 - p;
        let m: Vec<f64> = (0..r * c)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = Tensor::from_vec(r, c, m);
        let v = self.value(a).zip_map(&m, |x, y| x * y);
        self.push(v, Op::MulConst(a, m), "dropout_bernoulli", &[a])
    }

    /// Multiplicative Gaussian dropout with noise `N(1, gamma^2)`.
    pub fn dropout_gaussian<R: Rng + ?Sized>(&mut self, a: Var, gamma: f64, rng: &mut R) -> Var {
        let [r, c] = self.shape(a);
        let m: Vec<f64> = (0..r * c)
            .map(|_| 1.0 + gamma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let m = Tensor::from_vec(r, c, m);
        let v = self.value(a).zip_map(&m, |x, y| x * y);
        self.push(v, Op::MulConst(a, m), "dropout_gaussian", &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b), "matmul", &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a), "transpose", &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let vals: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat_cols(&vals);
        self.push(v, Op::ConcatCols(parts.to_vec()), "concat_cols", parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let vals: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat_rows(&vals);
        self.push(v, Op::ConcatRows(parts.to_vec()), "concat_rows", parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= self.shape(a)[1], "slice_cols out of range");
        let v = self.value(a).slice_cols(start, len);
        self.push(v, Op::SliceCols(a, start), "slice_cols", &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= self.shape(a)[0], "slice_rows out of range");
        let v = self.value(a).slice_rows(start, len);
        self.push(v, Op::SliceRows(a, start), "slice_rows", &[a])
    }

    /// Selects (and possibly repeats or permutes) rows.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let rows = self.shape(a)[0];
        assert!(idx.iter().all(|&i| i < rows), "gather_rows index out of range");
        let v = self.value(a).gather_rows(idx);
        self.push(v, Op::GatherRows(a, idx.to_vec()), "gather_rows", &[a])
    }

    /// Gathers individual `(row, col)` entries into an `n x 1` column.
    pub fn gather(&mut self, a: Var, at: &[(usize, usize)]) -> Var {
        let [r, c] = self.shape(a);
        assert!(at.iter().all(|&(i, j)| i < r && j < c), "gather index out of range");
        let vals: Vec<f64> = at.iter().map(|&(i, j)| self.value(a).get(i, j)).collect();
        let v = Tensor::from_vec(vals.len(), 1, vals);
        self.push(v, Op::Pick(a, at.to_vec()), "gather", &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), "sum", &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::Mean(a), "mean", &[a])
    }

    /// Row sums: `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v: Vec<f64> = (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect();
        let v = Tensor::from_vec(t.rows(), 1, v);
        self.push(v, Op::SumCols(a), "sum_cols", &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), "exp", &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a), "log", &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a), "tanh", &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), "sigmoid", &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), "relu", &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a), "abs", &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a), "sqrt", &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), "square", &[a])
    }

    /// Clamps into `[lo, hi]`; the gradient passes wherever `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi), "clamp", &[a])
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::Softmax(a), "softmax", &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let lse = logsumexp_rows(t);
        let mut v = t.clone();
        for (r, l) in lse.iter().enumerate() {
            for x in v.row_slice_mut(r) {
                *x -= l;
            }
        }
        self.push(v, Op::LogSoftmax(a), "log_softmax", &[a])
    }

    /// Row-wise log-sum-exp: `r x c -> r x 1`.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::from_vec(t.rows(), 1, logsumexp_rows(t));
        self.push(v, Op::LogSumExp(a), "logsumexp", &[a])
    }

    /// `sum((a - b)^2)` as a scalar.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "squared_error");
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(Tensor::scalar(s), Op::SquaredError(a, b), "squared_error", &[a, b])
    }

    /// One LSTM step for a batch. Returns `B x 2H` holding `[h' | c']`.
    pub fn lstm_cell(&mut self, x: Var, h: Var, c: Var, w: Var, u: Var, b: Var) -> Var {
        let [batch, din] = self.shape(x);
        let hid = self.shape(h)[1];
        assert_eq!(self.shape(h), [batch, hid], "lstm_cell: h shape");
        assert_eq!(self.shape(c), [batch, hid], "lstm_cell: c shape");
        assert_eq!(self.shape(w), [din, 4 * hid], "lstm_cell: W shape");
        assert_eq!(self.shape(u), [hid, 4 * hid], "lstm_cell: U shape");
        assert_eq!(self.shape(b), [1, 4 * hid], "lstm_cell: b shape");
        let mut pre = self.value(x).matmul(self.value(w));
        matmul_into(
            self.value(h).data(),
            self.value(u).data(),
            pre.data_mut(),
            batch,
            hid,
            4 * hid,
        );
        let bias = self.value(b).data().to_vec();
        let mut out = Tensor::zeros(batch, 2 * hid);
        let mut tanh_c = Tensor::zeros(batch, hid);
        for r in 0..batch {
            let prow = pre.row_slice_mut(r);
            for (p, bb) in prow.iter_mut().zip(&bias) {
                *p += bb;
            }
            activate_gates(prow, hid);
            let c_prev = self.value(c).row_slice(r);
            let orow = out.row_slice_mut(r);
            for j in 0..hid {
                let cn = prow[hid + j] * c_prev[j] + prow[j] * prow[2 * hid + j];
                let tc = cn.tanh();
                orow[hid + j] = cn;
                orow[j] = prow[3 * hid + j] * tc;
                tanh_c.set(r, j, tc);
            }
        }
        let cache = LstmCellCache {
            x,
            h,
            c,
            w,
            u,
            b,
            gates: pre,
            tanh_c,
        };
        self.push(out, Op::LstmCell(Box::new(cache)), "lstm_cell", &[x, h, c, w, u, b])
    }

    /// Runs an LSTM over the rows of `x` (`T x Din`) from zero state and
    /// returns all hidden states (`T x H`). With `reverse` the scan goes from
    /// the last row to the first; row `t` of the output is always the state
    /// at time `t`.
    pub fn lstm_scan(&mut self, x: Var, w: Var, u: Var, b: Var, reverse: bool) -> Var {
        let [steps, din] = self.shape(x);
        let hid = self.shape(u)[0];
        assert_eq!(self.shape(w), [din, 4 * hid], "lstm_scan: W shape");
        assert_eq!(self.shape(u), [hid, 4 * hid], "lstm_scan: U shape");
        assert_eq!(self.shape(b), [1, 4 * hid], "lstm_scan: b shape");
        let mut gates = self.value(x).matmul(self.value(w));
        let bias = self.value(b).data().to_vec();
        let uval = self.value(u).data().to_vec();
        let mut cells = Tensor::zeros(steps, hid);
        let mut tanh_c = Tensor::zeros(steps, hid);
        let mut hs = Tensor::zeros(steps, hid);
        let mut h_prev = vec![0.0; hid];
        let mut c_prev = vec![0.0; hid];
        for s in 0..steps {
            let t = if reverse { steps - 1 - s } else { s };
            let grow = gates.row_slice_mut(t);
            for (g, bb) in grow.iter_mut().zip(&bias) {
                *g += bb;
            }
            matmul_into(&h_prev, &uval, grow, 1, hid, 4 * hid);
            activate_gates(grow, hid);
            for j in 0..hid {
                let cn = grow[hid + j] * c_prev[j] + grow[j] * grow[2 * hid + j];
                let tc = cn.tanh();
                c_prev[j] = cn;
                h_prev[j] = grow[3 * hid + j] * tc;
            }
            cells.row_slice_mut(t).copy_from_slice(&c_prev);
            hs.row_slice_mut(t).copy_from_slice(&h_prev);
            for j in 0..hid {
                tanh_c.set(t, j, c_prev[j].tanh());
            }
        }
        let cache = LstmScanCache {
            x,
            w,
            u,
            b,
            reverse,
            gates,
            cells,
            tanh_c,
        };
        self.push(hs, Op::LstmScan(Box::new(cache)), "lstm_scan", &[x, w, u, b])
    }

    /// Pyramidal subsampling: concatenates rows `(2k, 2k+1)` into row `k`.
    /// An odd trailing row is dropped.
    pub fn pair_concat(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (rows, cols) = (t.rows() / 2, t.cols());
        let v = Tensor::from_vec(rows, 2 * cols, t.data()[..rows * 2 * cols].to_vec());
        self.push(v, Op::PairConcat(a), "pair_concat", &[a])
    }

    /// Registers an operation whose value and vector-Jacobian product are
    /// supplied by the caller. `backward` receives the upstream gradient and
    /// returns one gradient per parent, in order.
    pub fn custom(
        &mut self,
        name: &'static str,
        parents: &[Var],
        value: Tensor,
        backward: impl Fn(&Tensor) -> Vec<Tensor> + Send + Sync + 'static,
    ) -> Var {
        let op = Op::Custom {
            parents: parents.to_vec(),
            backward: Box::new(backward),
        };
        self.push(value, op, name, parents)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        if let Some(f) = self.fault {
            return Err(Error::NonFinite {
                node: f.node,
                op: f.op,
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    node: idx,
                    op: self.nodes[idx].name,
                });
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                acc(*a, g.zip_map(bv, |x, y| x / y));
                let ga = g.zip_map(y, |x, q| x * q);
                acc(*b, ga.zip_map(bv, |x, d| -x / d));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                let mut s = vec![0.0; g.cols()];
                for r in 0..g.rows() {
                    for (acc_v, v) in s.iter_mut().zip(g.row_slice(r)) {
                        *acc_v += v;
                    }
                }
                acc(*row, Tensor::from_vec(1, g.cols(), s));
            }
            Op::MulCol(a, col) => {
                let av = self.value(*a);
                let cv = self.value(*col);
                let mut ga = g.clone();
                let mut gc = vec![0.0; g.rows()];
                for r in 0..g.rows() {
                    let k = cv.get(r, 0);
                    let mut s = 0.0;
                    for (j, x) in ga.row_slice_mut(r).iter_mut().enumerate() {
                        s += *x * av.get(r, j);
                        *x *= k;
                    }
                    gc[r] = s;
                }
                acc(*a, ga);
                acc(*col, Tensor::from_vec(g.rows(), 1, gc));
            }
            Op::Scale(a, k) => acc(*a, g.map(|v| v * k)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::MulConst(a, m) => acc(*a, g.zip_map(m, |x, y| x * y)),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; m * k];
                    matmul_bt_into(g.data(), bv.data(), &mut ga, m, n, k);
                    acc(*a, Tensor::from_vec(m, k, ga));
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; k * n];
                    matmul_at_into(av.data(), g.data(), &mut gb, m, k, n);
                    acc(*b, Tensor::from_vec(k, n, gb));
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.shape(*p)[1];
                    acc(*p, g.slice_cols(start, w));
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = self.shape(*p)[0];
                    acc(*p, g.slice_rows(start, h));
                    start += h;
                }
            }
            Op::SliceCols(a, start) => {
                let [r, c] = self.shape(*a);
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    ga.row_slice_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row_slice(i));
                }
                acc(*a, ga);
            }
            Op::SliceRows(a, start) => {
                let [r, c] = self.shape(*a);
                let mut ga = Tensor::zeros(r, c);
                ga.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                acc(*a, ga);
            }
            Op::GatherRows(a, idx) => {
                let [r, c] = self.shape(*a);
                let mut ga = Tensor::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for (x, v) in ga.row_slice_mut(i).iter_mut().zip(g.row_slice(k)) {
                        *x += v;
                    }
                }
                acc(*a, ga);
            }
            Op::Pick(a, at) => {
                let [r, c] = self.shape(*a);
                let mut ga = Tensor::zeros(r, c);
                for (k, &(i, j)) in at.iter().enumerate() {
                    let cur = ga.get(i, j);
                    ga.set(i, j, cur + g.get(k, 0));
                }
                acc(*a, ga);
            }
            Op::Sum(a) => {
                let [r, c] = self.shape(*a);
                acc(*a, Tensor::full(r, c, g.item()));
            }
            Op::Mean(a) => {
                let [r, c] = self.shape(*a);
                acc(*a, Tensor::full(r, c, g.item() / (r * c) as f64));
            }
            Op::SumCols(a) => {
                let [r, c] = self.shape(*a);
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    let v = g.get(i, 0);
                    ga.row_slice_mut(i).fill(v);
                }
                acc(*a, ga);
            }
            Op::Exp(a) => acc(*a, g.zip_map(y, |x, e| x * e)),
            Op::Log(a) => acc(*a, g.zip_map(self.value(*a), |x, v| x / v)),
            Op::Tanh(a) => acc(*a, g.zip_map(y, |x, t| x * (1.0 - t * t))),
            Op::Sigmoid(a) => acc(*a, g.zip_map(y, |x, s| x * s * (1.0 - s))),
            Op::Relu(a) => acc(*a, g.zip_map(self.value(*a), |x, v| if v > 0.0 { x } else { 0.0 })),
            Op::Abs(a) => acc(
                *a,
                g.zip_map(self.value(*a), |x, v| {
                    if v > 0.0 {
                        x
                    } else if v < 0.0 {
                        -x
                    } else {
                        0.0
                    }
                }),
            ),
            Op::Sqrt(a) => acc(*a, g.zip_map(y, |x, s| x / (2.0 * s))),
            Op::Square(a) => acc(*a, g.zip_map(self.value(*a), |x, v| 2.0 * x * v)),
            Op::Clamp(a, lo, hi) => acc(
                *a,
                g.zip_map(self.value(*a), |x, v| if v >= *lo && v <= *hi { x } else { 0.0 }),
            ),
            Op::Softmax(a) => {
                let mut ga = g.clone();
                for r in 0..g.rows() {
                    let yr = y.row_slice(r);
                    let dot: f64 = g.row_slice(r).iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (x, s) in ga.row_slice_mut(r).iter_mut().zip(yr) {
                        *x = s * (*x - dot);
                    }
                }
                acc(*a, ga);
            }
            Op::LogSoftmax(a) => {
                let mut ga = g.clone();
                for r in 0..g.rows() {
                    let gs: f64 = g.row_slice(r).iter().sum();
                    for (x, l) in ga.row_slice_mut(r).iter_mut().zip(y.row_slice(r)) {
                        *x -= l.exp() * gs;
                    }
                }
                acc(*a, ga);
            }
            Op::LogSumExp(a) => {
                let av = self.value(*a);
                let mut ga = av.clone();
                for r in 0..av.rows() {
                    let l = y.get(r, 0);
                    let gr = g.get(r, 0);
                    for x in ga.row_slice_mut(r) {
                        *x = gr * (*x - l).exp();
                    }
                }
                acc(*a, ga);
            }
            Op::SquaredError(a, b) => {
                let k = 2.0 * g.item();
                let d = self.value(*a).zip_map(self.value(*b), |x, y| k * (x - y));
                acc(*b, d.map(|v| -v));
                acc(*a, d);
            }
            Op::LstmCell(cache) => self.backprop_lstm_cell(cache, g, &mut acc),
            Op::LstmScan(cache) => self.backprop_lstm_scan(cache, g, &mut acc),
            Op::PairConcat(a) => {
                let [r, c] = self.shape(*a);
                let mut ga = Tensor::zeros(r, c);
                ga.data_mut()[..g.len()].copy_from_slice(g.data());
                acc(*a, ga);
            }
            Op::Custom { parents, backward } => {
                for (p, t) in parents.iter().zip(backward(g)) {
                    acc(*p, t);
                }
            }
        }
    }

    fn backprop_lstm_cell(&self, k: &LstmCellCache, g: &Tensor, acc: &mut impl FnMut(Var, Tensor)) {
        let [batch, hid] = self.shape(k.h);
        let din = self.shape(k.x)[1];
        let cv = self.value(k.c);
        let mut dpre = Tensor::zeros(batch, 4 * hid);
        let mut dc_prev = Tensor::zeros(batch, hid);
        for r in 0..batch {
            let gr = g.row_slice(r);
            let gate = k.gates.row_slice(r);
            let cp = cv.row_slice(r);
            let dp = dpre.row_slice_mut(r);
            for j in 0..hid {
                let (i, f, gg, o) = (gate[j], gate[hid + j], gate[2 * hid + j], gate[3 * hid + j]);
                let tc = k.tanh_c.get(r, j);
                let dh = gr[j];
                let dc = gr[hid + j] + dh * o * (1.0 - tc * tc);
                dp[j] = dc * gg * i * (1.0 - i);
                dp[hid + j] = dc * cp[j] * f * (1.0 - f);
                dp[2 * hid + j] = dc * i * (1.0 - gg * gg);
                dp[3 * hid + j] = dh * tc * o * (1.0 - o);
                dc_prev.set(r, j, dc * f);
            }
        }
        let (wv, uv) = (self.value(k.w), self.value(k.u));
        let mut dx = vec![0.0; batch * din];
        matmul_bt_into(dpre.data(), wv.data(), &mut dx, batch, 4 * hid, din);
        let mut dh = vec![0.0; batch * hid];
        matmul_bt_into(dpre.data(), uv.data(), &mut dh, batch, 4 * hid, hid);
        let mut dw = vec![0.0; din * 4 * hid];
        matmul_at_into(self.value(k.x).data(), dpre.data(), &mut dw, batch, din, 4 * hid);
        let mut du = vec![0.0; hid * 4 * hid];
        matmul_at_into(self.value(k.h).data(), dpre.data(), &mut du, batch, hid, 4 * hid);
        let mut db = vec![0.0; 4 * hid];
        for r in 0..batch {
            for (a, v) in db.iter_mut().zip(dpre.row_slice(r)) {
                *a += v;
            }
        }
        acc(k.x, Tensor::from_vec(batch, din, dx));
        acc(k.h, Tensor::from_vec(batch, hid, dh));
        acc(k.c, dc_prev);
        acc(k.w, Tensor::from_vec(din, 4 * hid, dw));
        acc(k.u, Tensor::from_vec(hid, 4 * hid, du));
        acc(k.b, Tensor::from_vec(1, 4 * hid, db));
    }

    fn backprop_lstm_scan(&self, k: &LstmScanCache, g: &Tensor, acc: &mut impl FnMut(Var, Tensor)) {
        let [steps, din] = self.shape(k.x);
        let hid = self.shape(k.u)[0];
        let uv = self.value(k.u).data();
        let mut dpre = Tensor::zeros(steps, 4 * hid);
        let mut dh_next = vec![0.0; hid];
        let mut dc_next = vec![0.0; hid];
        for s in (0..steps).rev() {
            let t = if k.reverse { steps - 1 - s } else { s };
            let prev = if s == 0 {
                None
            } else if k.reverse {
                Some(t + 1)
            } else {
                Some(t - 1)
            };
            let gate = k.gates.row_slice(t);
            let gr = g.row_slice(t);
            let dp = dpre.row_slice_mut(t);
            for j in 0..hid {
                let (i, f, gg, o) = (gate[j], gate[hid + j], gate[2 * hid + j], gate[3 * hid + j]);
                let tc = k.tanh_c.get(t, j);
                let c_prev = prev.map_or(0.0, |p| k.cells.get(p, j));
                let dh = gr[j] + dh_next[j];
                let dc = dh * o * (1.0 - tc * tc) + dc_next[j];
                dp[j] = dc * gg * i * (1.0 - i);
                dp[hid + j] = dc * c_prev * f * (1.0 - f);
                dp[2 * hid + j] = dc * i * (1.0 - gg * gg);
                dp[3 * hid + j] = dh * tc * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            dh_next.fill(0.0);
            matmul_bt_into(dp, uv, &mut dh_next, 1, 4 * hid, hid);
        }
        // Hidden state at step t, zero before the first step.
        let hvals = self.lstm_hidden_states(k, steps, hid);
        let mut du = vec![0.0; hid * 4 * hid];
        for s in 1..steps {
            let t = if k.reverse { steps - 1 - s } else { s };
            let p = if k.reverse { t + 1 } else { t - 1 };
            matmul_at_into(
                &hvals[p * hid..(p + 1) * hid],
                dpre.row_slice(t),
                &mut du,
                1,
                hid,
                4 * hid,
            );
        }
        let mut dx = vec![0.0; steps * din];
        matmul_bt_into(dpre.data(), self.value(k.w).data(), &mut dx, steps, 4 * hid, din);
        let mut dw = vec![0.0; din * 4 * hid];
        matmul_at_into(self.value(k.x).data(), dpre.data(), &mut dw, steps, din, 4 * hid);
        let mut db = vec![0.0; 4 * hid];
        for t in 0..steps {
            for (a, v) in db.iter_mut().zip(dpre.row_slice(t)) {
                *a += v;
            }
        }
        acc(k.x, Tensor::from_vec(steps, din, dx));
        acc(k.w, Tensor::from_vec(din, 4 * hid, dw));
        acc(k.u, Tensor::from_vec(hid, 4 * hid, du));
        acc(k.b, Tensor::from_vec(1, 4 * hid, db));
    }

    fn lstm_hidden_states(&self, k: &LstmScanCache, steps: usize, hid: usize) -> Vec<f64> {
        let mut h = vec![0.0; steps * hid];
        for t in 0..steps {
            let gate = k.gates.row_slice(t);
            for j in 0..hid {
                h[t * hid + j] = gate[3 * hid + j] * k.tanh_c.get(t, j);
            }
        }
        h
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn activate_gates(pre: &mut [f64], hid: usize) {
    for (j, v) in pre.iter_mut().enumerate() {
        *v = if (2 * hid..3 * hid).contains(&j) {
            v.tanh()
        } else {
            sigmoid(*v)
        };
    }
}

/// Numerically stable log-sum-exp of each row.
pub fn logsumexp_rows(t: &Tensor) -> Vec<f64> {
    (0..t.rows()).map(|r| logsumexp(t.row_slice(r))).collect()
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..t.rows() {
        let row = out.row_slice_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            s += *x;
        }
        for x in row.iter_mut() {
            *x /= s;
        }
    }
    out
}

pub fn log_softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..t.rows() {
        let l = logsumexp(t.row_slice(r));
        for x in out.row_slice_mut(r) {
            *x -= l;
        }
    }
    out
}

/// Runs the reverse pass and returns the gradient of every requires-grad
/// leaf. Leaves the loss does not depend on get a zero gradient.
pub fn forward_backward(g: &Graph, loss: Var) -> Result<BTreeMap<Var, Tensor>> {
    let mut grads = g.backward(loss)?;
    let mut out = BTreeMap::new();
    for (i, node) in g.nodes.iter().enumerate() {
        if matches!(node.op, Op::Leaf) && node.requires_grad {
            let t = grads
                .take(Var(i))
                .unwrap_or_else(|| Tensor::zeros(node.value.rows(), node.value.cols()));
            out.insert(Var(i), t);
        }
    }
    Ok(out)
}

/// Compares the analytic gradient of a scalar function against central
/// differences. Returns the largest `|analytic - numeric| / max(1, |analytic|)`
/// over all coordinates of `point`.
pub fn gradcheck<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Var,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Config(format!("gradcheck step {eps} outside (0, 1e-2]")));
    }
    let eval = |p: &Tensor| -> Result<(f64, Option<Tensor>)> {
        let mut g = Graph::new();
        let x = g.param(p.clone());
        let y = f(&mut g, x);
        let mut grads = g.backward(y)?;
        Ok((g.scalar(y), grads.take(x)))
    };
    let (_, analytic) = eval(point)?;
    let analytic = analytic.unwrap_or_else(|| Tensor::zeros(point.rows(), point.cols()));
    let mut worst = 0.0_f64;
    let mut p = point.clone();
    for i in 0..point.len() {
        let orig = p.data()[i];
        p.data_mut()[i] = orig + eps;
        let (up, _) = eval(&p)?;
        p.data_mut()[i] = orig - eps;
        let (down, _) = eval(&p)?;
        p.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.sample(StandardNormal)).collect())
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(&[1.0, 2.0, 3.0]));
        let sq = g.mul(x, x);
        let loss = g.sum(sq);
        let grads = forward_backward(&g, loss).unwrap();
        assert_eq!(grads[&x].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn logsumexp_symmetric_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(&[0.0, 0.0]));
        let l = g.logsumexp(x);
        let grads = forward_backward(&g, l).unwrap();
        assert_eq!(grads[&x].data(), &[0.5, 0.5]);
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        // f(x) = sum((x*x) + (x*x)) built once with a shared node and once
        // with duplicated leaves holding the same value.
        let v = Tensor::row(&[0.3, -1.2]);
        let mut g = Graph::new();
        let x = g.param(v.clone());
        let sq = g.mul(x, x);
        let s = g.add(sq, sq);
        let l = g.sum(s);
        let shared = forward_backward(&g, l).unwrap()[&x].clone();

        let mut g2 = Graph::new();
        let a = g2.param(v.clone());
        let b = g2.param(v.clone());
        let c = g2.param(v.clone());
        let d = g2.param(v);
        let p = g2.mul(a, b);
        let q = g2.mul(c, d);
        let s2 = g2.add(p, q);
        let l2 = g2.sum(s2);
        let gr = forward_backward(&g2, l2).unwrap();
        let mut total = gr[&a].clone();
        for k in [b, c, d] {
            total.add_assign(&gr[&k]);
        }
        assert!(shared.max_abs_diff(&total) < 1e-15);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn nan_reports_op() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(&[-1.0]));
        let l = g.log(x);
        let s = g.sqrt(l);
        let loss = g.sum(s);
        match g.backward(loss) {
            Err(Error::NonFinite { op, node }) => {
                assert_eq!(op, "log");
                assert_eq!(node, l.index());
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn non_requires_grad_leaves_are_absent() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(&[1.0]));
        let c = g.constant(Tensor::row(&[2.0]));
        let m = g.mul(x, c);
        let l = g.sum(m);
        let grads = forward_backward(&g, l).unwrap();
        assert!(grads.contains_key(&x));
        assert!(!grads.contains_key(&c));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = rand_tensor(&mut rng, 5, 7).map(|v| 10.0 * v);
        let s = softmax_rows(&t);
        for r in 0..5 {
            let total: f64 = s.row_slice(r).iter().sum();
            assert!((total - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn logsumexp_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let t = rand_tensor(&mut rng, 1, 6);
            let c = 37.5 * rng.sample::<f64, _>(StandardNormal);
            let shifted = t.map(|v| v + c);
            let a = logsumexp(t.data()) + c;
            let b = logsumexp(shifted.data());
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn gradcheck_square() {
        let err = gradcheck(
            |g, x| {
                let s = g.square(x);
                g.sum(s)
            },
            &Tensor::scalar(3.0),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn gradcheck_rejects_bad_step() {
        let f = |g: &mut Graph, x: Var| g.sum(x);
        assert!(gradcheck(f, &Tensor::scalar(1.0), 0.1).is_err());
        assert!(gradcheck(f, &Tensor::scalar(1.0), 0.0).is_err());
    }

    #[test]
    fn pair_concat_drops_tail() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let p = g.pair_concat(x);
        assert_eq!(g.value(p).shape(), [1, 4]);
        assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn lstm_scan_matches_unrolled_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (t, din, h) = (4, 3, 2);
        let x = rand_tensor(&mut rng, t, din);
        let w = rand_tensor(&mut rng, din, 4 * h);
        let u = rand_tensor(&mut rng, h, 4 * h);
        let b = rand_tensor(&mut rng, 1, 4 * h);
        for reverse in [false, true] {
            let mut g = Graph::new();
            let (xv, wv, uv, bv) = (g.param(x.clone()), g.param(w.clone()), g.param(u.clone()), g.param(b.clone()));
            let scan = g.lstm_scan(xv, wv, uv, bv, reverse);
            let mut hs = g.constant(Tensor::zeros(1, h));
            let mut cs = g.constant(Tensor::zeros(1, h));
            let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
            for step in order {
                let xt = g.slice_rows(xv, step, 1);
                let out = g.lstm_cell(xt, hs, cs, wv, uv, bv);
                hs = g.slice_cols(out, 0, h);
                cs = g.slice_cols(out, h, h);
                let want = g.value(hs).row_slice(0).to_vec();
                let got = g.value(scan).row_slice(step).to_vec();
                for (a, b) in want.iter().zip(&got) {
                    assert!((a - b).abs() < 1e-14);
                }
            }
        }
    }
}
