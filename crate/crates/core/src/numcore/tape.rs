//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node to the
//! owning [`Tape`]. [`Tape::grad`] walks the nodes in reverse creation order,
//! which is a reverse topological order because a node can only reference
//! nodes created before it.
//!
//! The vector-Jacobian products are themselves built from `Var` operations,
//! so the gradients returned by `grad` are ordinary tape values that can be
//! differentiated again. This is what lets the outer training loop
//! differentiate through the unrolled inner fitting loop. Calling
//! [`Var::detach`] on a gradient gives the first-order (stop-gradient)
//! variant.
//!
//! ```
//! use weightscope::numcore::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = x * x * x; // x³
//! let dy = tape.grad(y, &[x])[0];
//! assert_eq!(dy.item(), 27.0);
//! let d2y = tape.grad(dy, &[x])[0];
//! assert_eq!(d2y.item(), 18.0);
//! ```

use std::cell::RefCell;
use std::ops;
use std::rc::Rc;

use super::tensor::Tensor;

/// Index value meaning "no source entry" in gather/scatter maps. Gathering it
/// yields zero; scattering from it drops the entry.
pub const PAD: usize = usize::MAX;

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Sin(usize),
    Cos(usize),
    Exp(usize),
    Ln(usize),
    Powf(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    BroadcastRows(usize),
    BroadcastCols(usize),
    BroadcastScalar(usize),
    SoftmaxRows(usize),
    Gather(usize, Rc<[usize]>),
    Scatter(usize, Rc<[usize]>),
    Reshape(usize),
}

impl Op {
    fn inputs(&self) -> (Option<usize>, Option<usize>) {
        use Op::*;
        match *self {
            Leaf => (None, None),
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) => (Some(a), Some(b)),
            Neg(a) | Scale(a, _) | AddScalar(a) | Transpose(a) | Sin(a) | Cos(a) | Exp(a)
            | Ln(a) | Powf(a, _) | Tanh(a) | Sigmoid(a) | Relu(a) | SumAll(a) | SumRows(a)
            | SumCols(a) | BroadcastRows(a) | BroadcastCols(a) | BroadcastScalar(a)
            | SoftmaxRows(a) | Reshape(a) => (Some(a), None),
            Gather(a, _) | Scatter(a, _) => (Some(a), None),
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Records operations for one execution context. Not `Sync`; build one tape
/// per thread or per unit of work.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// A value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input value. Leaves and constants are the same thing; a
    /// leaf only receives a gradient when it is passed to [`Tape::grad`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), Op::Leaf)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Tensor::scalar(value))
    }

    fn push(&self, value: Rc<Tensor>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    /// Gradient of the scalar `output` with respect to each of `wrt`.
    ///
    /// Parameters that `output` does not depend on get an all-zero gradient.
    pub fn grad<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Vec<Var<'t>> {
        assert_eq!(output.shape(), [1, 1], "grad() needs a scalar output; use grad_with_seed");
        let seed = self.leaf(Tensor::scalar(1.0));
        self.grad_with_seed(output, seed, wrt)
    }

    /// Vector-Jacobian product: propagates `seed` (same shape as `output`)
    /// back to `wrt`.
    pub fn grad_with_seed<'t>(
        &'t self,
        output: Var<'t>,
        seed: Var<'t>,
        wrt: &[Var<'t>],
    ) -> Vec<Var<'t>> {
        assert_eq!(output.shape(), seed.shape(), "seed shape must match output");
        let n = output.id + 1;
        let ops: Vec<Op> = self.nodes.borrow()[..n].iter().map(|nd| nd.op.clone()).collect();

        let mut needs = vec![false; n];
        for w in wrt {
            if w.id < n {
                needs[w.id] = true;
            }
        }
        for id in 0..n {
            if !needs[id] {
                let (a, b) = ops[id].inputs();
                needs[id] = a.is_some_and(|i| needs[i]) || b.is_some_and(|i| needs[i]);
            }
        }

        let mut adj: Vec<Option<Var<'t>>> = vec![None; n];
        adj[output.id] = Some(seed);
        let accumulate = |adj: &mut Vec<Option<Var<'t>>>, id: usize, g: Var<'t>| {
            if needs[id] {
                adj[id] = Some(match adj[id] {
                    Some(prev) => prev + g,
                    None => g,
                });
            }
        };

        for id in (0..n).rev() {
            if !needs[id] {
                continue;
            }
            let Some(g) = adj[id] else { continue };
            let out = self.var(id);
            use Op::*;
            match ops[id].clone() {
                Leaf => {}
                Add(a, b) => {
                    accumulate(&mut adj, a, g);
                    accumulate(&mut adj, b, g);
                }
                Sub(a, b) => {
                    accumulate(&mut adj, a, g);
                    if needs[b] {
                        accumulate(&mut adj, b, -g);
                    }
                }
                Mul(a, b) => {
                    if needs[a] {
                        accumulate(&mut adj, a, g * self.var(b));
                    }
                    if needs[b] {
                        accumulate(&mut adj, b, g * self.var(a));
                    }
                }
                Neg(a) => accumulate(&mut adj, a, -g),
                Scale(a, s) => accumulate(&mut adj, a, g.scale(s)),
                AddScalar(a) => accumulate(&mut adj, a, g),
                MatMul(a, b) => {
                    if needs[a] {
                        accumulate(&mut adj, a, g.matmul(self.var(b).t()));
                    }
                    if needs[b] {
                        accumulate(&mut adj, b, self.var(a).t().matmul(g));
                    }
                }
                Transpose(a) => accumulate(&mut adj, a, g.t()),
                Sin(a) => accumulate(&mut adj, a, g * self.var(a).cos()),
                Cos(a) => accumulate(&mut adj, a, -(g * self.var(a).sin())),
                Exp(a) => accumulate(&mut adj, a, g * out),
                Ln(a) => accumulate(&mut adj, a, g * self.var(a).powf(-1.0)),
                Powf(a, p) => {
                    accumulate(&mut adj, a, (g * self.var(a).powf(p - 1.0)).scale(p))
                }
                Tanh(a) => {
                    let d = (out * out).neg().add_scalar(1.0);
                    accumulate(&mut adj, a, g * d)
                }
                Sigmoid(a) => {
                    let d = out * out.neg().add_scalar(1.0);
                    accumulate(&mut adj, a, g * d)
                }
                Relu(a) => {
                    let mask = self.value_of(a).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut adj, a, g * self.constant(mask))
                }
                SumAll(a) => {
                    let [r, c] = self.value_of(a).shape();
                    accumulate(&mut adj, a, g.broadcast_scalar(r, c))
                }
                SumRows(a) => {
                    let r = self.value_of(a).rows();
                    accumulate(&mut adj, a, g.broadcast_rows(r))
                }
                SumCols(a) => {
                    let c = self.value_of(a).cols();
                    accumulate(&mut adj, a, g.broadcast_cols(c))
                }
                BroadcastRows(a) => accumulate(&mut adj, a, g.sum_rows()),
                BroadcastCols(a) => accumulate(&mut adj, a, g.sum_cols()),
                BroadcastScalar(a) => accumulate(&mut adj, a, g.sum()),
                SoftmaxRows(a) => {
                    let c = out.shape()[1];
                    let inner = (g * out).sum_cols().broadcast_cols(c);
                    accumulate(&mut adj, a, out * (g - inner))
                }
                Gather(a, idx) => {
                    let [r, c] = self.value_of(a).shape();
                    accumulate(&mut adj, a, g.scatter_shared(idx, r, c))
                }
                Scatter(a, idx) => {
                    let [r, c] = self.value_of(a).shape();
                    accumulate(&mut adj, a, g.gather_shared(idx, r, c))
                }
                Reshape(a) => {
                    let [r, c] = self.value_of(a).shape();
                    accumulate(&mut adj, a, g.reshape(r, c))
                }
            }
        }

        wrt.iter()
            .map(|w| match adj.get(w.id).copied().flatten() {
                Some(g) => g,
                None => {
                    let [r, c] = w.shape();
                    self.constant(Tensor::zeros(r, c))
                }
            })
            .collect()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> [usize; 2] {
        self.value().shape()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// Same value, cut off from the graph behind it.
    pub fn detach(self) -> Var<'t> {
        self.tape.push(self.value(), Op::Leaf)
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(Rc::new(value), op)
    }

    fn same_tape(&self, other: &Var<'t>) {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.value().scale(s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x + s);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let v = self.value().matmul(&other.value());
        self.unary(v, Op::MatMul(self.id, other.id))
    }

    pub fn t(self) -> Var<'t> {
        let v = self.value().transpose();
        self.unary(v, Op::Transpose(self.id))
    }

    pub fn sin(self) -> Var<'t> {
        let v = self.value().map(f64::sin);
        self.unary(v, Op::Sin(self.id))
    }

    pub fn cos(self) -> Var<'t> {
        let v = self.value().map(f64::cos);
        self.unary(v, Op::Cos(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.value().map(f64::ln);
        self.unary(v, Op::Ln(self.id))
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        let v = self.value().map(|x| x.powf(p));
        self.unary(v, Op::Powf(self.id, p))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.powf(0.5)
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value().map(f64::tanh);
        self.unary(v, Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().map(|x| 1.0 / (1.0 + (-x).exp()));
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    /// Sum of all entries as a `1 × 1` value.
    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// `r × c → 1 × c`
    pub fn sum_rows(self) -> Var<'t> {
        let v = self.value().sum_rows();
        self.unary(v, Op::SumRows(self.id))
    }

    /// `r × c → r × 1`
    pub fn sum_cols(self) -> Var<'t> {
        let v = self.value().sum_cols();
        self.unary(v, Op::SumCols(self.id))
    }

    /// `1 × c → rows × c`
    pub fn broadcast_rows(self, rows: usize) -> Var<'t> {
        let src = self.value();
        assert_eq!(src.rows(), 1, "broadcast_rows expects a row vector");
        let mut data = Vec::with_capacity(rows * src.cols());
        for _ in 0..rows {
            data.extend_from_slice(src.data());
        }
        self.unary(Tensor::new(rows, src.cols(), data), Op::BroadcastRows(self.id))
    }

    /// `r × 1 → r × cols`
    pub fn broadcast_cols(self, cols: usize) -> Var<'t> {
        let src = self.value();
        assert_eq!(src.cols(), 1, "broadcast_cols expects a column vector");
        let mut data = Vec::with_capacity(cols * src.rows());
        for &v in src.data() {
            data.extend(std::iter::repeat_n(v, cols));
        }
        self.unary(Tensor::new(src.rows(), cols, data), Op::BroadcastCols(self.id))
    }

    /// `1 × 1 → rows × cols`
    pub fn broadcast_scalar(self, rows: usize, cols: usize) -> Var<'t> {
        let v = Tensor::full(rows, cols, self.item());
        self.unary(v, Op::BroadcastScalar(self.id))
    }

    /// Adds a `1 × c` row to every row of `self`.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let r = self.shape()[0];
        self + row.broadcast_rows(r)
    }

    /// Multiplies every entry by a `1 × 1` value.
    pub fn mul_scalar_var(self, s: Var<'t>) -> Var<'t> {
        let [r, c] = self.shape();
        self * s.broadcast_scalar(r, c)
    }

    /// Row-wise softmax.
    pub fn softmax_rows(self) -> Var<'t> {
        let src = self.value();
        let mut out = (*src).clone();
        for r in 0..out.rows() {
            let row = out.row_slice_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.unary(out, Op::SoftmaxRows(self.id))
    }

    /// Row-wise log-softmax, built from primitives.
    pub fn log_softmax_rows(self) -> Var<'t> {
        let src = self.value();
        let c = src.cols();
        let maxes: Vec<f64> = (0..src.rows())
            .map(|r| src.row_slice(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let shift = self.tape.constant(Tensor::new(src.rows(), 1, maxes)).broadcast_cols(c);
        let shifted = self - shift;
        let lse = shifted.exp().sum_cols().ln().broadcast_cols(c);
        shifted - lse
    }

    /// Picks entries of the flattened value by index into a `rows × cols`
    /// result; [`PAD`] entries become zero.
    pub fn gather(self, idx: &[usize], rows: usize, cols: usize) -> Var<'t> {
        self.gather_shared(Rc::from(idx), rows, cols)
    }

    fn gather_shared(self, idx: Rc<[usize]>, rows: usize, cols: usize) -> Var<'t> {
        assert_eq!(idx.len(), rows * cols, "gather index count must match output shape");
        let src = self.value();
        let data = idx
            .iter()
            .map(|&i| if i == PAD { 0.0 } else { src.data()[i] })
            .collect();
        self.unary(Tensor::new(rows, cols, data), Op::Gather(self.id, idx))
    }

    /// Adjoint of [`Var::gather`]: adds entry `i` of `self` into position
    /// `idx[i]` of a zero `rows × cols` result.
    pub fn scatter(self, idx: &[usize], rows: usize, cols: usize) -> Var<'t> {
        self.scatter_shared(Rc::from(idx), rows, cols)
    }

    fn scatter_shared(self, idx: Rc<[usize]>, rows: usize, cols: usize) -> Var<'t> {
        let src = self.value();
        assert_eq!(idx.len(), src.len(), "scatter index count must match input size");
        let mut out = vec![0.0; rows * cols];
        for (&i, &v) in idx.iter().zip(src.data()) {
            if i != PAD {
                out[i] += v;
            }
        }
        self.unary(Tensor::new(rows, cols, out), Op::Scatter(self.id, idx))
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        let v = self.value().reshape(rows, cols);
        self.unary(v, Op::Reshape(self.id))
    }

    /// Contiguous range of the flattened value as a `1 × len` row.
    pub fn slice_flat(self, start: usize, len: usize) -> Var<'t> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather(&idx, 1, len)
    }

    /// Elementwise negation (method form of unary minus).
    pub fn neg(self) -> Var<'t> {
        -self
    }
}

impl<'t> ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        let v = self.value().add(&rhs.value());
        self.unary(v, Op::Add(self.id, rhs.id))
    }
}

impl<'t> ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        let v = self.value().sub(&rhs.value());
        self.unary(v, Op::Sub(self.id, rhs.id))
    }
}

impl<'t> ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        let v = self.value().mul(&rhs.value());
        self.unary(v, Op::Mul(self.id, rhs.id))
    }
}

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        let v = self.value().scale(-1.0);
        self.unary(v, Op::Neg(self.id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn untouched_parameter_gets_exact_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1.0, 2.0]));
        let unused = tape.leaf(Tensor::row(vec![5.0, 6.0, 7.0]));
        let y = (x * x).sum();
        let g = tape.grad(y, &[x, unused]);
        assert_eq!(g[0].value().data(), &[2.0, 4.0]);
        assert_eq!(g[1].value().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn detach_stops_the_gradient() {
        let tape = Tape::new();
        let x = tape.scalar(2.0);
        let y = x * x.detach();
        assert_eq!(tape.grad(y, &[x])[0].item(), 2.0);
    }

    #[test]
    fn second_derivative_of_sine() {
        let tape = Tape::new();
        let x = tape.scalar(0.3);
        let y = x.scale(30.0).sin();
        let dy = tape.grad(y, &[x])[0];
        let d2y = tape.grad(dy, &[x])[0];
        assert!((dy.item() - 30.0 * (9.0f64).cos()).abs() < 1e-12);
        assert!((d2y.item() + 900.0 * (9.0f64).sin()).abs() < 1e-10);
    }

    #[test]
    fn gather_pads_with_zero_and_scatter_is_its_adjoint() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1.0, 2.0, 3.0]));
        let g = x.gather(&[2, PAD, 0, 0], 2, 2);
        assert_eq!(g.value().data(), &[3.0, 0.0, 1.0, 1.0]);
        let w = tape.constant(Tensor::new(2, 2, vec![1.0, 10.0, 100.0, 1000.0]));
        let grad = tape.grad((g * w).sum(), &[x])[0];
        assert_eq!(grad.value().data(), &[1100.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 900.0]));
        let s = x.softmax_rows().value();
        for r in 0..2 {
            assert!((s.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        let ls = x.log_softmax_rows().value();
        assert!((ls.get(0, 2) - s.get(0, 2).ln()).abs() < 1e-12);
    }
}
