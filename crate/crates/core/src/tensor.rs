//! Dense row-major tensors with tape-based reverse-mode differentiation.
//!
//! Every op whose inputs live on a [`Graph`] appends one node to that graph's
//! tape. Vector-Jacobian products are themselves written with tensor ops, so a
//! backward pass run with `create_graph = true` records its own nodes and can
//! be differentiated again. This is what the unrolled hypergradient relies on.
//!
//! ```
//! use lmcl_core::tensor::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.leaf(Tensor::scalar(2.0));
//! let y = x.mul(&x).unwrap().mul(&x).unwrap();
//! let dy = g.grad(&y, None, &[&x], true).unwrap();
//! assert_eq!(dy[0].item(), 12.0);
//! let d2y = g.grad(&dy[0], None, &[&x], false).unwrap();
//! assert_eq!(d2y[0].item(), 12.0);
//! ```

use alloc::collections::BTreeMap;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::fmt;

use crate::error::{Error, Result};

/// Append-only record of the operations performed on attached tensors.
#[derive(Clone, Default)]
pub struct Graph {
    tape: Rc<RefCell<Tape>>,
}

#[derive(Default)]
struct Tape {
    nodes: Vec<Node>,
}

struct Node {
    op: Op,
    inputs: Vec<Saved>,
    output: Saved,
}

/// Value snapshot held by the tape. Holds no reference back to the graph.
#[derive(Clone)]
struct Saved {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    id: Option<usize>,
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Affine { scale: f64 },
    MatMul,
    Transpose,
    Relu,
    Exp,
    Log,
    Sqrt,
    Sigmoid,
    LogSoftmax,
    ClampMin(f64),
    Sum,
    Expand,
    RowSum,
    BroadcastCols,
    ColSum,
    BroadcastRows,
    ConcatCols,
    SliceCols { start: usize },
    Take(Rc<Vec<usize>>),
    ScatterAdd(Rc<Vec<usize>>),
    Reshape,
}

#[derive(Clone)]
struct Var {
    graph: Graph,
    id: usize,
}

/// A dense array of `f64` values, optionally attached to a [`Graph`].
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    var: Option<Var>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("node", &self.var.as_ref().map(|v| v.id))
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.tape.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.tape, &other.tape)
    }

    /// Registers `value` as a differentiable leaf of this graph.
    pub fn leaf(&self, value: Tensor) -> Tensor {
        let id = self.push(Op::Leaf, Vec::new(), &value.shape, &value.data);
        Tensor {
            shape: value.shape,
            data: value.data,
            var: Some(Var {
                graph: self.clone(),
                id,
            }),
        }
    }

    fn push(&self, op: Op, inputs: Vec<Saved>, shape: &[usize], data: &Rc<Vec<f64>>) -> usize {
        let mut tape = self.tape.borrow_mut();
        let id = tape.nodes.len();
        tape.nodes.push(Node {
            op,
            inputs,
            output: Saved {
                shape: shape.to_vec(),
                data: data.clone(),
                id: Some(id),
            },
        });
        id
    }

    fn revive(&self, saved: &Saved, attach: bool) -> Tensor {
        Tensor {
            shape: saved.shape.clone(),
            data: saved.data.clone(),
            var: if attach {
                saved.id.map(|id| Var {
                    graph: self.clone(),
                    id,
                })
            } else {
                None
            },
        }
    }

    /// Gradients of `output` with respect to each tensor in `wrt`.
    ///
    /// `seed` is the adjoint of `output` (defaults to ones). It may itself be
    /// attached to the graph; with `create_graph` the returned gradients are
    /// recorded and can be differentiated again. Targets that `output` does
    /// not depend on receive zeros.
    pub fn grad(
        &self,
        output: &Tensor,
        seed: Option<&Tensor>,
        wrt: &[&Tensor],
        create_graph: bool,
    ) -> Result<Vec<Tensor>> {
        let zeros = || wrt.iter().map(|t| Tensor::zeros(&t.shape)).collect();
        let Some(out_var) = output.var.as_ref().filter(|v| v.graph.same(self)) else {
            return Ok(zeros());
        };
        let mut targets = Vec::with_capacity(wrt.len());
        for t in wrt {
            match &t.var {
                Some(v) if v.graph.same(self) => targets.push(Some(v.id)),
                Some(_) => return Err(Error::GraphMismatch { op: "grad" }),
                None => targets.push(None),
            }
        }
        let ids: Vec<usize> = targets.iter().flatten().copied().collect();
        if ids.is_empty() {
            return Ok(zeros());
        }
        let seed = self.seed_for(output, seed)?;
        let found = self.run_backward(out_var.id, seed, Some(&ids), create_graph)?;
        Ok(wrt
            .iter()
            .zip(&targets)
            .map(|(t, id)| {
                id.and_then(|id| found.get(&id).cloned())
                    .unwrap_or_else(|| Tensor::zeros(&t.shape))
            })
            .collect())
    }

    fn seed_for(&self, output: &Tensor, seed: Option<&Tensor>) -> Result<Tensor> {
        match seed {
            Some(s) => {
                if s.shape != output.shape {
                    return Err(Error::shape("grad seed", &[&output.shape, &s.shape]));
                }
                if let Some(v) = &s.var {
                    if !v.graph.same(self) {
                        return Err(Error::GraphMismatch { op: "grad seed" });
                    }
                }
                Ok(s.clone())
            }
            None => Ok(Tensor::ones(&output.shape)),
        }
    }

    /// Reverse sweep from `out_id`. With `targets = None` every leaf is a target.
    fn run_backward(
        &self,
        out_id: usize,
        seed: Tensor,
        targets: Option<&[usize]>,
        create_graph: bool,
    ) -> Result<BTreeMap<usize, Tensor>> {
        let n = out_id + 1;
        let mut is_target = vec![false; n];
        let floor = match targets {
            Some(ids) => {
                for &id in ids {
                    if id < n {
                        is_target[id] = true;
                    }
                }
                ids.iter().copied().min().unwrap_or(n)
            }
            None => 0,
        };
        // A node is relevant when some target is reachable through its inputs.
        let mut relevant = vec![false; n];
        {
            let tape = self.tape.borrow();
            for id in floor..n {
                let node = &tape.nodes[id];
                relevant[id] = match targets {
                    Some(_) => is_target[id],
                    None => matches!(node.op, Op::Leaf),
                } || node
                    .inputs
                    .iter()
                    .any(|s| s.id.is_some_and(|j| j >= floor && relevant[j]));
                if targets.is_none() && matches!(node.op, Op::Leaf) {
                    is_target[id] = true;
                }
            }
        }
        let mut found = BTreeMap::new();
        if !relevant[out_id] {
            return Ok(found);
        }
        let mut adjoint: Vec<Option<Tensor>> = vec![None; n];
        adjoint[out_id] = Some(if create_graph { seed } else { seed.detach() });
        for id in (floor..n).rev() {
            if !relevant[id] {
                continue;
            }
            let Some(g) = adjoint[id].take() else {
                continue;
            };
            let (op, inputs, output) = {
                let tape = self.tape.borrow();
                let node = &tape.nodes[id];
                (node.op.clone(), node.inputs.clone(), node.output.clone())
            };
            let needs: Vec<bool> = inputs
                .iter()
                .map(|s| s.id.is_some_and(|j| j >= floor && relevant[j]))
                .collect();
            if needs.iter().any(|&b| b) {
                let ins: Vec<Tensor> = inputs.iter().map(|s| self.revive(s, create_graph)).collect();
                let out = self.revive(&output, create_graph);
                let grads = vjp(&op, &ins, &out, &g, &needs)?;
                for ((s, need), gi) in inputs.iter().zip(&needs).zip(grads) {
                    if !need {
                        continue;
                    }
                    let (Some(j), Some(gi)) = (s.id, gi) else {
                        continue;
                    };
                    adjoint[j] = Some(match adjoint[j].take() {
                        Some(acc) => acc.add(&gi)?,
                        None => gi,
                    });
                }
            }
            if is_target[id] {
                found.insert(id, g);
            }
        }
        Ok(found)
    }
}

/// Gradients of a scalar with respect to every leaf it depends on.
#[derive(Clone, Default)]
pub struct Gradients {
    graph: Option<Graph>,
    map: BTreeMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient for `leaf`, or `None` if the loss does not depend on it.
    pub fn get(&self, leaf: &Tensor) -> Option<&Tensor> {
        let var = leaf.var.as_ref()?;
        match &self.graph {
            Some(g) if g.same(&var.graph) => self.map.get(&var.id),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Vector-Jacobian products, expressed with tensor ops so they differentiate again.
fn vjp(op: &Op, x: &[Tensor], out: &Tensor, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
    let need = |i: usize| needs.get(i).copied().unwrap_or(false);
    let one = |t: Tensor| Ok(vec![Some(t)]);
    match op {
        Op::Leaf => Ok(Vec::new()),
        Op::Add => Ok(vec![Some(g.clone()), Some(g.clone())]),
        Op::Sub => Ok(vec![Some(g.clone()), if need(1) { Some(g.neg()) } else { None }]),
        Op::Mul => Ok(vec![
            if need(0) { Some(g.mul(&x[1])?) } else { None },
            if need(1) { Some(g.mul(&x[0])?) } else { None },
        ]),
        Op::Div => {
            let ga = g.div(&x[1])?;
            let gb = if need(1) { Some(ga.mul(out)?.neg()) } else { None };
            Ok(vec![Some(ga), gb])
        }
        Op::Affine { scale } => one(g.scale(*scale)),
        Op::MatMul => Ok(vec![
            if need(0) { Some(g.matmul(&x[1].t()?)?) } else { None },
            if need(1) { Some(x[0].t()?.matmul(g)?) } else { None },
        ]),
        Op::Transpose => one(g.t()?),
        Op::Relu => one(g.mul(&x[0].mask(|v| v > 0.0))?),
        Op::Exp => one(g.mul(out)?),
        Op::Log => one(g.div(&x[0])?),
        Op::Sqrt => one(g.scale(0.5).div(out)?),
        Op::Sigmoid => one(g.mul(&out.mul(&out.affine(-1.0, 1.0))?)?),
        Op::LogSoftmax => {
            let n = out.shape[1];
            let soft = out.exp();
            let total = g.row_sum()?.broadcast_cols(n)?;
            one(g.sub(&soft.mul(&total)?)?)
        }
        Op::ClampMin(lo) => {
            let lo = *lo;
            one(g.mul(&x[0].mask(|v| v >= lo))?)
        }
        Op::Sum => one(g.expand(&x[0].shape)?),
        Op::Expand => one(g.sum()),
        Op::RowSum => one(g.broadcast_cols(x[0].shape[1])?),
        Op::BroadcastCols => one(g.row_sum()?),
        Op::ColSum => one(g.broadcast_rows(x[0].shape[0])?),
        Op::BroadcastRows => one(g.col_sum()?.reshape(&x[0].shape)?),
        Op::ConcatCols => {
            let mut start = 0;
            let mut grads = Vec::with_capacity(x.len());
            for xi in x {
                let w = xi.shape[1];
                grads.push(Some(g.slice_cols(start, start + w)?));
                start += w;
            }
            Ok(grads)
        }
        Op::SliceCols { start } => {
            let rows = x[0].shape[0];
            let total = x[0].shape[1];
            let w = out.shape[1];
            let mut parts = Vec::with_capacity(3);
            if *start > 0 {
                parts.push(Tensor::zeros(&[rows, *start]));
            }
            parts.push(g.clone());
            if start + w < total {
                parts.push(Tensor::zeros(&[rows, total - start - w]));
            }
            let refs: Vec<&Tensor> = parts.iter().collect();
            one(Tensor::concat_cols(&refs)?)
        }
        Op::Take(idx) => one(g.scatter_add_rc(idx.clone(), &x[0].shape)?),
        Op::ScatterAdd(idx) => one(g.take_rc(idx.clone(), &x[0].shape)?),
        Op::Reshape => one(g.reshape(&x[0].shape)?),
    }
}

impl Tensor {
    /// Builds a detached tensor; `data.len()` must equal the product of `shape`.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() || shape.contains(&0) {
            return Err(Error::shape("from_vec", &[shape, &[data.len()]]));
        }
        Ok(Self::raw(shape.to_vec(), data))
    }

    fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Tensor {
            shape,
            data: Rc::new(data),
            var: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::raw(vec![1], vec![v])
    }

    /// 1-D tensor from a slice.
    pub fn vector(v: &[f64]) -> Self {
        Self::raw(vec![v.len()], v.to_vec())
    }

    /// 2-D tensor from row slices of equal length.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_vec(data, &[rows.len(), cols])
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::raw(shape.to_vec(), vec![v; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    /// The single value of a one-element tensor.
    ///
    /// # Panics
    /// Panics if the tensor holds more than one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.var.is_some()
    }

    /// The graph this tensor is attached to, if any.
    pub fn graph(&self) -> Option<&Graph> {
        self.var.as_ref().map(|v| &v.graph)
    }

    /// Same values, no graph node.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            var: None,
        }
    }

    /// Gradients of this single-element tensor with respect to every leaf.
    ///
    /// A detached tensor yields an empty map.
    pub fn backward(&self) -> Result<Gradients> {
        self.backward_inner(false)
    }

    /// Like [`Tensor::backward`] but records the backward pass so the
    /// returned gradients can be differentiated again.
    pub fn backward_create_graph(&self) -> Result<Gradients> {
        self.backward_inner(true)
    }

    fn backward_inner(&self, create_graph: bool) -> Result<Gradients> {
        if self.data.len() != 1 {
            return Err(Error::NotScalar {
                shape: self.shape.clone(),
            });
        }
        let Some(var) = &self.var else {
            return Ok(Gradients::default());
        };
        let map = var
            .graph
            .run_backward(var.id, Tensor::ones(&self.shape), None, create_graph)?;
        Ok(Gradients {
            graph: Some(var.graph.clone()),
            map,
        })
    }

    fn common_graph(op: &'static str, inputs: &[&Tensor]) -> Result<Option<Graph>> {
        let mut found: Option<&Graph> = None;
        for t in inputs {
            if let Some(v) = &t.var {
                match found {
                    Some(g) if !g.same(&v.graph) => return Err(Error::GraphMismatch { op }),
                    Some(_) => {}
                    None => found = Some(&v.graph),
                }
            }
        }
        Ok(found.cloned())
    }

    fn record(op_name: &'static str, op: Op, inputs: &[&Tensor], shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let data = Rc::new(data);
        let var = match Self::common_graph(op_name, inputs)? {
            None => None,
            Some(graph) => {
                let saved = inputs
                    .iter()
                    .map(|t| Saved {
                        shape: t.shape.clone(),
                        data: t.data.clone(),
                        id: t.var.as_ref().map(|v| v.id),
                    })
                    .collect();
                let id = graph.push(op, saved, &shape, &data);
                Some(Var { graph, id })
            }
        };
        Ok(Tensor { shape, data, var })
    }

    /// Unary op that never fails.
    fn unary(&self, name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Self::record(name, op, &[self], self.shape.clone(), data).expect("unary op on a single graph")
    }

    fn zip(&self, other: &Tensor, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(name, &[&self.shape, &other.shape]));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::record(name, op, &[self, other], self.shape.clone(), data)
    }

    fn expect_2d(&self, name: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(Error::shape(name, &[&self.shape])),
        }
    }

    /// Constant 0/1 mask; never attached.
    fn mask(&self, keep: impl Fn(f64) -> bool) -> Tensor {
        let data = self.data.iter().map(|&v| if keep(v) { 1.0 } else { 0.0 }).collect();
        Self::raw(self.shape.clone(), data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "div", Op::Div, |a, b| a / b)
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&self, scale: f64, shift: f64) -> Tensor {
        self.unary("affine", Op::Affine { scale }, |v| scale * v + shift)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.affine(s, 0.0)
    }

    pub fn neg(&self) -> Tensor {
        self.affine(-1.0, 0.0)
    }

    pub fn relu(&self) -> Tensor {
        self.unary("relu", Op::Relu, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn exp(&self) -> Tensor {
        self.unary("exp", Op::Exp, libm::exp)
    }

    pub fn ln(&self) -> Tensor {
        self.unary("log", Op::Log, libm::log)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary("sqrt", Op::Sqrt, libm::sqrt)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary("sigmoid", Op::Sigmoid, |v| {
            if v >= 0.0 {
                1.0 / (1.0 + libm::exp(-v))
            } else {
                let e = libm::exp(v);
                e / (1.0 + e)
            }
        })
    }

    /// `max(x, lo)`; the gradient passes where `x >= lo`.
    pub fn clamp_min(&self, lo: f64) -> Tensor {
        self.unary("clamp_min", Op::ClampMin(lo), |v| if v >= lo { v } else { lo })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.expect_2d("matmul")?;
        let (k2, n) = other.expect_2d("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &[&self.shape, &other.shape]));
        }
        let a = &self.data;
        let b = &other.data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        Self::record("matmul", Op::MatMul, &[self, other], vec![m, n], out)
    }

    pub fn t(&self) -> Result<Tensor> {
        let (m, n) = self.expect_2d("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::record("transpose", Op::Transpose, &[self], vec![n, m], out)
    }

    /// Row-wise log-softmax via max-shifted log-sum-exp.
    pub fn log_softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = self.expect_2d("log_softmax")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|&v| libm::exp(v - max)).sum::<f64>());
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        Self::record("log_softmax", Op::LogSoftmax, &[self], vec![m, n], out)
    }

    pub fn softmax_rows(&self) -> Result<Tensor> {
        Ok(self.log_softmax_rows()?.exp())
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Tensor {
        let s = self.data.iter().sum();
        Self::record("sum", Op::Sum, &[self], vec![1], vec![s]).expect("sum on a single graph")
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor> {
        if self.numel() != 1 {
            return Err(Error::shape("expand", &[&self.shape, shape]));
        }
        let data = vec![self.data[0]; numel(shape)];
        Self::record("expand", Op::Expand, &[self], shape.to_vec(), data)
    }

    /// `[m, n] -> [m, 1]`.
    pub fn row_sum(&self) -> Result<Tensor> {
        let (m, n) = self.expect_2d("row_sum")?;
        let data = (0..m).map(|i| self.data[i * n..(i + 1) * n].iter().sum()).collect();
        Self::record("row_sum", Op::RowSum, &[self], vec![m, 1], data)
    }

    /// `[m, 1] -> [m, n]`.
    pub fn broadcast_cols(&self, n: usize) -> Result<Tensor> {
        let (m, c) = self.expect_2d("broadcast_cols")?;
        if c != 1 {
            return Err(Error::shape("broadcast_cols", &[&self.shape]));
        }
        let data = (0..m).flat_map(|i| core::iter::repeat_n(self.data[i], n)).collect();
        Self::record("broadcast_cols", Op::BroadcastCols, &[self], vec![m, n], data)
    }

    /// `[m, n] -> [1, n]`.
    pub fn col_sum(&self) -> Result<Tensor> {
        let (m, n) = self.expect_2d("col_sum")?;
        let mut data = vec![0.0; n];
        for i in 0..m {
            for (o, &v) in data.iter_mut().zip(&self.data[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        Self::record("col_sum", Op::ColSum, &[self], vec![1, n], data)
    }

    /// `[1, n]` (or `[n]`) `-> [m, n]`.
    pub fn broadcast_rows(&self, m: usize) -> Result<Tensor> {
        let n = match self.shape.as_slice() {
            &[1, n] | &[n] => n,
            _ => return Err(Error::shape("broadcast_rows", &[&self.shape])),
        };
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(&self.data);
        }
        Self::record("broadcast_rows", Op::BroadcastRows, &[self], vec![m, n], data)
    }

    /// Adds a bias row (`[n]` or `[1, n]`) to every row of `[m, n]`.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = self.expect_2d("add_row")?;
        if bias.numel() != n {
            return Err(Error::shape("add_row", &[&self.shape, &bias.shape]));
        }
        self.add(&bias.broadcast_rows(m)?)
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return Err(Error::invalid("concat_cols", "no inputs"));
        };
        let m = first.expect_2d("concat_cols")?.0;
        let mut total = 0;
        for p in parts {
            let (r, c) = p.expect_2d("concat_cols")?;
            if r != m {
                let shapes: Vec<&[usize]> = parts.iter().map(|p| p.shape.as_slice()).collect();
                return Err(Error::shape("concat_cols", &shapes));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                let c = p.shape[1];
                data.extend_from_slice(&p.data[i * c..(i + 1) * c]);
            }
        }
        Self::record("concat_cols", Op::ConcatCols, parts, vec![m, total], data)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (m, n) = self.expect_2d("slice_cols")?;
        if start >= end || end > n {
            return Err(Error::shape("slice_cols", &[&self.shape, &[start, end]]));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&self.data[i * n + start..i * n + end]);
        }
        Self::record("slice_cols", Op::SliceCols { start }, &[self], vec![m, w], data)
    }

    /// Gathers flat elements: `out[j] = self.flat[indices[j]]`, reshaped to `shape`.
    pub fn take(&self, indices: Vec<usize>, shape: &[usize]) -> Result<Tensor> {
        self.take_rc(Rc::new(indices), shape)
    }

    fn take_rc(&self, indices: Rc<Vec<usize>>, shape: &[usize]) -> Result<Tensor> {
        let len = self.numel();
        if numel(shape) != indices.len() || indices.iter().any(|&i| i >= len) {
            return Err(Error::shape("take", &[&self.shape, shape]));
        }
        let data = indices.iter().map(|&i| self.data[i]).collect();
        Self::record("take", Op::Take(indices), &[self], shape.to_vec(), data)
    }

    /// Adjoint of [`Tensor::take`]: accumulates `self.flat[j]` into `out[indices[j]]`.
    pub fn scatter_add(&self, indices: Vec<usize>, shape: &[usize]) -> Result<Tensor> {
        self.scatter_add_rc(Rc::new(indices), shape)
    }

    fn scatter_add_rc(&self, indices: Rc<Vec<usize>>, shape: &[usize]) -> Result<Tensor> {
        let len = numel(shape);
        if indices.len() != self.numel() || indices.iter().any(|&i| i >= len) {
            return Err(Error::shape("scatter_add", &[&self.shape, shape]));
        }
        let mut data = vec![0.0; len];
        for (&i, &v) in indices.iter().zip(self.data.iter()) {
            data[i] += v;
        }
        Self::record("scatter_add", Op::ScatterAdd(indices), &[self], shape.to_vec(), data)
    }

    /// Selects rows of a matrix.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let (m, n) = self.expect_2d("gather_rows")?;
        if rows.iter().any(|&r| r >= m) {
            return Err(Error::shape("gather_rows", &[&self.shape, &[rows.len()]]));
        }
        let idx = rows.iter().flat_map(|&r| r * n..(r + 1) * n).collect();
        self.take(idx, &[rows.len(), n])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::shape("reshape", &[&self.shape, shape]));
        }
        Self::record("reshape", Op::Reshape, &[self], shape.to_vec(), self.data.to_vec())
    }

    /// Divides every row by its Euclidean norm.
    pub fn l2_normalize_rows(&self) -> Result<Tensor> {
        let (_, n) = self.expect_2d("l2_normalize")?;
        let norm = self.mul(self)?.row_sum()?.affine(1.0, 1e-24).sqrt();
        self.div(&norm.broadcast_cols(n)?)
    }

    /// Row-wise dot products of two `[m, n]` matrices, shape `[m]`.
    pub fn row_dot(&self, other: &Tensor) -> Result<Tensor> {
        let m = self.expect_2d("row_dot")?.0;
        self.mul(other)?.row_sum()?.reshape(&[m])
    }

    /// Dot product of two equally shaped tensors, shape `[1]`.
    pub fn dot(&self, other: &Tensor) -> Result<Tensor> {
        Ok(self.mul(other)?.sum())
    }
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let base = x.to_vec();
    let mut grad = vec![0.0; base.len()];
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        let up = f(&Tensor::from_vec(probe.clone(), x.shape())?)?;
        probe[i] = base[i] - h;
        let down = f(&Tensor::from_vec(probe.clone(), x.shape())?)?;
        probe[i] = base[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    Tensor::from_vec(grad, x.shape())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn relu_values() {
        let x = Tensor::vector(&[-1.0, 0.0, 2.0]);
        assert_eq!(x.relu().to_vec(), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let x = Tensor::matrix(&[&[0.0, 0.0]]).unwrap();
        let p = x.softmax_rows().unwrap();
        assert!(close(p.data()[0], 0.5, 1e-15) && close(p.data()[1], 0.5, 1e-15));
    }

    #[test]
    fn normalize_three_four_five() {
        let x = Tensor::matrix(&[&[3.0, 4.0]]).unwrap();
        let y = x.l2_normalize_rows().unwrap();
        assert!(close(y.data()[0], 0.6, 1e-12) && close(y.data()[1], 0.8, 1e-12));
    }

    #[test]
    fn square_gradient() {
        let g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let grads = x.mul(&x).unwrap().backward().unwrap();
        assert_eq!(grads.get(&x).unwrap().item(), 6.0);
    }

    #[test]
    fn relu_gradient_at_negative_and_zero() {
        for v in [-1.0, 0.0] {
            let g = Graph::new();
            let x = g.leaf(Tensor::scalar(v));
            let grads = x.relu().sum().backward().unwrap();
            assert_eq!(grads.get(&x).unwrap().item(), 0.0);
        }
    }

    #[test]
    fn cube_second_derivative() {
        let g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = x.mul(&x).unwrap().mul(&x).unwrap();
        let grads = y.backward_create_graph().unwrap();
        let dy = grads.get(&x).unwrap().clone();
        assert_eq!(dy.item(), 12.0);
        let d2 = dy.backward().unwrap();
        assert_eq!(d2.get(&x).unwrap().item(), 12.0);
    }

    #[test]
    fn detach_freezes_one_factor() {
        let g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let d = x.detach();
        assert_eq!(d.data(), x.data());
        assert!(!d.requires_grad());
        let grads = x.mul(&d).unwrap().backward().unwrap();
        assert_eq!(grads.get(&x).unwrap().item(), 3.0);
    }

    #[test]
    fn backward_on_detached_loss_is_empty() {
        let g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let loss = x.detach().mul(&x.detach()).unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.is_empty());
        assert!(grads.get(&x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(x.relu().backward(), Err(Error::NotScalar { .. })));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn mixing_graphs_fails() {
        let a = Graph::new().leaf(Tensor::scalar(1.0));
        let b = Graph::new().leaf(Tensor::scalar(1.0));
        assert!(matches!(a.add(&b), Err(Error::GraphMismatch { .. })));
    }

    #[test]
    fn finite_difference_of_square() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_grad(|t| Ok(t.item() * t.item()), &x, 1e-6).unwrap();
        assert!(close(g.item(), 6.0, 1e-6));
        let c = finite_diff_grad(|_| Ok(4.0), &Tensor::vector(&[1.0, 2.0]), 1e-6).unwrap();
        assert_eq!(c.to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn grad_with_unreached_target_is_zero() {
        let g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.0));
        let y = g.leaf(Tensor::vector(&[1.0, 2.0]));
        let out = x.scale(2.0);
        let gr = g.grad(&out, None, &[&x, &y], false).unwrap();
        assert_eq!(gr[0].item(), 2.0);
        assert_eq!(gr[1].to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn grad_stops_at_intermediate_target() {
        let g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = x.scale(3.0);
        let z = y.mul(&y).unwrap();
        let gr = g.grad(&z, None, &[&y], false).unwrap();
        assert_eq!(gr[0].item(), 12.0);
    }

    #[test]
    fn bias_gradient_keeps_vector_shape() {
        let g = Graph::new();
        let b = g.leaf(Tensor::vector(&[1.0, 2.0]));
        let x = Tensor::zeros(&[3, 2]);
        let loss = x.add_row(&b).unwrap().sum();
        let gr = g.grad(&loss, None, &[&b], false).unwrap();
        assert_eq!(gr[0].shape(), &[2]);
        assert_eq!(gr[0].data(), &[3.0, 3.0]);
    }
}
