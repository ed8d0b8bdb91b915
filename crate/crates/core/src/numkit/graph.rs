//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of every node that depends on a trainable leaf. Parameters are
//! bound from a [`ParamStore`] by value; [`ParamStore::accumulate`] writes
//! their gradients back.
//!
//! A graph is built per training step and dropped afterwards.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::conv::{conv2d_backward, conv2d_forward};
use super::gemm::gemm;
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    None,
    /// rhs is repeated along lhs's leading axis
    Rhs,
    /// lhs is repeated along rhs's leading axis
    Lhs,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    LeakyRelu(usize, f64),
    Square(usize),
    Sqrt(usize),
    Softplus(usize),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    NormLast(usize),
    NormalizeLast(usize),
    ConcatLast(usize, usize),
    SliceLast(usize, usize),
    SelectRows(usize, Rc<[usize]>),
    Reshape(usize),
    BroadcastRows(usize),
    Conv2d {
        input: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ChannelBias(usize, usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// An operation tape.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<ParamId, usize>>,
}

/// A node handle on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    id: usize,
    graph: &'g Graph,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Per-node gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, n)| self.grads[n].as_deref())
    }

    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(|&(p, n)| self.grads[n].as_deref().map(|g| (p, g)))
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

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn bcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bcast> {
    if a == b {
        Ok(Bcast::None)
    } else if !a.is_empty() && &a[1..] == b {
        Ok(Bcast::Rhs)
    } else if !b.is_empty() && &b[1..] == a {
        Ok(Bcast::Lhs)
    } else {
        Err(Error::dim(op, a, b))
    }
}

fn zip_bcast(a: &Tensor, b: &Tensor, kind: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (ad, bd) = (a.data(), b.data());
    let (shape, data): (Vec<usize>, Vec<f64>) = match kind {
        Bcast::None => (
            a.shape().to_vec(),
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        ),
        Bcast::Rhs => {
            let w = bd.len();
            (
                a.shape().to_vec(),
                ad.iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, bd[i % w]))
                    .collect(),
            )
        }
        Bcast::Lhs => {
            let w = ad.len();
            (
                b.shape().to_vec(),
                bd.iter()
                    .enumerate()
                    .map(|(i, &y)| f(ad[i % w], y))
                    .collect(),
            )
        }
    };
    Tensor::new(shape, data).expect("broadcast shape")
}

/// Reduces a full-size gradient onto a broadcast operand.
fn reduce_to(g: Vec<f64>, target_len: usize) -> Vec<f64> {
    if g.len() == target_len {
        return g;
    }
    let mut out = vec![0.0; target_len];
    for (i, v) in g.into_iter().enumerate() {
        out[i % target_len] += v;
    }
    out
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            id: nodes.len() - 1,
            graph: self,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Records a leaf. It receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// Binds a parameter; repeated binds of the same id share one node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&n) = self.bound.borrow().get(&id) {
            return Var { id: n, graph: self };
        }
        let t = store.get(id);
        let rg = t.requires_grad();
        let mut value = t.clone();
        value.zero_grad();
        let v = self.push(value, Op::Leaf, rg);
        self.bound.borrow_mut().insert(id, v.id);
        v
    }

    /// Runs reverse-mode differentiation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            backprop(&nodes, node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let params = self.bound.borrow().iter().map(|(&p, &n)| (p, n)).collect();
        Ok(Gradients { grads, params })
    }

    /// Backward pass whose parameter gradients are accumulated into `store`.
    pub fn backward_into(&self, loss: Var<'_>, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        store.accumulate(&grads);
        Ok(())
    }
}

fn add_grad(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, g: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    let need = |id: usize| nodes[id].requires_grad;
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if need(*a) {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, tb.data(), true, &mut ga, 0.0);
                add_grad(grads, nodes, *a, ga);
            }
            if need(*b) {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, ta.data(), true, g, false, &mut gb, 0.0);
                add_grad(grads, nodes, *b, gb);
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) {
                -1.0
            } else {
                1.0
            };
            if need(*a) {
                add_grad(grads, nodes, *a, reduce_to(g.to_vec(), val(*a).len()));
            }
            if need(*b) {
                let gb = g.iter().map(|x| sign * x).collect();
                add_grad(grads, nodes, *b, reduce_to(gb, val(*b).len()));
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (ad, bd) = (ta.data(), tb.data());
            let (wa, wb) = (ad.len(), bd.len());
            if need(*a) {
                let ga = g.iter().enumerate().map(|(i, x)| x * bd[i % wb]).collect();
                add_grad(grads, nodes, *a, reduce_to(ga, wa));
            }
            if need(*b) {
                let gb = g.iter().enumerate().map(|(i, x)| x * ad[i % wa]).collect();
                add_grad(grads, nodes, *b, reduce_to(gb, wb));
            }
        }
        Op::Scale(a, s) => add_grad(grads, nodes, *a, g.iter().map(|x| x * s).collect()),
        Op::AddScalar(a) | Op::Reshape(a) => add_grad(grads, nodes, *a, g.to_vec()),
        Op::Exp(a) => {
            let ga = g.iter().zip(out.data()).map(|(x, y)| x * y).collect();
            add_grad(grads, nodes, *a, ga);
        }
        Op::Log(a) => {
            let ga = g.iter().zip(val(*a).data()).map(|(x, y)| x / y).collect();
            add_grad(grads, nodes, *a, ga);
        }
        Op::Tanh(a) => {
            let ga = g
                .iter()
                .zip(out.data())
                .map(|(x, y)| x * (1.0 - y * y))
                .collect();
            add_grad(grads, nodes, *a, ga);
        }
        Op::LeakyRelu(a, slope) => {
            let ga = g
                .iter()
                .zip(val(*a).data())
                .map(|(x, &y)| if y > 0.0 { *x } else { x * slope })
                .collect();
            add_grad(grads, nodes, *a, ga);
        }
        Op::Square(a) => {
            let ga = g
                .iter()
                .zip(val(*a).data())
                .map(|(x, y)| 2.0 * x * y)
                .collect();
            add_grad(grads, nodes, *a, ga);
        }
        Op::Sqrt(a) => {
            let ga = g
                .iter()
                .zip(out.data())
                .map(|(x, &y)| if y > 0.0 { 0.5 * x / y } else { 0.0 })
                .collect();
            add_grad(grads, nodes, *a, ga);
        }
        Op::Softplus(a) => {
            let ga = g
                .iter()
                .zip(val(*a).data())
                .map(|(x, &y)| x * sigmoid(y))
                .collect();
            add_grad(grads, nodes, *a, ga);
        }
        Op::Sum(a) => add_grad(grads, nodes, *a, vec![g[0]; val(*a).len()]),
        Op::Mean(a) => {
            let n = val(*a).len();
            add_grad(grads, nodes, *a, vec![g[0] / n as f64; n]);
        }
        Op::SumLast(a) => {
            let ta = val(*a);
            let w = last_dim(ta.shape());
            let ga = (0..ta.len()).map(|i| g[i / w]).collect();
            add_grad(grads, nodes, *a, ga);
        }
        Op::NormLast(a) => {
            let ta = val(*a);
            let w = last_dim(ta.shape());
            let ga = ta
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let n = out.data()[i / w];
                    if n > 0.0 {
                        g[i / w] * x / n
                    } else {
                        0.0
                    }
                })
                .collect();
            add_grad(grads, nodes, *a, ga);
        }
        Op::NormalizeLast(a) => {
            let ta = val(*a);
            let w = last_dim(ta.shape());
            let mut ga = vec![0.0; ta.len()];
            for r in 0..ta.len() / w {
                let x = &ta.data()[r * w..(r + 1) * w];
                let y = &out.data()[r * w..(r + 1) * w];
                let gr = &g[r * w..(r + 1) * w];
                let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n == 0.0 {
                    continue;
                }
                let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                for j in 0..w {
                    ga[r * w + j] = (gr[j] - y[j] * dot) / n;
                }
            }
            add_grad(grads, nodes, *a, ga);
        }
        Op::ConcatLast(a, b) => {
            let (wa, wb) = (last_dim(val(*a).shape()), last_dim(val(*b).shape()));
            let rows = g.len() / (wa + wb);
            let (mut ga, mut gb) = (Vec::with_capacity(rows * wa), Vec::with_capacity(rows * wb));
            for r in 0..rows {
                let row = &g[r * (wa + wb)..(r + 1) * (wa + wb)];
                ga.extend_from_slice(&row[..wa]);
                gb.extend_from_slice(&row[wa..]);
            }
            add_grad(grads, nodes, *a, ga);
            add_grad(grads, nodes, *b, gb);
        }
        Op::SliceLast(a, start) => {
            let ta = val(*a);
            let w = last_dim(ta.shape());
            let len = last_dim(out.shape());
            let mut ga = vec![0.0; ta.len()];
            for r in 0..ta.len() / w {
                ga[r * w + start..r * w + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
            }
            add_grad(grads, nodes, *a, ga);
        }
        Op::SelectRows(a, idx) => {
            let ta = val(*a);
            let w = ta.row_len();
            let mut ga = vec![0.0; ta.len()];
            for (r, &src) in idx.iter().enumerate() {
                for j in 0..w {
                    ga[src * w + j] += g[r * w + j];
                }
            }
            add_grad(grads, nodes, *a, ga);
        }
        Op::BroadcastRows(a) => {
            let n = val(*a).len();
            add_grad(grads, nodes, *a, reduce_to(g.to_vec(), n));
        }
        Op::Conv2d {
            input,
            kernel,
            stride,
            padding,
        } => {
            let (di, dk) = conv2d_backward(
                val(*input),
                val(*kernel),
                g,
                *stride,
                *padding,
                need(*input),
                need(*kernel),
            )?;
            if let Some(di) = di {
                add_grad(grads, nodes, *input, di);
            }
            if let Some(dk) = dk {
                add_grad(grads, nodes, *kernel, dk);
            }
        }
        Op::ChannelBias(x, b) => {
            add_grad(grads, nodes, *x, g.to_vec());
            if need(*b) {
                let s = val(*x).shape();
                let (c, hw) = (s[1], s[2] * s[3]);
                let mut gb = vec![0.0; c];
                for (i, v) in g.iter().enumerate() {
                    gb[(i / hw) % c] += v;
                }
                add_grad(grads, nodes, *b, gb);
            }
        }
    }
    Ok(())
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.rg(self.id)
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'g> {
        let rg = self.requires_grad();
        self.graph.push(value, op, rg)
    }

    fn map(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let v = self.value().map(f);
        self.unary(v, op)
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars from different graphs"
        );
    }

    /// A gradient-blocking copy of this node.
    pub fn detach(self) -> Var<'g> {
        let v = (*self.value()).clone();
        self.graph.push(v, Op::Leaf, false)
    }

    pub fn matmul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&rhs);
        let (a, b) = (self.value(), rhs.value());
        let out = a.matmul(&b)?;
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(self.graph.push(out, Op::MatMul(self.id, rhs.id), rg))
    }

    fn binary(
        self,
        rhs: Var<'g>,
        name: &'static str,
        mk: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        self.same_graph(&rhs);
        let (a, b) = (self.value(), rhs.value());
        let kind = bcast_kind(name, a.shape(), b.shape())?;
        let out = zip_bcast(&a, &b, kind, f);
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(self.graph.push(out, mk(self.id, rhs.id), rg))
    }

    /// Elementwise sum; either side may omit the leading batch axis.
    pub fn add(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.binary(rhs, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.binary(rhs, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.binary(rhs, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        self.map(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, s: f64) -> Var<'g> {
        self.map(Op::AddScalar(self.id), |x| x + s)
    }

    pub fn exp(self) -> Var<'g> {
        self.map(Op::Exp(self.id), f64::exp)
    }

    pub fn log(self) -> Var<'g> {
        self.map(Op::Log(self.id), f64::ln)
    }

    pub fn tanh(self) -> Var<'g> {
        self.map(Op::Tanh(self.id), f64::tanh)
    }

    pub fn relu(self) -> Var<'g> {
        self.leaky_relu(0.0)
    }

    /// `max(0, x)`; an alias of [`Var::relu`] for hinge losses.
    pub fn clamp_min_zero(self) -> Var<'g> {
        self.relu()
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g> {
        self.map(Op::LeakyRelu(self.id, slope), move |x| {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        })
    }

    pub fn square(self) -> Var<'g> {
        self.map(Op::Square(self.id), |x| x * x)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.map(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn softplus(self) -> Var<'g> {
        self.map(Op::Softplus(self.id), softplus)
    }

    pub fn sum(self) -> Var<'g> {
        let s = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'g> {
        let v = self.value();
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.unary(Tensor::scalar(s), Op::Mean(self.id))
    }

    fn rowwise(&self) -> (Rc<Tensor>, usize, Vec<usize>) {
        let v = self.value();
        let w = last_dim(v.shape());
        let mut shape = v.shape().to_vec();
        shape.pop();
        (v, w, shape)
    }

    /// Sum over the last axis.
    pub fn sum_last(self) -> Var<'g> {
        let (v, w, shape) = self.rowwise();
        let data = v.data().chunks(w).map(|r| r.iter().sum()).collect();
        self.unary(
            Tensor::new(shape, data).expect("sum_last"),
            Op::SumLast(self.id),
        )
    }

    /// L2 norm over the last axis.
    pub fn norm_last(self) -> Var<'g> {
        let (v, w, shape) = self.rowwise();
        let data = v
            .data()
            .chunks(w)
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        self.unary(
            Tensor::new(shape, data).expect("norm_last"),
            Op::NormLast(self.id),
        )
    }

    /// Scales each last-axis row to unit L2 norm; zero rows stay zero.
    pub fn normalize_last(self) -> Var<'g> {
        let v = self.value();
        let w = last_dim(v.shape());
        let mut data = v.data().to_vec();
        for r in data.chunks_mut(w) {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                r.iter_mut().for_each(|x| *x /= n);
            }
        }
        let out = Tensor::new(v.shape().to_vec(), data).expect("normalize_last");
        self.unary(out, Op::NormalizeLast(self.id))
    }

    pub fn concat_last(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&rhs);
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::dim("concat_last", sa, sb));
        }
        let (wa, wb) = (last_dim(sa), last_dim(sb));
        let rows = a.len() / wa;
        let mut data = Vec::with_capacity(a.len() + b.len());
        for r in 0..rows {
            data.extend_from_slice(&a.data()[r * wa..(r + 1) * wa]);
            data.extend_from_slice(&b.data()[r * wb..(r + 1) * wb]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = wa + wb;
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(self.graph.push(
            Tensor::new(shape, data)?,
            Op::ConcatLast(self.id, rhs.id),
            rg,
        ))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(self, start: usize, len: usize) -> Result<Var<'g>> {
        let v = self.value();
        let w = last_dim(v.shape());
        if v.shape().is_empty() || len == 0 || start + len > w {
            return Err(Error::dim("slice_last", v.shape(), &[start, len]));
        }
        let data = v
            .data()
            .chunks(w)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.unary(Tensor::new(shape, data)?, Op::SliceLast(self.id, start)))
    }

    /// Gathers leading-axis rows; indices may repeat.
    pub fn select_rows(self, idx: &[usize]) -> Result<Var<'g>> {
        let v = self.value();
        if v.shape().is_empty() || idx.iter().any(|&i| i >= v.shape()[0]) || idx.is_empty() {
            return Err(Error::dim("select_rows", v.shape(), &[idx.len()]));
        }
        let out = v.gather_rows(idx);
        Ok(self.unary(out, Op::SelectRows(self.id, idx.into())))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let out = self.value().reshape(shape)?;
        Ok(self.unary(out, Op::Reshape(self.id)))
    }

    /// Repeats a row vector `rows` times along a new leading axis.
    pub fn broadcast_rows(self, rows: usize) -> Var<'g> {
        let v = self.value();
        let mut shape = vec![rows];
        shape.extend_from_slice(v.shape());
        let data = (0..rows).flat_map(|_| v.data().iter().copied()).collect();
        self.unary(
            Tensor::new(shape, data).expect("broadcast"),
            Op::BroadcastRows(self.id),
        )
    }

    /// Cross-correlation of `[B,C,H,W]` input with a `[Cout,C,kh,kw]` kernel.
    pub fn conv2d(self, kernel: Var<'g>, stride: usize, padding: usize) -> Result<Var<'g>> {
        self.same_graph(&kernel);
        let out = conv2d_forward(&self.value(), &kernel.value(), stride, padding)?;
        let rg = self.requires_grad() || kernel.requires_grad();
        Ok(self.graph.push(
            out,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                stride,
                padding,
            },
            rg,
        ))
    }

    /// Adds a per-channel bias `[C]` to a `[B,C,H,W]` feature map.
    pub fn add_channel_bias(self, bias: Var<'g>) -> Result<Var<'g>> {
        let (x, b) = (self.value(), bias.value());
        let s = x.shape();
        if s.len() != 4 || b.shape() != [s[1]] {
            return Err(Error::dim("add_channel_bias", s, b.shape()));
        }
        let hw = s[2] * s[3];
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b.data()[(i / hw) % s[1]])
            .collect();
        let rg = self.requires_grad() || bias.requires_grad();
        Ok(self.graph.push(
            Tensor::new(s.to_vec(), data)?,
            Op::ChannelBias(self.id, bias.id),
            rg,
        ))
    }
}
