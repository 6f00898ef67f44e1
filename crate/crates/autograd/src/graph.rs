use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::{Mat, SparseMatrix};

#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Transpose(usize),
    Scale(usize, f64),
    AddScalar(usize),
    BroadcastRows(usize),
    BroadcastCols(usize),
    SumRows(usize),
    SumCols(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Ln(usize),
    Powf(usize, f64),
    Abs(usize),
    SoftmaxRows(usize),
    SliceRows { a: usize, start: usize },
    PadRows { a: usize, start: usize },
    SliceCols { a: usize, start: usize },
    PadCols { a: usize, start: usize },
    Reshape(usize),
    Select { a: usize, r: usize, c: usize },
    Scatter { a: usize, r: usize, c: usize },
    Sparse { a: usize, mat: Rc<SparseMatrix>, transposed: bool },
}

pub(crate) struct Node {
    pub(crate) value: Rc<Mat>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Append-only computation tape.
///
/// A graph is meant to live for a single training step: build the forward
/// pass, call [`grad`], read the results, drop the graph.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::with_capacity(1024)), recording: Cell::new(true) }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable leaf.
    pub fn param(&self, value: Mat) -> Var<'_> {
        self.push_leaf(value, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: Mat) -> Var<'_> {
        self.push_leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Mat::from_elem((1, 1), value))
    }

    fn push_leaf(&self, value: Mat, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op: Op::Leaf, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    pub(crate) fn push(&self, value: Mat, op: Op, parents: &[usize]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.recording.get() && parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Mat> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn op_of(&self, id: usize) -> Op {
        self.nodes.borrow()[id].op.clone()
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub(crate) fn var(&self, id: usize) -> Var<'_> {
        Var { graph: self, id }
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}({}x{})", self.id, r, c)
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Mat> {
        self.graph.value_of(self.id)
    }

    /// Value of a `1 x 1` variable.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.dim(), (1, 1), "item() on non-scalar {:?}", v.dim());
        v[[0, 0]]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.graph.nodes.borrow()[self.id].value.dim()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad_of(self.id)
    }
}

/// Gradients of the scalar `loss` with respect to each of `wrt`.
///
/// With `create_graph` the returned variables are differentiable functions
/// of the forward inputs; otherwise they are constants. Variables that do not
/// influence `loss` receive zero gradients.
pub fn grad<'g>(loss: Var<'g>, wrt: &[Var<'g>], create_graph: bool) -> Vec<Var<'g>> {
    let graph = loss.graph;
    assert_eq!(loss.shape(), (1, 1), "grad() needs a scalar loss");
    let n = loss.id + 1;

    // Which nodes depend on one of the targets.
    let mut depends = vec![false; n];
    for w in wrt {
        assert!(std::ptr::eq(w.graph, graph), "wrt variable from another graph");
        if w.id < n {
            depends[w.id] = true;
        }
    }
    for id in 0..n {
        if depends[id] {
            continue;
        }
        if !graph.requires_grad_of(id) {
            continue;
        }
        depends[id] = parents(&graph.op_of(id)).iter().any(|&p| depends[p]);
    }

    let previous = graph.recording.replace(create_graph);
    let mut grads: Vec<Option<Var<'g>>> = vec![None; n];
    grads[loss.id] = Some(graph.scalar(1.0));

    for id in (0..n).rev() {
        let Some(g) = grads[id] else { continue };
        if !depends[id] {
            continue;
        }
        let op = graph.op_of(id);
        if matches!(op, Op::Leaf) {
            continue;
        }
        for (parent, pg) in backward(graph, id, &op, g) {
            if !depends[parent] {
                continue;
            }
            grads[parent] = Some(match grads[parent] {
                Some(existing) => existing + pg,
                None => pg,
            });
        }
    }
    graph.recording.set(previous);

    wrt.iter()
        .map(|w| match grads.get(w.id).copied().flatten() {
            Some(g) => g,
            None => {
                let (r, c) = w.shape();
                graph.constant(Mat::zeros((r, c)))
            }
        })
        .collect()
}

fn parents(op: &Op) -> Vec<usize> {
    match *op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
        Op::MatMul { a, b, .. } => vec![a, b],
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::BroadcastRows(a)
        | Op::BroadcastCols(a)
        | Op::SumRows(a)
        | Op::SumCols(a)
        | Op::Tanh(a)
        | Op::Sigmoid(a)
        | Op::Softplus(a)
        | Op::Exp(a)
        | Op::Ln(a)
        | Op::Powf(a, _)
        | Op::Abs(a)
        | Op::SoftmaxRows(a)
        | Op::Reshape(a) => vec![a],
        Op::SliceRows { a, .. }
        | Op::PadRows { a, .. }
        | Op::SliceCols { a, .. }
        | Op::PadCols { a, .. }
        | Op::Select { a, .. }
        | Op::Scatter { a, .. }
        | Op::Sparse { a, .. } => vec![a],
    }
}

/// Vector-Jacobian products expressed as graph operations, so they can be
/// differentiated again.
fn backward<'g>(graph: &'g Graph, id: usize, op: &Op, g: Var<'g>) -> Vec<(usize, Var<'g>)> {
    let out = graph.var(id);
    let shape_of = |p: usize| graph.var(p).shape();
    match *op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(a, g), (b, g)],
        Op::Sub(a, b) => vec![(a, g), (b, -g)],
        Op::Mul(a, b) => vec![(a, g * graph.var(b)), (b, g * graph.var(a))],
        Op::MatMul { a, b, ta, tb } => {
            let (va, vb) = (graph.var(a), graph.var(b));
            match (ta, tb) {
                (false, false) => vec![(a, g.matmul_nt(vb)), (b, va.matmul_tn(g))],
                (true, false) => vec![(a, vb.matmul_nt(g)), (b, va.matmul(g))],
                (false, true) => vec![(a, g.matmul(vb)), (b, g.matmul_tn(va))],
                (true, true) => vec![(a, vb.matmul_tt(g)), (b, g.matmul_tt(va))],
            }
        }
        Op::Transpose(a) => vec![(a, g.t())],
        Op::Scale(a, c) => vec![(a, g.scale(c))],
        Op::AddScalar(a) => vec![(a, g)],
        Op::BroadcastRows(a) => vec![(a, g.sum_rows())],
        Op::BroadcastCols(a) => vec![(a, g.sum_cols())],
        Op::SumRows(a) => vec![(a, g.broadcast_rows(shape_of(a).0))],
        Op::SumCols(a) => vec![(a, g.broadcast_cols(shape_of(a).1))],
        Op::Tanh(a) => {
            let one_minus_sq = (out * out).scale(-1.0).add_scalar(1.0);
            vec![(a, g * one_minus_sq)]
        }
        Op::Sigmoid(a) => {
            let slope = out * out.scale(-1.0).add_scalar(1.0);
            vec![(a, g * slope)]
        }
        Op::Softplus(a) => vec![(a, g * graph.var(a).sigmoid())],
        Op::Exp(a) => vec![(a, g * out)],
        Op::Ln(a) => vec![(a, g * graph.var(a).powf(-1.0))],
        Op::Powf(a, p) => {
            let slope = graph.var(a).powf(p - 1.0).scale(p);
            vec![(a, g * slope)]
        }
        Op::Abs(a) => {
            let sign = graph.var(a).value().mapv(|x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
            vec![(a, g * graph.constant(sign))]
        }
        Op::SoftmaxRows(a) => {
            let cols = shape_of(a).1;
            let inner = (g * out).sum_cols().broadcast_cols(cols);
            vec![(a, out * (g - inner))]
        }
        Op::SliceRows { a, start } => vec![(a, g.pad_rows(start, shape_of(a).0))],
        Op::PadRows { a, start } => vec![(a, g.slice_rows(start, shape_of(a).0))],
        Op::SliceCols { a, start } => vec![(a, g.pad_cols(start, shape_of(a).1))],
        Op::PadCols { a, start } => vec![(a, g.slice_cols(start, shape_of(a).1))],
        Op::Reshape(a) => {
            let (r, c) = shape_of(a);
            vec![(a, g.reshape(r, c))]
        }
        Op::Select { a, r, c } => {
            let (rows, cols) = shape_of(a);
            vec![(a, g.scatter(r, c, rows, cols))]
        }
        Op::Scatter { a, r, c } => vec![(a, g.select(r, c))],
        Op::Sparse { a, ref mat, transposed } => {
            vec![(a, g.sparse_left(Rc::clone(mat), !transposed))]
        }
    }
}
