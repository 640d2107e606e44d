//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations are recorded on a [`Tape`] as they execute. Node ids are
//! handed out in creation order, which is already a topological order, so
//! [`Tape::backward`] simply walks the node list from the back.
//!
//! Row-wise operations treat a tensor as `[rows, cols]` with every leading
//! axis flattened into rows; a 1-D tensor is a single row.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, Tensor};

/// Per-output-column source: `Some((src, scale))` reads `scale * x[src]`, `None` writes 0.
pub type GatherMap = Arc<[Option<(usize, f64)>]>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    HardTanh,
    Softsign,
    Sigmoid,
    Relu,
    Sqrt,
    Square,
    Recip,
}

impl Unary {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::HardTanh => x.clamp(-1.0, 1.0),
            Unary::Softsign => x / (1.0 + x.abs()),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => x.max(0.0),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Recip => 1.0 / x,
        }
    }

    /// Derivative given the input `x` and the output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::HardTanh => {
                if x.abs() < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Softsign => {
                let d = 1.0 + x.abs();
                1.0 / (d * d)
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            // the cusp at 0 gets a zero subgradient
            Unary::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
            Unary::Recip => -y * y,
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

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    Unary(usize, Unary),
    Concat(Vec<usize>),
    StackRows(Vec<usize>),
    Slice(usize, usize),
    Gather(usize, GatherMap),
    SelectRows(usize, Arc<[usize]>),
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations for one forward/backward pass. Single-threaded.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients of a scalar with respect to every recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when the value did not influence the output.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        let shape = self.shapes[v.id].clone();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Concatenates along the last axis. All parts must have the same row count.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let nodes = self.nodes.borrow();
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let rows = nodes[first.id].value.rows();
        let mut lead = nodes[first.id].value.shape().to_vec();
        lead.pop();
        let mut cols = 0;
        for p in parts {
            let v = &nodes[p.id].value;
            if v.rows() != rows {
                return Err(Error::shape("concat", "row counts differ"));
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(nodes[p.id].value.row_slice(r));
            }
        }
        lead.push(cols);
        let needs = parts.iter().any(|p| nodes[p.id].needs_grad);
        drop(nodes);
        let value = Tensor::new(lead, data)?;
        Ok(self.push(
            value,
            Op::Concat(parts.iter().map(|p| p.id).collect()),
            needs,
        ))
    }

    /// Stacks 2-D blocks on top of each other (first axis).
    pub fn stack_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let nodes = self.nodes.borrow();
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("stack_rows", "no inputs"))?;
        let cols = nodes[first.id].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = &nodes[p.id].value;
            if v.cols() != cols {
                return Err(Error::shape("stack_rows", "column counts differ"));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let needs = parts.iter().any(|p| nodes[p.id].needs_grad);
        drop(nodes);
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(
            value,
            Op::StackRows(parts.iter().map(|p| p.id).collect()),
            needs,
        ))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[output.id].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "output must be scalar, got {:?}",
                    nodes[output.id].value.shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[output.id] = Some(vec![1.0]);

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.needs_grad {
                propagate(&nodes, node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, delta: Vec<f64>) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(delta),
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: usize| &nodes[id].value;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if nodes[a].needs_grad {
                let bt = bv.transpose().expect("2-D");
                accumulate(grads, nodes, a, matmul_raw(g, bt.data(), m, n, k));
            }
            if nodes[b].needs_grad {
                let at = av.transpose().expect("2-D");
                accumulate(grads, nodes, b, matmul_raw(at.data(), g, k, m, n));
            }
        }
        &Op::Add(a, b) => {
            accumulate(grads, nodes, a, g.to_vec());
            accumulate(grads, nodes, b, g.to_vec());
        }
        &Op::Sub(a, b) => {
            accumulate(grads, nodes, a, g.to_vec());
            accumulate(grads, nodes, b, g.iter().map(|v| -v).collect());
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            accumulate(
                grads,
                nodes,
                a,
                g.iter().zip(bv).map(|(g, b)| g * b).collect(),
            );
            accumulate(
                grads,
                nodes,
                b,
                g.iter().zip(av).map(|(g, a)| g * a).collect(),
            );
        }
        &Op::Div(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            accumulate(
                grads,
                nodes,
                a,
                g.iter().zip(bv).map(|(g, b)| g / b).collect(),
            );
            let gb = g
                .iter()
                .zip(av.iter().zip(bv))
                .map(|(g, (a, b))| -g * a / (b * b))
                .collect();
            accumulate(grads, nodes, b, gb);
        }
        &Op::AddRow(a, r) => {
            accumulate(grads, nodes, a, g.to_vec());
            let cols = val(r).len();
            let mut gr = vec![0.0; cols];
            for row in g.chunks(cols) {
                gr.iter_mut().zip(row).for_each(|(s, v)| *s += v);
            }
            accumulate(grads, nodes, r, gr);
        }
        &Op::MulRow(a, r) => {
            let rv = val(r).data();
            let av = val(a).data();
            let cols = rv.len();
            let ga = g
                .chunks(cols)
                .flat_map(|row| row.iter().zip(rv).map(|(g, r)| g * r))
                .collect();
            accumulate(grads, nodes, a, ga);
            let mut gr = vec![0.0; cols];
            for (grow, arow) in g.chunks(cols).zip(av.chunks(cols)) {
                for ((s, gv), avv) in gr.iter_mut().zip(grow).zip(arow) {
                    *s += gv * avv;
                }
            }
            accumulate(grads, nodes, r, gr);
        }
        &Op::Scale(a, c) => accumulate(grads, nodes, a, g.iter().map(|v| v * c).collect()),
        &Op::Offset(a) | &Op::Reshape(a) => accumulate(grads, nodes, a, g.to_vec()),
        &Op::Sum(a) => accumulate(grads, nodes, a, vec![g[0]; val(a).len()]),
        &Op::Mean(a) => {
            let n = val(a).len();
            accumulate(grads, nodes, a, vec![g[0] / n as f64; n]);
        }
        &Op::MeanRows(a) => {
            let rows = val(a).rows();
            let scale = 1.0 / rows as f64;
            let ga = (0..rows)
                .flat_map(|_| g.iter().map(|v| v * scale))
                .collect();
            accumulate(grads, nodes, a, ga);
        }
        &Op::Unary(a, kind) => {
            let ga = g
                .iter()
                .zip(val(a).data().iter().zip(node.value.data()))
                .map(|(g, (&x, &y))| g * kind.deriv(x, y))
                .collect();
            accumulate(grads, nodes, a, ga);
        }
        Op::Concat(parts) => {
            let total = node.value.cols();
            let rows = node.value.rows();
            let mut offset = 0;
            for &p in parts {
                let w = val(p).cols();
                let mut gp = Vec::with_capacity(rows * w);
                for r in 0..rows {
                    gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                }
                accumulate(grads, nodes, p, gp);
                offset += w;
            }
        }
        Op::StackRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).len();
                accumulate(grads, nodes, p, g[offset..offset + n].to_vec());
                offset += n;
            }
        }
        &Op::Slice(a, start) => {
            let av = val(a);
            let (rows, cols) = (av.rows(), av.cols());
            let w = node.value.cols();
            let mut ga = vec![0.0; rows * cols];
            for r in 0..rows {
                ga[r * cols + start..r * cols + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            accumulate(grads, nodes, a, ga);
        }
        Op::Gather(a, map) => {
            let a = *a;
            let av = val(a);
            let (rows, cols) = (av.rows(), av.cols());
            let w = map.len();
            let mut ga = vec![0.0; rows * cols];
            for r in 0..rows {
                for (i, m) in map.iter().enumerate() {
                    if let Some((src, s)) = m {
                        ga[r * cols + src] += s * g[r * w + i];
                    }
                }
            }
            accumulate(grads, nodes, a, ga);
        }
        Op::SelectRows(a, idx) => {
            let a = *a;
            let av = val(a);
            let cols = av.cols();
            let mut ga = vec![0.0; av.len()];
            for (i, &r) in idx.iter().enumerate() {
                for c in 0..cols {
                    ga[r * cols + c] += g[i * cols + c];
                }
            }
            accumulate(grads, nodes, a, ga);
        }
    }
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn cols(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.cols()
    }

    pub fn rows(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.rows()
    }

    fn unary_value(&self, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
        let nodes = self.tape.nodes.borrow();
        f(&nodes[self.id].value)
    }

    fn binary_value(
        &self,
        other: Var<'t>,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Tensor> {
        let nodes = self.tape.nodes.borrow();
        f(&nodes[self.id].value, &nodes[other.id].value)
    }

    fn needs2(&self, other: Var<'t>) -> bool {
        self.tape.needs(self.id) || self.tape.needs(other.id)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.binary_value(other, |a, b| a.matmul(b))?;
        Ok(self
            .tape
            .push(v, Op::MatMul(self.id, other.id), self.needs2(other)))
    }

    fn zip_with(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.binary_value(other, |a, b| {
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    name,
                    format!("{:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(a.shape().to_vec(), data)
        })
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "add", |a, b| a + b)?;
        Ok(self
            .tape
            .push(v, Op::Add(self.id, other.id), self.needs2(other)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "sub", |a, b| a - b)?;
        Ok(self
            .tape
            .push(v, Op::Sub(self.id, other.id), self.needs2(other)))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "mul", |a, b| a * b)?;
        Ok(self
            .tape
            .push(v, Op::Mul(self.id, other.id), self.needs2(other)))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "div", |a, b| a / b)?;
        Ok(self
            .tape
            .push(v, Op::Div(self.id, other.id), self.needs2(other)))
    }

    fn row_op(
        self,
        row: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.binary_value(row, |a, r| {
            if r.len() != a.cols() {
                return Err(Error::shape(
                    name,
                    format!("row of {} vs {} columns", r.len(), a.cols()),
                ));
            }
            let data = a
                .data()
                .chunks(a.cols().max(1))
                .flat_map(|chunk| chunk.iter().zip(r.data()).map(|(&x, &y)| f(x, y)))
                .collect();
            Tensor::new(a.shape().to_vec(), data)
        })
    }

    /// Adds a `[cols]` vector to every row.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let v = self.row_op(row, "add_row", |a, b| a + b)?;
        Ok(self
            .tape
            .push(v, Op::AddRow(self.id, row.id), self.needs2(row)))
    }

    /// Multiplies every row elementwise by a `[cols]` vector.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let v = self.row_op(row, "mul_row", |a, b| a * b)?;
        Ok(self
            .tape
            .push(v, Op::MulRow(self.id, row.id), self.needs2(row)))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self
            .unary_value(|a| Ok(a.map(|x| x * c)))
            .expect("infallible");
        self.tape
            .push(v, Op::Scale(self.id, c), self.tape.needs(self.id))
    }

    /// Adds a constant to every element.
    pub fn offset(self, c: f64) -> Var<'t> {
        let v = self
            .unary_value(|a| Ok(a.map(|x| x + c)))
            .expect("infallible");
        self.tape
            .push(v, Op::Offset(self.id), self.tape.needs(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        let v = self
            .unary_value(|a| Ok(Tensor::scalar(a.data().iter().sum())))
            .expect("infallible");
        self.tape
            .push(v, Op::Sum(self.id), self.tape.needs(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let v = self
            .unary_value(|a| {
                Ok(Tensor::scalar(
                    a.data().iter().sum::<f64>() / a.len().max(1) as f64,
                ))
            })
            .expect("infallible");
        self.tape
            .push(v, Op::Mean(self.id), self.tape.needs(self.id))
    }

    /// Column means: `[rows, cols] -> [cols]`.
    pub fn mean_rows(self) -> Result<Var<'t>> {
        let v = self.unary_value(|a| {
            let (rows, cols) = (a.rows(), a.cols());
            if rows == 0 {
                return Err(Error::shape("mean_rows", "no rows"));
            }
            let mut m = vec![0.0; cols];
            for r in 0..rows {
                m.iter_mut().zip(a.row_slice(r)).for_each(|(s, v)| *s += v);
            }
            m.iter_mut().for_each(|s| *s /= rows as f64);
            Tensor::new(vec![cols], m)
        })?;
        Ok(self
            .tape
            .push(v, Op::MeanRows(self.id), self.tape.needs(self.id)))
    }

    pub fn unary(self, kind: Unary) -> Var<'t> {
        let v = self
            .unary_value(|a| Ok(a.map(|x| kind.eval(x))))
            .expect("infallible");
        self.tape
            .push(v, Op::Unary(self.id, kind), self.tape.needs(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }

    pub fn hardtanh(self) -> Var<'t> {
        self.unary(Unary::HardTanh)
    }

    pub fn softsign(self) -> Var<'t> {
        self.unary(Unary::Softsign)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Unary::Relu)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Unary::Sqrt)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Unary::Square)
    }

    pub fn recip(self) -> Var<'t> {
        self.unary(Unary::Recip)
    }

    /// Columns `[start, end)` of the last axis.
    pub fn slice(self, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.unary_value(|a| {
            if start > end || end > a.cols() {
                return Err(Error::shape(
                    "slice",
                    format!("[{start}, {end}) of {} columns", a.cols()),
                ));
            }
            let mut shape = a.shape().to_vec();
            *shape.last_mut().expect("non-empty shape") = end - start;
            let data = (0..a.rows())
                .flat_map(|r| a.row_slice(r)[start..end].iter().copied())
                .collect();
            Tensor::new(shape, data)
        })?;
        Ok(self
            .tape
            .push(v, Op::Slice(self.id, start), self.tape.needs(self.id)))
    }

    /// Per-row signed gather along the last axis.
    pub fn gather(self, map: &GatherMap) -> Result<Var<'t>> {
        let v = self.unary_value(|a| {
            let cols = a.cols();
            if let Some(bad) = map.iter().flatten().find(|(s, _)| *s >= cols) {
                return Err(Error::shape(
                    "gather",
                    format!("source {} out of {cols} columns", bad.0),
                ));
            }
            let mut shape = a.shape().to_vec();
            *shape.last_mut().expect("non-empty shape") = map.len();
            let data = (0..a.rows())
                .flat_map(|r| {
                    let row = a.row_slice(r);
                    map.iter().map(move |m| m.map_or(0.0, |(s, k)| k * row[s]))
                })
                .collect();
            Tensor::new(shape, data)
        })?;
        Ok(self.tape.push(
            v,
            Op::Gather(self.id, map.clone()),
            self.tape.needs(self.id),
        ))
    }

    /// Picks rows (leading axes flattened); output is 2-D `[idx.len(), cols]`.
    pub fn select_rows(self, idx: &Arc<[usize]>) -> Result<Var<'t>> {
        let v = self.unary_value(|a| {
            let rows = a.rows();
            if let Some(&bad) = idx.iter().find(|&&r| r >= rows) {
                return Err(Error::shape("select_rows", format!("row {bad} of {rows}")));
            }
            let data = idx
                .iter()
                .flat_map(|&r| a.row_slice(r).iter().copied())
                .collect();
            Tensor::new(vec![idx.len(), a.cols()], data)
        })?;
        Ok(self.tape.push(
            v,
            Op::SelectRows(self.id, idx.clone()),
            self.tape.needs(self.id),
        ))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        let v = self.unary_value(|a| a.clone().reshape(shape))?;
        Ok(self
            .tape
            .push(v, Op::Reshape(self.id), self.tape.needs(self.id)))
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.data()[0]
    }
}
