//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] owns every intermediate value produced during a forward pass.
//! Values are addressed through [`Var`] handles. Calling [`Tape::backward`]
//! walks the tape in reverse and accumulates gradients into leaves; parameter
//! leaves bound from a [`ParamSet`] accumulate straight into the set's gradient
//! buffers, so successive backward passes add up until [`ParamSet::zero_grad`].

use std::sync::Arc;

use thiserror::Error;

/// Probabilities are floored here before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    Rank(Vec<usize>),
    #[error("non-finite value: {0}")]
    Numerics(String),
    #[error("index {index} out of range for {op} (bound {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
}

fn shape_err(op: &'static str, detail: String) -> DiffError {
    DiffError::Shape { op, detail }
}

/// Dense tensor with optional gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, DiffError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![0.0; n]),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![], vec![v]).expect("scalar shape")
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access; copies the buffer if a tape still shares it.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }
}

/// Named collection of trainable tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Squared L2 norm of all accumulated gradients.
    pub fn grad_norm_sq(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(|t| t.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum()
    }

    /// Independent copy with gradients stripped and tracking disabled.
    pub fn frozen(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    shape: t.shape.clone(),
                    data: Arc::new(t.data.as_ref().clone()),
                    requires_grad: false,
                    grad: None,
                })
                .collect(),
        }
    }

    /// Binds every tensor as a parameter leaf on the tape, in order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        (0..self.tensors.len())
            .map(|i| tape.param(self, i))
            .collect()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds accepted by [`Tape::forward_op`].
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Matmul,
    Add,
    Mul,
    Tanh,
    Relu,
    SoftmaxRows,
    Log,
    GatherIndex(Vec<usize>),
    Sum,
    Mean,
    Clip { lo: f64, hi: f64 },
    StopGrad,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    GatherIndex(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Var, Var),
    Sum(Var),
    Mean(Var),
    Clip(Var, f64, f64),
    StopGrad,
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value: Arc::new(value),
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient held on the tape for `v` (leaves and unbound parameters).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Records a leaf copied from `t`; tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape.clone(),
            t.data.as_ref().clone(),
            Op::Leaf,
            t.requires_grad,
        )
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var, DiffError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "constant",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(vec![], vec![v], Op::Leaf, false)
    }

    /// Records parameter `i` of `params` without copying its buffer.
    pub fn param(&mut self, params: &ParamSet, i: usize) -> Var {
        let t = &params.tensors[i];
        self.nodes.push(Node {
            shape: t.shape.clone(),
            value: t.shared_data(),
            op: Op::Param(i),
            requires_grad: t.requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Generic entry point dispatching on [`OpKind`].
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var, DiffError> {
        let arity = match kind {
            OpKind::Matmul | OpKind::Add | OpKind::Mul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(shape_err(
                "forward_op",
                format!("{:?} takes {} inputs, got {}", kind, arity, inputs.len()),
            ));
        }
        match kind {
            OpKind::Matmul => self.matmul(inputs[0], inputs[1]),
            OpKind::Add => self.add(inputs[0], inputs[1]),
            OpKind::Mul => self.mul(inputs[0], inputs[1]),
            OpKind::Tanh => Ok(self.tanh(inputs[0])),
            OpKind::Relu => Ok(self.relu(inputs[0])),
            OpKind::SoftmaxRows => Ok(self.softmax_rows(inputs[0])),
            OpKind::Log => Ok(self.log(inputs[0])),
            OpKind::GatherIndex(idx) => self.gather_index(inputs[0], &idx),
            OpKind::Sum => Ok(self.sum(inputs[0])),
            OpKind::Mean => Ok(self.mean(inputs[0])),
            OpKind::Clip { lo, hi } => Ok(self.clip(inputs[0], lo, hi)),
            OpKind::StopGrad => Ok(self.stop_grad(inputs[0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &w) in orow.iter_mut().zip(brow) {
                    *o += x * w;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::Matmul(a, b), rg))
    }

    fn binary_same(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa != sb {
            return Err(shape_err(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary_same("add", a, b)?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(self.nodes[b.0].value.iter())
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary_same("sub", a, b)?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(self.nodes[b.0].value.iter())
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary_same("mul", a, b)?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(self.nodes[b.0].value.iter())
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), out, Op::Mul(a, b), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(self.nodes[a.0].shape.clone(), out, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log of `max(x, LOG_FLOOR)`.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(LOG_FLOOR).ln(), Op::Log(a))
    }

    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clip(a, lo, hi))
    }

    /// Value-identical copy that blocks gradient flow.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let node = &self.nodes[a.0];
        let (shape, value) = (node.shape.clone(), Arc::clone(&node.value));
        self.nodes.push(Node {
            shape,
            value,
            op: Op::StopGrad,
            requires_grad: false,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Row-wise softmax over the last axis, max-subtracted.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = rows_cols(&self.nodes[a.0].shape);
        let v = &self.nodes[a.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_into(&v[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        let rg = self.rg(a);
        self.push(self.nodes[a.0].shape.clone(), out, Op::SoftmaxRows(a), rg)
    }

    /// Picks `a[i, idx[i]]` from each row, producing shape `[rows, 1]`.
    pub fn gather_index(&mut self, a: Var, idx: &[usize]) -> Result<Var, DiffError> {
        let (r, c) = rows_cols(&self.nodes[a.0].shape);
        if idx.len() != r {
            return Err(shape_err(
                "gather_index",
                format!("{} indices for {} rows", idx.len(), r),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(DiffError::Index {
                op: "gather_index",
                index: bad,
                bound: c,
            });
        }
        let v = &self.nodes[a.0].value;
        let out = idx.iter().enumerate().map(|(i, &j)| v[i * c + j]).collect();
        let rg = self.rg(a);
        Ok(self.push(vec![r, 1], out, Op::GatherIndex(a, idx.to_vec()), rg))
    }

    /// Selects whole rows of a matrix (embedding lookup), shape `[idx.len(), cols]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, DiffError> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 {
            return Err(shape_err("gather_rows", format!("{:?}", s)));
        }
        let (r, c) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&j| j >= r) {
            return Err(DiffError::Index {
                op: "gather_rows",
                index: bad,
                bound: r,
            });
        }
        let v = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &j in idx {
            out.extend_from_slice(&v[j * c..(j + 1) * c]);
        }
        let rg = self.rg(a);
        Ok(self.push(vec![idx.len(), c], out, Op::GatherRows(a, idx.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(shape_err("concat_cols", format!("{:?} ++ {:?}", sa, sb)));
        }
        let (m, n1, n2) = (sa[0], sa[1], sb[1]);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = Vec::with_capacity(m * (n1 + n2));
        for i in 0..m {
            out.extend_from_slice(&av[i * n1..(i + 1) * n1]);
            out.extend_from_slice(&bv[i * n2..(i + 1) * n2]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n1 + n2], out, Op::ConcatCols(a, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        let rg = self.rg(a);
        self.push(vec![], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(vec![], vec![s], Op::Mean(a), rg)
    }

    /// Sums a list of scalars in order.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var, DiffError> {
        let (first, rest) = terms
            .split_first()
            .ok_or_else(|| shape_err("add_all", "empty term list".into()))?;
        let mut acc = *first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Leaf gradients (and parameter gradients, when `params` is given) are
    /// accumulated additively; intermediate gradients are recomputed per call.
    pub fn backward(&mut self, loss: Var, mut params: Option<&mut ParamSet>) -> Result<(), DiffError> {
        let n = self.nodes[loss.0].value.len();
        if n != 1 {
            return Err(DiffError::Rank(self.nodes[loss.0].shape.clone()));
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf | Op::Param(_)) {
                *g = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut params);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn slot<'a>(
        nodes: &[Node],
        grads: &'a mut [Option<Vec<f64>>],
        params: &'a mut Option<&mut ParamSet>,
        v: Var,
    ) -> Option<&'a mut [f64]> {
        let node = &nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        if let (Op::Param(pi), Some(ps)) = (&node.op, params.as_deref_mut()) {
            let t = &mut ps.tensors[*pi];
            let n = t.data.len();
            return Some(t.grad.get_or_insert_with(|| vec![0.0; n]).as_mut_slice());
        }
        let n = node.value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64], params: &mut Option<&mut ParamSet>) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let out = &nodes[i].value;
        macro_rules! slot {
            ($v:expr) => {
                Self::slot(nodes, grads, params, $v)
            };
        }
        match &nodes[i].op {
            Op::Leaf | Op::Param(_) | Op::StopGrad => {}
            Op::Matmul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let av = Arc::clone(&nodes[a.0].value);
                let bv = Arc::clone(&nodes[b.0].value);
                if let Some(ga) = slot!(*a) {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let mut s = 0.0;
                            for (x, y) in grow.iter().zip(brow) {
                                s += x * y;
                            }
                            ga[r * k + p] += s;
                        }
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let x = av[r * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += x * y;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
                if let Some(gb) = slot!(*b) {
                    gb.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
                if let Some(gb) = slot!(*b) {
                    gb.iter_mut().zip(g).for_each(|(o, x)| *o -= x);
                }
            }
            Op::Mul(a, b) => {
                let av = Arc::clone(&nodes[a.0].value);
                let bv = Arc::clone(&nodes[b.0].value);
                if let Some(ga) = slot!(*a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(bv.iter()) {
                        *o += x * y;
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(av.iter()) {
                        *o += x * y;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += c * x);
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
            }
            Op::Tanh(a) => {
                let out = Arc::clone(out);
                if let Some(ga) = slot!(*a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(out.iter()) {
                        *o += x * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                let out = Arc::clone(out);
                if let Some(ga) = slot!(*a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(out.iter()) {
                        *o += x * y * (1.0 - y);
                    }
                }
            }
            Op::Relu(a) => {
                let av = Arc::clone(&nodes[a.0].value);
                if let Some(ga) = slot!(*a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(av.iter()) {
                        if *y > 0.0 {
                            *o += x;
                        }
                    }
                }
            }
            Op::Exp(a) => {
                let out = Arc::clone(out);
                if let Some(ga) = slot!(*a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(out.iter()) {
                        *o += x * y;
                    }
                }
            }
            Op::Log(a) => {
                let av = Arc::clone(&nodes[a.0].value);
                if let Some(ga) = slot!(*a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(av.iter()) {
                        if *y > LOG_FLOOR {
                            *o += x / y;
                        }
                    }
                }
            }
            Op::Clip(a, lo, hi) => {
                let av = Arc::clone(&nodes[a.0].value);
                let (lo, hi) = (*lo, *hi);
                if let Some(ga) = slot!(*a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(av.iter()) {
                        if *y >= lo && *y <= hi {
                            *o += x;
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = rows_cols(&nodes[i].shape);
                let out = Arc::clone(out);
                if let Some(ga) = slot!(*a) {
                    for row in 0..r {
                        let p = &out[row * c..(row + 1) * c];
                        let gr = &g[row * c..(row + 1) * c];
                        let dot: f64 = p.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for j in 0..c {
                            ga[row * c + j] += p[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::GatherIndex(a, idx) => {
                let (_, c) = rows_cols(&nodes[a.0].shape);
                if let Some(ga) = slot!(*a) {
                    for (row, &j) in idx.iter().enumerate() {
                        ga[row * c + j] += g[row];
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let c = nodes[a.0].shape[1];
                if let Some(ga) = slot!(*a) {
                    for (row, &j) in idx.iter().enumerate() {
                        for (o, x) in ga[j * c..(j + 1) * c].iter_mut().zip(&g[row * c..(row + 1) * c]) {
                            *o += x;
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let m = nodes[a.0].shape[0];
                let (n1, n2) = (nodes[a.0].shape[1], nodes[b.0].shape[1]);
                if let Some(ga) = slot!(*a) {
                    for r in 0..m {
                        for j in 0..n1 {
                            ga[r * n1 + j] += g[r * (n1 + n2) + j];
                        }
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for r in 0..m {
                        for j in 0..n2 {
                            gb[r * n2 + j] += g[r * (n1 + n2) + n1 + j];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().for_each(|o| *o += g[0] / n);
                }
            }
        }
    }
}

/// Max-subtracted softmax of `logits` written into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(logits) {
        *o = (x - m).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

/// Relative error with a small absolute floor on the denominator so that
/// gradients that are zero on both sides compare as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Compares reverse-mode gradients of `f` against central differences
/// `(f(p+h) - f(p-h)) / 2h` for every entry of every tensor in `params`.
///
/// `f` receives a fresh tape and one leaf per parameter tensor, in order.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    if h <= 0.0 {
        return Err(DiffError::Numerics(format!("step h must be positive, got {h}")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64, DiffError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p)).collect();
        let loss = f(&mut tape, &vars)?;
        let v = tape.scalar_value(loss);
        if !v.is_finite() {
            return Err(DiffError::Numerics(format!("f evaluated to {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let leaves: Vec<Tensor> = params.iter().cloned().map(Tensor::with_grad).collect();
    let vars: Vec<Var> = leaves.iter().map(|p| tape.leaf(p)).collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.scalar_value(loss).is_finite() {
        return Err(DiffError::Numerics("loss is not finite".into()));
    }
    tape.backward(loss, None)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        entries_checked: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        tol,
    };
    for (ti, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = tape
            .grad(*var)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; params[ti].numel()]);
        for j in 0..params[ti].numel() {
            let orig = params[ti].data()[j];
            work[ti].data_mut()[j] = orig + h;
            let fp = eval(&work)?;
            work[ti].data_mut()[j] = orig - h;
            let fm = eval(&work)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            report.entries_checked += 1;
            report.max_abs_error = report.max_abs_error.max((analytic[j] - numeric).abs());
            report.max_rel_error = report.max_rel_error.max(relative_error(analytic[j], numeric));
        }
    }
    Ok(report)
}
