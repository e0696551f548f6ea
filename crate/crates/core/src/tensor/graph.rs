use std::collections::BTreeMap;
use std::sync::Arc;

use super::params::{GradMap, ParamSet};
use super::{Tensor, TensorError};

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Named input tensors for [`Graph::evaluate`].
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    map: BTreeMap<String, Tensor>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: impl Into<String>, value: Tensor) -> &mut Self {
        self.map.insert(name.into(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input { name: String },
    Constant { value: Arc<Tensor> },
    Parameter { name: String, trainable: bool },
    Add,
    Mul,
    MatMul,
    Conv1d { stride: usize },
    GruStep,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
    Square,
    Softmax,
    ReduceSum,
    ReduceMean,
    Slice { axis: usize, start: usize, end: usize },
    Concat { axis: usize },
    CrossEntropy,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Constant { .. } => "constant",
            Op::Parameter { .. } => "parameter",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::MatMul => "matmul",
            Op::Conv1d { .. } => "conv1d",
            Op::GruStep => "gru_step",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Square => "square",
            Op::Softmax => "softmax",
            Op::ReduceSum => "reduce_sum",
            Op::ReduceMean => "reduce_mean",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::CrossEntropy => "cross_entropy",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    parents: Vec<NodeId>,
    shape: Vec<usize>,
}

/// Directed acyclic computation graph.
///
/// Nodes are appended through the builder methods, so parents always
/// precede children and node order is already topological. A graph is
/// single-threaded; distinct instances share nothing mutable and may be
/// used from different threads.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Option<Tensor>>,
    grads: Vec<Option<Tensor>>,
    inputs: BTreeMap<String, NodeId>,
    parameters: BTreeMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Cached value from the most recent `evaluate`.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id.0).and_then(|v| v.as_ref())
    }

    /// Cached gradient from the most recent `backward`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, parents, shape });
        NodeId(self.nodes.len() - 1)
    }

    // ---- leaf builders ----

    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        if let Some(&id) = self.inputs.get(name) {
            return id;
        }
        let id = self.push(
            Op::Input {
                name: name.to_string(),
            },
            vec![],
            shape.to_vec(),
        );
        self.inputs.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, value: Arc<Tensor>) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant { value }, vec![], shape)
    }

    pub fn constant_owned(&mut self, value: Tensor) -> NodeId {
        self.constant(Arc::new(value))
    }

    /// Declares a parameter node whose value is looked up by name in the
    /// [`ParamSet`] passed to `evaluate`. Repeated declarations of the same
    /// name return the original node.
    pub fn parameter(&mut self, params: &ParamSet, name: &str) -> Result<NodeId, TensorError> {
        if let Some(&id) = self.parameters.get(name) {
            return Ok(id);
        }
        let p = params
            .get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?;
        let id = self.push(
            Op::Parameter {
                name: name.to_string(),
                trainable: p.trainable(),
            },
            vec![],
            p.value().shape().to_vec(),
        );
        self.parameters.insert(name.to_string(), id);
        Ok(id)
    }

    // ---- elementwise ----

    fn broadcast_shape(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<Vec<usize>, TensorError> {
        let la = self.shape_of(a);
        let lb = self.shape_of(b);
        if la == lb {
            return Ok(la.to_vec());
        }
        // A rank-1 right operand broadcasts along the last axis.
        if lb.len() == 1 && la.last() == lb.last() {
            return Ok(la.to_vec());
        }
        Err(TensorError::ShapeMismatch {
            op,
            lhs: la.to_vec(),
            rhs: lb.to_vec(),
        })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let shape = self.broadcast_shape("add", a, b)?;
        Ok(self.push(Op::Add, vec![a, b], shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let shape = self.broadcast_shape("mul", a, b)?;
        Ok(self.push(Op::Mul, vec![a, b], shape))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let sa = self.shape_of(a).to_vec();
        let sb = self.shape_of(b).to_vec();
        let shape = match (sa.as_slice(), sb.as_slice()) {
            ([m, k1], [k2, n]) if k1 == k2 => vec![*m, *n],
            ([k1], [k2, n]) if k1 == k2 => vec![*n],
            ([m, k1], [k2]) if k1 == k2 => vec![*m],
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: sa,
                    rhs: sb,
                })
            }
        };
        Ok(self.push(Op::MatMul, vec![a, b], shape))
    }

    /// Valid (no padding) 1-D convolution over the leading time axis.
    /// `x`: `[t, c_in]`, `w`: `[k, c_in, c_out]`, `b`: `[c_out]`.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
    ) -> Result<NodeId, TensorError> {
        let sx = self.shape_of(x).to_vec();
        let sw = self.shape_of(w).to_vec();
        let sb = self.shape_of(b).to_vec();
        match (sx.as_slice(), sw.as_slice(), sb.as_slice()) {
            ([t, ci1], [k, ci2, co1], [co2])
                if ci1 == ci2 && co1 == co2 && *t >= *k && stride >= 1 =>
            {
                let t_out = (t - k) / stride + 1;
                Ok(self.push(Op::Conv1d { stride }, vec![x, w, b], vec![t_out, *co1]))
            }
            _ => Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: sx,
                rhs: sw,
            }),
        }
    }

    /// One step of a gated recurrent cell (two gates plus candidate):
    ///
    /// ```text
    /// z = sigmoid(x W_z + h W'_z + b_z)        update gate
    /// r = sigmoid(x W_r + h W'_r + b_r)        reset gate
    /// c = tanh   (x W_c + r .* (h W'_c) + b_c) candidate state
    /// h' = (1 - z) .* h + z .* c
    /// ```
    ///
    /// `x`: `[1, d]`, `h`: `[1, hdim]`, `w`: `[d, 3*hdim]`, `u`: `[hdim, 3*hdim]`,
    /// `b`: `[3*hdim]`; the three gate blocks are laid out `[z | r | c]`.
    pub fn gru_step(
        &mut self,
        x: NodeId,
        h: NodeId,
        w: NodeId,
        u: NodeId,
        b: NodeId,
    ) -> Result<NodeId, TensorError> {
        let sx = self.shape_of(x).to_vec();
        let sh = self.shape_of(h).to_vec();
        let sw = self.shape_of(w).to_vec();
        let su = self.shape_of(u).to_vec();
        let sb = self.shape_of(b).to_vec();
        let ok = matches!(
            (sx.as_slice(), sh.as_slice(), sw.as_slice(), su.as_slice(), sb.as_slice()),
            ([1, d], [1, hd], [wd, w3], [ud, u3], [b3])
                if wd == d && ud == hd && *w3 == 3 * *hd && u3 == w3 && b3 == w3
        );
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "gru_step",
                lhs: sx,
                rhs: sw,
            });
        }
        let hd = sh[1];
        Ok(self.push(Op::GruStep, vec![x, h, w, u, b], vec![1, hd]))
    }

    fn unary(&mut self, op: Op, a: NodeId) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(op, vec![a], shape)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sigmoid, a)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp, a)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Log, a)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sqrt, a)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Square, a)
    }

    /// Softmax over the whole vector (rank 1) or each row (rank 2).
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let shape = self.shape_of(a).to_vec();
        if shape.is_empty() || shape.len() > 2 {
            return Err(TensorError::BadOperand {
                op: "softmax",
                shape,
            });
        }
        Ok(self.unary(Op::Softmax, a))
    }

    /// Sum of every entry, as a `[1]` tensor.
    pub fn reduce_sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::ReduceSum, vec![a], vec![1])
    }

    /// Mean of every entry, as a `[1]` tensor.
    pub fn reduce_mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::ReduceMean, vec![a], vec![1])
    }

    pub fn slice(
        &mut self,
        a: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    ) -> Result<NodeId, TensorError> {
        let shape = self.shape_of(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(TensorError::BadOperand { op: "slice", shape });
        }
        let mut out = shape;
        out[axis] = end - start;
        Ok(self.push(Op::Slice { axis, start, end }, vec![a], out))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::BadOperand {
                op: "concat",
                shape: vec![],
            });
        }
        let first = self.shape_of(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::BadOperand {
                op: "concat",
                shape: first,
            });
        }
        let mut axis_len = 0;
        for &p in parts {
            let s = self.shape_of(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            axis_len += s[axis];
        }
        let mut out = first;
        out[axis] = axis_len;
        Ok(self.push(Op::Concat { axis }, parts.to_vec(), out))
    }

    /// Cross-entropy between logits and a target distribution (both rank 1,
    /// same length), computed with the log-sum-exp trick.
    pub fn cross_entropy(&mut self, logits: NodeId, target: NodeId) -> Result<NodeId, TensorError> {
        let sl = self.shape_of(logits).to_vec();
        let st = self.shape_of(target).to_vec();
        if sl.len() != 1 || sl != st {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: sl,
                rhs: st,
            });
        }
        Ok(self.push(Op::CrossEntropy, vec![logits, target], vec![1]))
    }

    // ---- execution ----

    fn ancestors(&self, root: NodeId) -> Vec<bool> {
        let mut mark = vec![false; self.nodes.len()];
        let mut stack = vec![root.0];
        while let Some(i) = stack.pop() {
            if mark[i] {
                continue;
            }
            mark[i] = true;
            for p in &self.nodes[i].parents {
                stack.push(p.0);
            }
        }
        mark
    }

    /// Runs the forward pass for `root` and every ancestor, caching all
    /// intermediate values for a later `backward`.
    pub fn evaluate(
        &mut self,
        root: NodeId,
        bindings: &Bindings,
        params: &ParamSet,
    ) -> Result<&Tensor, TensorError> {
        let mark = self.ancestors(root);
        self.values = vec![None; self.nodes.len()];
        self.grads.clear();
        for i in 0..self.nodes.len() {
            if !mark[i] {
                continue;
            }
            let value = self.compute(i, bindings, params)?;
            if cfg!(debug_assertions) && !value.all_finite() {
                return Err(TensorError::NonFinite {
                    op: self.nodes[i].op.name(),
                });
            }
            self.values[i] = Some(value);
        }
        Ok(self.values[root.0].as_ref().expect("root evaluated"))
    }

    fn parent_value(&self, node: usize, idx: usize) -> &Tensor {
        let p = self.nodes[node].parents[idx].0;
        self.values[p].as_ref().expect("parent evaluated")
    }

    fn compute(
        &self,
        i: usize,
        bindings: &Bindings,
        params: &ParamSet,
    ) -> Result<Tensor, TensorError> {
        let node = &self.nodes[i];
        let out = match &node.op {
            Op::Input { name } => {
                let bound = bindings
                    .get(name)
                    .ok_or_else(|| TensorError::UnboundInput(name.clone()))?;
                if bound.shape() != node.shape.as_slice() {
                    return Err(TensorError::BindingShape {
                        name: name.clone(),
                        bound: bound.shape().to_vec(),
                        declared: node.shape.clone(),
                    });
                }
                bound.clone()
            }
            Op::Constant { value } => (**value).clone(),
            Op::Parameter { name, .. } => {
                let p = params
                    .get(name)
                    .ok_or_else(|| TensorError::UnknownParameter(name.clone()))?;
                if p.value().shape() != node.shape.as_slice() {
                    return Err(TensorError::ParameterShape {
                        name: name.clone(),
                        actual: p.value().shape().to_vec(),
                        expected: node.shape.clone(),
                    });
                }
                p.value().clone()
            }
            Op::Add => ew_binary(self.parent_value(i, 0), self.parent_value(i, 1), |a, b| a + b),
            Op::Mul => ew_binary(self.parent_value(i, 0), self.parent_value(i, 1), |a, b| a * b),
            Op::MatMul => matmul_forward(self.parent_value(i, 0), self.parent_value(i, 1)),
            Op::Conv1d { stride } => conv1d_forward(
                self.parent_value(i, 0),
                self.parent_value(i, 1),
                self.parent_value(i, 2),
                *stride,
            ),
            Op::GruStep => {
                gru_forward(
                    self.parent_value(i, 0),
                    self.parent_value(i, 1),
                    self.parent_value(i, 2),
                    self.parent_value(i, 3),
                    self.parent_value(i, 4),
                )
                .state
            }
            Op::Tanh => unary_map(self.parent_value(i, 0), |x| x.tanh()),
            Op::Sigmoid => unary_map(self.parent_value(i, 0), sigmoid),
            Op::Exp => unary_map(self.parent_value(i, 0), f32::exp),
            Op::Log => unary_map(self.parent_value(i, 0), f32::ln),
            Op::Sqrt => unary_map(self.parent_value(i, 0), f32::sqrt),
            Op::Square => unary_map(self.parent_value(i, 0), |x| x * x),
            Op::Softmax => softmax_forward(self.parent_value(i, 0)),
            Op::ReduceSum => {
                let s: f64 = self.parent_value(i, 0).data().iter().map(|&v| v as f64).sum();
                Tensor::scalar(s as f32)
            }
            Op::ReduceMean => {
                let x = self.parent_value(i, 0);
                let s: f64 = x.data().iter().map(|&v| v as f64).sum();
                Tensor::scalar((s / x.numel() as f64) as f32)
            }
            Op::Slice { axis, start, end } => {
                slice_forward(self.parent_value(i, 0), *axis, *start, *end)
            }
            Op::Concat { axis } => {
                let parts: Vec<&Tensor> = (0..node.parents.len())
                    .map(|p| self.parent_value(i, p))
                    .collect();
                concat_forward(&parts, *axis)
            }
            Op::CrossEntropy => {
                cross_entropy_forward(self.parent_value(i, 0), self.parent_value(i, 1)).loss
            }
        };
        Ok(out)
    }

    /// Reverse-mode pass from a scalar loss. Returns gradients for every
    /// trainable parameter declared in the graph; parameters the loss does
    /// not depend on get zero gradients. Frozen parameters are skipped.
    pub fn backward(&mut self, loss: NodeId) -> Result<GradMap, TensorError> {
        let lv = self.values.get(loss.0).and_then(|v| v.as_ref());
        let lv = lv.ok_or(TensorError::NotEvaluated)?;
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }

        let mark = self.ancestors(loss);
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            if !mark[i] || self.nodes[i].parents.is_empty() {
                continue;
            }
            let out_grad = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.dispatch(i, &out_grad)?;
            self.grads[i] = Some(out_grad);
        }

        // Every trainable parameter declared in the graph gets an entry;
        // parameters the loss does not depend on get zeros.
        let mut result = GradMap::new();
        for (name, id) in &self.parameters {
            let trainable = matches!(self.nodes[id.0].op, Op::Parameter { trainable: true, .. });
            if !trainable {
                continue;
            }
            let g = match &self.grads[id.0] {
                Some(g) => g.clone(),
                None => Tensor::zeros(&self.nodes[id.0].shape),
            };
            result.insert(name.clone(), g);
        }
        Ok(result)
    }

    /// Whether gradient work for this node can be skipped entirely.
    fn grad_skippable(&self, id: NodeId) -> bool {
        matches!(
            self.nodes[id.0].op,
            Op::Constant { .. } | Op::Parameter { trainable: false, .. }
        )
    }

    fn grad_buf(&mut self, id: NodeId) -> &mut Tensor {
        let shape = self.nodes[id.0].shape.clone();
        self.grads[id.0].get_or_insert_with(|| Tensor::zeros(&shape))
    }

    fn dispatch(&mut self, i: usize, out_grad: &Tensor) -> Result<(), TensorError> {
        let parents = self.nodes[i].parents.clone();
        let want: Vec<bool> = parents.iter().map(|&p| !self.grad_skippable(p)).collect();
        if want.iter().all(|w| !w) {
            return Ok(());
        }
        let op = self.nodes[i].op.clone();
        match op {
            Op::Input { .. } | Op::Constant { .. } | Op::Parameter { .. } => {}
            Op::Add => {
                let lhs_shape = self.nodes[parents[0].0].shape.clone();
                let rhs_shape = self.nodes[parents[1].0].shape.clone();
                if want[0] {
                    acc_eq(self.grad_buf(parents[0]), out_grad.data());
                }
                if want[1] {
                    acc_broadcast_rhs(self.grad_buf(parents[1]), out_grad.data(), &lhs_shape, &rhs_shape, None);
                }
            }
            Op::Mul => {
                let a = self.parent_value(i, 0).clone();
                let b = self.parent_value(i, 1).clone();
                if want[0] {
                    let g = mul_grad_lhs(out_grad, &b, a.shape());
                    acc_eq(self.grad_buf(parents[0]), &g);
                }
                if want[1] {
                    acc_broadcast_rhs(
                        self.grad_buf(parents[1]),
                        out_grad.data(),
                        a.shape(),
                        b.shape(),
                        Some(a.data()),
                    );
                }
            }
            Op::MatMul => {
                let a = self.parent_value(i, 0).clone();
                let b = self.parent_value(i, 1).clone();
                let (m, k, n) = matmul_dims(a.shape(), b.shape());
                if want[0] {
                    // dA = G B^T
                    mm_nt(out_grad.data(), b.data(), m, n, k, self.grad_buf(parents[0]).data_mut());
                }
                if want[1] {
                    // dB = A^T G
                    mm_tn(a.data(), out_grad.data(), m, k, n, self.grad_buf(parents[1]).data_mut());
                }
            }
            Op::Conv1d { stride } => {
                let x = self.parent_value(i, 0).clone();
                let w = self.parent_value(i, 1).clone();
                conv1d_backward(self, &parents, &want, &x, &w, out_grad, stride);
            }
            Op::GruStep => {
                let x = self.parent_value(i, 0).clone();
                let h = self.parent_value(i, 1).clone();
                let w = self.parent_value(i, 2).clone();
                let u = self.parent_value(i, 3).clone();
                let b = self.parent_value(i, 4).clone();
                gru_backward(self, &parents, &want, &x, &h, &w, &u, &b, out_grad);
            }
            Op::Tanh => {
                let y = self.values[i].as_ref().expect("evaluated").clone();
                let g: Vec<f32> = out_grad
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &y)| g * (1.0 - y * y))
                    .collect();
                acc_eq(self.grad_buf(parents[0]), &g);
            }
            Op::Sigmoid => {
                let y = self.values[i].as_ref().expect("evaluated").clone();
                let g: Vec<f32> = out_grad
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &y)| g * y * (1.0 - y))
                    .collect();
                acc_eq(self.grad_buf(parents[0]), &g);
            }
            Op::Exp => {
                let y = self.values[i].as_ref().expect("evaluated").clone();
                let g: Vec<f32> = out_grad
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &y)| g * y)
                    .collect();
                acc_eq(self.grad_buf(parents[0]), &g);
            }
            Op::Log => {
                let x = self.parent_value(i, 0).clone();
                let g: Vec<f32> = out_grad
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &x)| g / x)
                    .collect();
                acc_eq(self.grad_buf(parents[0]), &g);
            }
            Op::Sqrt => {
                // Guarded at y == 0 so silence does not blow up the pass.
                let y = self.values[i].as_ref().expect("evaluated").clone();
                let g: Vec<f32> = out_grad
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &y)| g * 0.5 / y.max(1e-6))
                    .collect();
                acc_eq(self.grad_buf(parents[0]), &g);
            }
            Op::Square => {
                let x = self.parent_value(i, 0).clone();
                let g: Vec<f32> = out_grad
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &x)| g * 2.0 * x)
                    .collect();
                acc_eq(self.grad_buf(parents[0]), &g);
            }
            Op::Softmax => {
                let y = self.values[i].as_ref().expect("evaluated").clone();
                let g = softmax_backward(&y, out_grad);
                acc_eq(self.grad_buf(parents[0]), &g);
            }
            Op::ReduceSum => {
                let g0 = out_grad.data()[0];
                for v in self.grad_buf(parents[0]).data_mut() {
                    *v += g0;
                }
            }
            Op::ReduceMean => {
                let n = self.nodes[parents[0].0].shape.iter().product::<usize>() as f32;
                let g0 = out_grad.data()[0] / n;
                for v in self.grad_buf(parents[0]).data_mut() {
                    *v += g0;
                }
            }
            Op::Slice { axis, start, end } => {
                let parent_shape = self.nodes[parents[0].0].shape.clone();
                slice_backward(
                    self.grad_buf(parents[0]),
                    out_grad,
                    &parent_shape,
                    axis,
                    start,
                    end,
                );
            }
            Op::Concat { axis } => {
                let mut offset = 0;
                for (pi, &p) in parents.iter().enumerate() {
                    let pshape = self.nodes[p.0].shape.clone();
                    let span = pshape[axis];
                    if want[pi] {
                        concat_backward_part(self.grad_buf(p), out_grad, &pshape, axis, offset);
                    }
                    offset += span;
                }
            }
            Op::CrossEntropy => {
                let z = self.parent_value(i, 0).clone();
                let t = self.parent_value(i, 1).clone();
                let fwd = cross_entropy_forward(&z, &t);
                let g0 = out_grad.data()[0];
                if want[0] {
                    let tsum: f64 = t.data().iter().map(|&v| v as f64).sum();
                    let buf = self.grad_buf(parents[0]);
                    for ((d, &p), &tv) in buf.data_mut().iter_mut().zip(&fwd.probs).zip(t.data()) {
                        *d += g0 * (p * tsum as f32 - tv);
                    }
                }
                if want[1] {
                    let lse = fwd.lse as f32;
                    let buf = self.grad_buf(parents[1]);
                    for (d, &zv) in buf.data_mut().iter_mut().zip(z.data()) {
                        *d += g0 * (lse - zv);
                    }
                }
            }
        }
        Ok(())
    }
}

// ---- kernels ----

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn unary_map(x: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
        .expect("shape preserved")
}

/// Elementwise with optional rank-1 right-operand broadcast over rows.
fn ew_binary(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let mut out = vec![0.0f32; a.numel()];
    if a.shape() == b.shape() {
        for ((o, &x), &y) in out.iter_mut().zip(a.data()).zip(b.data()) {
            *o = f(x, y);
        }
    } else {
        let n = b.numel();
        for (orow, arow) in out.chunks_mut(n).zip(a.data().chunks(n)) {
            for ((o, &x), &y) in orow.iter_mut().zip(arow).zip(b.data()) {
                *o = f(x, y);
            }
        }
    }
    Tensor::new(a.shape().to_vec(), out).expect("shape preserved")
}

fn mul_grad_lhs(out_grad: &Tensor, b: &Tensor, lhs_shape: &[usize]) -> Vec<f32> {
    let mut g = vec![0.0f32; out_grad.numel()];
    if lhs_shape == b.shape() {
        for ((d, &og), &bv) in g.iter_mut().zip(out_grad.data()).zip(b.data()) {
            *d = og * bv;
        }
    } else {
        let n = b.numel();
        for (grow, orow) in g.chunks_mut(n).zip(out_grad.data().chunks(n)) {
            for ((d, &og), &bv) in grow.iter_mut().zip(orow).zip(b.data()) {
                *d = og * bv;
            }
        }
    }
    g
}

fn acc_eq(buf: &mut Tensor, g: &[f32]) {
    for (d, &s) in buf.data_mut().iter_mut().zip(g) {
        *d += s;
    }
}

/// Accumulates the right-operand gradient of `add`/`mul`, reducing over
/// broadcast rows in f64. `lhs` is `Some` for `mul` (gradient scales by it).
fn acc_broadcast_rhs(
    buf: &mut Tensor,
    out_grad: &[f32],
    lhs_shape: &[usize],
    rhs_shape: &[usize],
    lhs: Option<&[f32]>,
) {
    let rhs_n: usize = rhs_shape.iter().product();
    let lhs_n: usize = lhs_shape.iter().product();
    if lhs_shape == rhs_shape {
        match lhs {
            None => acc_eq(buf, out_grad),
            Some(a) => {
                for ((d, &g), &av) in buf.data_mut().iter_mut().zip(out_grad).zip(a) {
                    *d += g * av;
                }
            }
        }
        return;
    }
    let rows = lhs_n / rhs_n;
    let mut acc = vec![0.0f64; rhs_n];
    for r in 0..rows {
        let grow = &out_grad[r * rhs_n..(r + 1) * rhs_n];
        match lhs {
            None => {
                for (a, &g) in acc.iter_mut().zip(grow) {
                    *a += g as f64;
                }
            }
            Some(av) => {
                let arow = &av[r * rhs_n..(r + 1) * rhs_n];
                for ((a, &g), &x) in acc.iter_mut().zip(grow).zip(arow) {
                    *a += (g * x) as f64;
                }
            }
        }
    }
    for (d, a) in buf.data_mut().iter_mut().zip(acc) {
        *d += a as f32;
    }
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> (usize, usize, usize) {
    match (sa, sb) {
        ([m, k], [_, n]) => (*m, *k, *n),
        ([k], [_, n]) => (1, *k, *n),
        ([m, k], [_]) => (*m, *k, 1),
        _ => unreachable!("shape-checked at build"),
    }
}

/// C[m,n] += A[m,k] B[k,n], cache-friendly i-k-j order.
fn mm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, c: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// C[m,k] += A[m,n] B^T where B is [k,n]; row-dot form.
fn mm_nt(a: &[f32], b: &[f32], m: usize, n: usize, k: usize, c: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for (kk, cv) in crow.iter_mut().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut s = 0.0f32;
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            *cv += s;
        }
    }
}

/// C[k,n] += A^T G where A is [m,k] and G is [m,n]; axpy form.
fn mm_tn(a: &[f32], g: &[f32], m: usize, k: usize, n: usize, c: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let crow = &mut c[kk * n..(kk + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += aik * gv;
            }
        }
    }
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = matmul_dims(a.shape(), b.shape());
    let shape = match (a.rank(), b.rank()) {
        (2, 2) => vec![m, n],
        (1, 2) => vec![n],
        (2, 1) => vec![m],
        _ => unreachable!(),
    };
    let mut out = vec![0.0f32; m * n];
    if n == 1 {
        // matrix-vector: contiguous dot per row
        for i in 0..m {
            let arow = &a.data()[i * k..(i + 1) * k];
            let mut s = 0.0f32;
            for (&x, &y) in arow.iter().zip(b.data()) {
                s += x * y;
            }
            out[i] = s;
        }
    } else {
        mm(a.data(), b.data(), m, k, n, &mut out);
    }
    Tensor::new(shape, out).expect("matmul shape")
}

fn conv1d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Tensor {
    let (t, ci) = (x.shape()[0], x.shape()[1]);
    let (k, co) = (w.shape()[0], w.shape()[2]);
    let t_out = (t - k) / stride + 1;
    let mut out = vec![0.0f32; t_out * co];
    for to in 0..t_out {
        let orow = &mut out[to * co..(to + 1) * co];
        orow.copy_from_slice(b.data());
        for kk in 0..k {
            let xrow = &x.data()[(to * stride + kk) * ci..(to * stride + kk + 1) * ci];
            let wmat = &w.data()[kk * ci * co..(kk + 1) * ci * co];
            for (c, &xv) in xrow.iter().enumerate() {
                let wrow = &wmat[c * co..(c + 1) * co];
                for (ov, &wv) in orow.iter_mut().zip(wrow) {
                    *ov += xv * wv;
                }
            }
        }
    }
    Tensor::new(vec![t_out, co], out).expect("conv1d shape")
}

#[allow(clippy::too_many_arguments)]
fn conv1d_backward(
    g: &mut Graph,
    parents: &[NodeId],
    want: &[bool],
    x: &Tensor,
    w: &Tensor,
    out_grad: &Tensor,
    stride: usize,
) {
    let (t, ci) = (x.shape()[0], x.shape()[1]);
    let (k, co) = (w.shape()[0], w.shape()[2]);
    let t_out = (t - k) / stride + 1;
    if want[0] {
        let dx = g.grad_buf(parents[0]).data_mut();
        for to in 0..t_out {
            let grow = &out_grad.data()[to * co..(to + 1) * co];
            for kk in 0..k {
                let wmat = &w.data()[kk * ci * co..(kk + 1) * ci * co];
                let drow = &mut dx[(to * stride + kk) * ci..(to * stride + kk + 1) * ci];
                for (c, dv) in drow.iter_mut().enumerate() {
                    let wrow = &wmat[c * co..(c + 1) * co];
                    let mut s = 0.0f32;
                    for (&gv, &wv) in grow.iter().zip(wrow) {
                        s += gv * wv;
                    }
                    *dv += s;
                }
            }
        }
    }
    if want[1] {
        let dw = g.grad_buf(parents[1]).data_mut();
        for to in 0..t_out {
            let grow = &out_grad.data()[to * co..(to + 1) * co];
            for kk in 0..k {
                let xrow = &x.data()[(to * stride + kk) * ci..(to * stride + kk + 1) * ci];
                let wslab = &mut dw[kk * ci * co..(kk + 1) * ci * co];
                for (c, &xv) in xrow.iter().enumerate() {
                    let wrow = &mut wslab[c * co..(c + 1) * co];
                    for (dv, &gv) in wrow.iter_mut().zip(grow) {
                        *dv += xv * gv;
                    }
                }
            }
        }
    }
    if want[2] {
        let db = g.grad_buf(parents[2]).data_mut();
        for to in 0..t_out {
            let grow = &out_grad.data()[to * co..(to + 1) * co];
            for (dv, &gv) in db.iter_mut().zip(grow) {
                *dv += gv;
            }
        }
    }
}

struct GruForward {
    state: Tensor,
    pre_h: Vec<f32>,
    z: Vec<f32>,
    r: Vec<f32>,
    c: Vec<f32>,
}

fn gru_forward(x: &Tensor, h: &Tensor, w: &Tensor, u: &Tensor, b: &Tensor) -> GruForward {
    let d = x.shape()[1];
    let hd = h.shape()[1];
    let g3 = 3 * hd;
    let mut pre_x = b.data().to_vec();
    mm(x.data(), w.data(), 1, d, g3, &mut pre_x);
    let mut pre_h = vec![0.0f32; g3];
    mm(h.data(), u.data(), 1, hd, g3, &mut pre_h);
    let mut z = vec![0.0f32; hd];
    let mut r = vec![0.0f32; hd];
    let mut c = vec![0.0f32; hd];
    for j in 0..hd {
        z[j] = sigmoid(pre_x[j] + pre_h[j]);
        r[j] = sigmoid(pre_x[hd + j] + pre_h[hd + j]);
        c[j] = (pre_x[2 * hd + j] + r[j] * pre_h[2 * hd + j]).tanh();
    }
    let mut out = vec![0.0f32; hd];
    for j in 0..hd {
        out[j] = (1.0 - z[j]) * h.data()[j] + z[j] * c[j];
    }
    GruForward {
        state: Tensor::new(vec![1, hd], out).expect("gru shape"),
        pre_h,
        z,
        r,
        c,
    }
}

#[allow(clippy::too_many_arguments)]
fn gru_backward(
    g: &mut Graph,
    parents: &[NodeId],
    want: &[bool],
    x: &Tensor,
    h: &Tensor,
    w: &Tensor,
    u: &Tensor,
    b: &Tensor,
    out_grad: &Tensor,
) {
    let d = x.shape()[1];
    let hd = h.shape()[1];
    let g3 = 3 * hd;
    let fwd = gru_forward(x, h, w, u, b);
    let go = out_grad.data();

    // Gate-block gradients, laid out [z | r | c] like the weights.
    let mut d_pre_x = vec![0.0f32; g3];
    let mut d_pre_h = vec![0.0f32; g3];
    let mut dh_direct = vec![0.0f32; hd];
    for j in 0..hd {
        let (z, r, c) = (fwd.z[j], fwd.r[j], fwd.c[j]);
        let hv = h.data()[j];
        let dc = go[j] * z;
        let dz = go[j] * (c - hv);
        dh_direct[j] = go[j] * (1.0 - z);
        let da_c = dc * (1.0 - c * c);
        let dr = da_c * fwd.pre_h[2 * hd + j];
        let da_z = dz * z * (1.0 - z);
        let da_r = dr * r * (1.0 - r);
        d_pre_x[j] = da_z;
        d_pre_x[hd + j] = da_r;
        d_pre_x[2 * hd + j] = da_c;
        d_pre_h[j] = da_z;
        d_pre_h[hd + j] = da_r;
        d_pre_h[2 * hd + j] = da_c * r;
    }

    if want[0] {
        // dx = d_pre_x W^T
        mm_nt(&d_pre_x, w.data(), 1, g3, d, g.grad_buf(parents[0]).data_mut());
    }
    if want[1] {
        let buf = g.grad_buf(parents[1]).data_mut();
        // dh = go .* (1 - z) + d_pre_h U^T
        mm_nt(&d_pre_h, u.data(), 1, g3, hd, buf);
        for (dv, &dd) in buf.iter_mut().zip(&dh_direct) {
            *dv += dd;
        }
    }
    if want[2] {
        // dW = x^T d_pre_x
        mm_tn(x.data(), &d_pre_x, 1, d, g3, g.grad_buf(parents[2]).data_mut());
    }
    if want[3] {
        // dU = h^T d_pre_h
        mm_tn(h.data(), &d_pre_h, 1, hd, g3, g.grad_buf(parents[3]).data_mut());
    }
    if want[4] {
        acc_eq(g.grad_buf(parents[4]), &d_pre_x);
    }
}

fn softmax_forward(x: &Tensor) -> Tensor {
    let cols = *x.shape().last().expect("non-empty shape");
    let mut out = vec![0.0f32; x.numel()];
    for (orow, xrow) in out.chunks_mut(cols).zip(x.data().chunks(cols)) {
        let m = xrow.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for (o, &v) in orow.iter_mut().zip(xrow) {
            let e = (v - m).exp();
            *o = e;
            sum += e as f64;
        }
        for o in orow.iter_mut() {
            *o = (*o as f64 / sum) as f32;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("softmax shape")
}

fn softmax_backward(y: &Tensor, out_grad: &Tensor) -> Vec<f32> {
    let cols = *y.shape().last().expect("non-empty shape");
    let mut dx = vec![0.0f32; y.numel()];
    for ((drow, yrow), grow) in dx
        .chunks_mut(cols)
        .zip(y.data().chunks(cols))
        .zip(out_grad.data().chunks(cols))
    {
        let dot: f64 = yrow
            .iter()
            .zip(grow)
            .map(|(&yv, &gv)| (yv * gv) as f64)
            .sum();
        for ((d, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
            *d = yv * (gv - dot as f32);
        }
    }
    dx
}

fn slice_forward(x: &Tensor, axis: usize, start: usize, end: usize) -> Tensor {
    let shape = x.shape();
    let mut out_shape = shape.to_vec();
    out_shape[axis] = end - start;
    let out = match shape.len() {
        1 => x.data()[start..end].to_vec(),
        2 => {
            let (rows, cols) = (shape[0], shape[1]);
            if axis == 0 {
                x.data()[start * cols..end * cols].to_vec()
            } else {
                let mut v = Vec::with_capacity(rows * (end - start));
                for r in 0..rows {
                    v.extend_from_slice(&x.data()[r * cols + start..r * cols + end]);
                }
                v
            }
        }
        _ => unreachable!("slice supports rank 1 and 2"),
    };
    Tensor::new(out_shape, out).expect("slice shape")
}

fn slice_backward(
    buf: &mut Tensor,
    out_grad: &Tensor,
    parent_shape: &[usize],
    axis: usize,
    start: usize,
    end: usize,
) {
    match parent_shape.len() {
        1 => {
            let dst = &mut buf.data_mut()[start..end];
            for (d, &g) in dst.iter_mut().zip(out_grad.data()) {
                *d += g;
            }
        }
        2 => {
            let (rows, cols) = (parent_shape[0], parent_shape[1]);
            if axis == 0 {
                let dst = &mut buf.data_mut()[start * cols..end * cols];
                for (d, &g) in dst.iter_mut().zip(out_grad.data()) {
                    *d += g;
                }
            } else {
                let span = end - start;
                for r in 0..rows {
                    let dst = &mut buf.data_mut()[r * cols + start..r * cols + end];
                    let src = &out_grad.data()[r * span..(r + 1) * span];
                    for (d, &g) in dst.iter_mut().zip(src) {
                        *d += g;
                    }
                }
            }
        }
        _ => unreachable!(),
    }
}

fn concat_forward(parts: &[&Tensor], axis: usize) -> Tensor {
    let rank = parts[0].rank();
    if rank == 1 || axis == 0 {
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(p.data());
        }
        let mut shape = parts[0].shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        return Tensor::new(shape, out).expect("concat shape");
    }
    // rank 2, axis 1: interleave rows
    let rows = parts[0].shape()[0];
    let total_cols: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = Vec::with_capacity(rows * total_cols);
    for r in 0..rows {
        for p in parts {
            let cols = p.shape()[1];
            out.extend_from_slice(&p.data()[r * cols..(r + 1) * cols]);
        }
    }
    Tensor::new(vec![rows, total_cols], out).expect("concat shape")
}

fn concat_backward_part(
    buf: &mut Tensor,
    out_grad: &Tensor,
    part_shape: &[usize],
    axis: usize,
    offset: usize,
) {
    if part_shape.len() == 1 || axis == 0 {
        let cols: usize = part_shape.iter().skip(1).product::<usize>().max(1);
        let start = offset * cols;
        let len = part_shape[0] * cols;
        let src = &out_grad.data()[start..start + len];
        for (d, &g) in buf.data_mut().iter_mut().zip(src) {
            *d += g;
        }
        return;
    }
    let rows = part_shape[0];
    let cols = part_shape[1];
    let total_cols = out_grad.shape()[1];
    for r in 0..rows {
        let src = &out_grad.data()[r * total_cols + offset..r * total_cols + offset + cols];
        let dst = &mut buf.data_mut()[r * cols..(r + 1) * cols];
        for (d, &g) in dst.iter_mut().zip(src) {
            *d += g;
        }
    }
}

struct CeForward {
    loss: Tensor,
    probs: Vec<f32>,
    lse: f64,
}

fn cross_entropy_forward(logits: &Tensor, target: &Tensor) -> CeForward {
    let z = logits.data();
    let m = z.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = z.iter().map(|&v| (v as f64 - m).exp()).sum();
    let lse = m + sum.ln();
    let probs: Vec<f32> = z.iter().map(|&v| ((v as f64 - m).exp() / sum) as f32).collect();
    let tsum: f64 = target.data().iter().map(|&v| v as f64).sum();
    let dot: f64 = target
        .data()
        .iter()
        .zip(z)
        .map(|(&t, &v)| t as f64 * v as f64)
        .sum();
    CeForward {
        loss: Tensor::scalar((lse * tsum - dot) as f32),
        probs,
        lse,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Parameter;

    fn params_with(name: &str, t: Tensor) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(Parameter::new(name, t, true)).unwrap();
        p
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i = g.constant_owned(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = g.constant_owned(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let out = g.matmul(i, m).unwrap();
        let v = g.evaluate(out, &Bindings::new(), &ParamSet::new()).unwrap();
        assert_eq!(v.data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut g = Graph::new();
        let x = g.constant_owned(Tensor::vector(vec![0.0, 0.0]));
        let s = g.softmax(x).unwrap();
        let v = g.evaluate(s, &Bindings::new(), &ParamSet::new()).unwrap();
        assert_eq!(v.data(), &[0.5, 0.5]);
    }

    #[test]
    fn conv1d_hand_example() {
        // [1,2,3,4] * kernel [1,1], stride 1 -> [3,5,7]
        let mut g = Graph::new();
        let x = g.constant_owned(Tensor::matrix(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = g.constant_owned(Tensor::new(vec![2, 1, 1], vec![1.0, 1.0]).unwrap());
        let b = g.constant_owned(Tensor::vector(vec![0.0]));
        let y = g.conv1d(x, w, b, 1).unwrap();
        let v = g.evaluate(y, &Bindings::new(), &ParamSet::new()).unwrap();
        assert_eq!(v.shape(), &[3, 1]);
        assert_eq!(v.data(), &[3.0, 5.0, 7.0]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let params = params_with("theta", Tensor::matrix(2, 3, vec![0.5; 6]).unwrap());
        let mut g = Graph::new();
        let t = g.parameter(&params, "theta").unwrap();
        let loss = g.reduce_sum(t);
        g.evaluate(loss, &Bindings::new(), &params).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["theta"].data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let params = params_with("theta", Tensor::vector(vec![1.0, 2.0]));
        let mut g = Graph::new();
        let t = g.parameter(&params, "theta").unwrap();
        let sq = g.square(t);
        let loss = g.reduce_sum(sq);
        g.evaluate(loss, &Bindings::new(), &params).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["theta"].data(), &[2.0, 4.0]);
    }

    #[test]
    fn disconnected_parameter_gets_zero_gradient() {
        let mut params = params_with("theta", Tensor::vector(vec![1.0, 2.0]));
        params
            .insert(Parameter::new("other", Tensor::vector(vec![3.0]), true))
            .unwrap();
        let mut g = Graph::new();
        let t = g.parameter(&params, "theta").unwrap();
        let _unused = g.parameter(&params, "other").unwrap();
        let loss = g.reduce_sum(t);
        g.evaluate(loss, &Bindings::new(), &params).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["theta"].data(), &[1.0, 1.0]);
        assert_eq!(grads["other"].data(), &[0.0]);
    }

    #[test]
    fn frozen_parameter_gradient_omitted() {
        let mut params = ParamSet::new();
        params
            .insert(Parameter::new("w", Tensor::vector(vec![1.0, 2.0]), false))
            .unwrap();
        params
            .insert(Parameter::new("theta", Tensor::vector(vec![0.5, 0.5]), true))
            .unwrap();
        let mut g = Graph::new();
        let w = g.parameter(&params, "w").unwrap();
        let t = g.parameter(&params, "theta").unwrap();
        let prod = g.mul(w, t).unwrap();
        let loss = g.reduce_sum(prod);
        g.evaluate(loss, &Bindings::new(), &params).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(!grads.contains_key("w"));
        assert_eq!(grads["theta"].data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let params = params_with("theta", Tensor::vector(vec![1.0, 2.0]));
        let mut g = Graph::new();
        let t = g.parameter(&params, "theta").unwrap();
        let sq = g.square(t);
        g.evaluate(sq, &Bindings::new(), &params).unwrap();
        assert!(matches!(
            g.backward(sq),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn unbound_input_rejected() {
        let mut g = Graph::new();
        let x = g.input("x", &[2]);
        let s = g.reduce_sum(x);
        let err = g.evaluate(s, &Bindings::new(), &ParamSet::new());
        assert!(matches!(err, Err(TensorError::UnboundInput(_))));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant_owned(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant_owned(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2]") && msg.contains("[3]"));
    }

    #[test]
    fn evaluate_is_deterministic() {
        let params = params_with("theta", Tensor::vector(vec![0.3, -0.7, 0.1]));
        let run = || {
            let mut g = Graph::new();
            let t = g.parameter(&params, "theta").unwrap();
            let a = g.tanh(t);
            let s = g.softmax(a).unwrap();
            let loss = g.reduce_sum(s);
            let mut b = Bindings::new();
            b.bind("unused", Tensor::scalar(0.0));
            g.evaluate(loss, &b, &params).unwrap().clone()
        };
        let v1 = run();
        let v2 = run();
        assert_eq!(v1.data(), v2.data());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant_owned(Tensor::matrix(3, 4, (0..12).map(|v| v as f32 * 0.37 - 2.0).collect()).unwrap());
        let s = g.softmax(x).unwrap();
        let v = g.evaluate(s, &Bindings::new(), &ParamSet::new()).unwrap();
        for row in v.data().chunks(4) {
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }
}
