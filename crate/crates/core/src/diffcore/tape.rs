use super::kernels::{self, gemm, sigmoid, softplus};
use super::{DiffError, Tensor};

/// Index of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable primitive together with its constant parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Input or parameter. Has no parents.
    Leaf,
    /// `[m, k] x [k, n] -> [m, n]`
    MatMul,
    Add,
    Sub,
    Mul,
    /// `[m, n] + [n]`, the vector broadcast over rows.
    AddRow,
    Scale(f64),
    Relu,
    LeakyRelu(f64),
    Softplus,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Square,
    /// Row-wise over a 2-D input.
    LogSoftmax,
    /// Sum of all elements to a scalar.
    Sum,
    /// Mean of all elements to a scalar.
    Mean,
    /// Copies the listed rows of a matrix.
    GatherRows(Vec<usize>),
    /// `[m, n] -> [m]`, element `(i, cols[i])` of each row.
    Pick(Vec<usize>),
    /// Column window `[start, start + len)` of a matrix.
    SliceCols { start: usize, len: usize },
    /// Concatenation along the first axis of any number of inputs.
    Concat,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Leaf => "leaf",
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::AddRow => "add_row",
            Primitive::Scale(_) => "scale",
            Primitive::Relu => "relu",
            Primitive::LeakyRelu(_) => "leaky_relu",
            Primitive::Softplus => "softplus",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Square => "square",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::GatherRows(_) => "gather_rows",
            Primitive::Pick(_) => "pick",
            Primitive::SliceCols { .. } => "slice_cols",
            Primitive::Concat => "concat",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Leaf => Some(0),
            Primitive::MatMul
            | Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::AddRow => Some(2),
            Primitive::Concat => None,
            _ => Some(1),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Primitive,
    parents: Vec<NodeId>,
    value: Tensor,
}

/// Append-only record of a computation, differentiated in reverse.
///
/// Parents always precede their children, so a single reverse sweep over the
/// node list visits every node after all of its consumers.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node of a tape.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `id`, or `None` if the node does not influence the loss.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient for `id`, materialising zeros for untouched nodes.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    /// Takes ownership of the gradient for `id` (zeros when untouched).
    pub fn take(&mut self, id: NodeId) -> Tensor {
        match self.grads[id.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }
}

fn mismatch(op: &Primitive, a: &Tensor, b: &Tensor) -> DiffError {
    DiffError::ShapeMismatch {
        op: op.name(),
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn require_matrix(op: &Primitive, t: &Tensor) -> Result<(usize, usize), DiffError> {
    if t.shape().len() != 2 {
        return Err(DiffError::RankMismatch {
            op: op.name(),
            expected: 2,
            shape: t.shape().to_vec(),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn forward(op: &Primitive, inputs: &[&Tensor]) -> Result<Tensor, DiffError> {
    if let Some(n) = op.arity() {
        if inputs.len() != n {
            return Err(DiffError::Arity {
                op: op.name(),
                expected: n,
                got: inputs.len(),
            });
        }
    }
    let out = match op {
        Primitive::Leaf => unreachable!("leaves are never recomputed"),
        Primitive::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = require_matrix(op, a)?;
            let (k2, n) = require_matrix(op, b)?;
            if k != k2 {
                return Err(mismatch(op, a, b));
            }
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
            Tensor::from_parts(vec![m, n], out)
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(mismatch(op, a, b));
            }
            match op {
                Primitive::Add => zip_map(a, b, |x, y| x + y),
                Primitive::Sub => zip_map(a, b, |x, y| x - y),
                _ => zip_map(a, b, |x, y| x * y),
            }
        }
        Primitive::AddRow => {
            let (a, b) = (inputs[0], inputs[1]);
            let (_, n) = require_matrix(op, a)?;
            if b.shape() != [n] {
                return Err(mismatch(op, a, b));
            }
            let mut data = a.data().to_vec();
            for row in data.chunks_exact_mut(n) {
                for (v, bias) in row.iter_mut().zip(b.data()) {
                    *v += bias;
                }
            }
            Tensor::from_parts(a.shape().to_vec(), data)
        }
        Primitive::Scale(c) => inputs[0].map(|v| c * v),
        Primitive::Relu => inputs[0].map(|v| if v > 0.0 { v } else { 0.0 }),
        Primitive::LeakyRelu(alpha) => inputs[0].map(|v| if v > 0.0 { v } else { alpha * v }),
        Primitive::Softplus => inputs[0].map(softplus),
        Primitive::Sigmoid => inputs[0].map(sigmoid),
        Primitive::Tanh => inputs[0].map(f64::tanh),
        Primitive::Exp => inputs[0].map(f64::exp),
        Primitive::Log => inputs[0].map(f64::ln),
        Primitive::Square => inputs[0].map(|v| v * v),
        Primitive::LogSoftmax => {
            let x = inputs[0];
            let (_, n) = require_matrix(op, x)?;
            let mut out = vec![0.0; x.len()];
            kernels::log_softmax_rows(x.data(), n, &mut out);
            Tensor::from_parts(x.shape().to_vec(), out)
        }
        Primitive::Sum => Tensor::scalar(inputs[0].data().iter().sum()),
        Primitive::Mean => {
            let x = inputs[0];
            Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
        }
        Primitive::GatherRows(idx) => {
            let x = inputs[0];
            if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
                return Err(DiffError::IndexOutOfRange {
                    op: op.name(),
                    index: bad,
                    bound: x.rows(),
                });
            }
            if idx.is_empty() {
                return Err(DiffError::InvalidArgument("gather_rows with no indices".into()));
            }
            x.select_rows(idx)
        }
        Primitive::Pick(cols) => {
            let x = inputs[0];
            let (m, n) = require_matrix(op, x)?;
            if cols.len() != m {
                return Err(DiffError::ShapeMismatch {
                    op: op.name(),
                    lhs: x.shape().to_vec(),
                    rhs: vec![cols.len()],
                });
            }
            if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
                return Err(DiffError::IndexOutOfRange {
                    op: op.name(),
                    index: bad,
                    bound: n,
                });
            }
            let data = cols.iter().enumerate().map(|(i, &c)| x.data()[i * n + c]).collect();
            Tensor::vector(data)
        }
        Primitive::SliceCols { start, len } => {
            let x = inputs[0];
            let (m, n) = require_matrix(op, x)?;
            if *len == 0 || start + len > n {
                return Err(DiffError::IndexOutOfRange {
                    op: op.name(),
                    index: start + len,
                    bound: n,
                });
            }
            let mut data = Vec::with_capacity(m * len);
            for row in x.data().chunks_exact(n) {
                data.extend_from_slice(&row[*start..start + len]);
            }
            Tensor::from_parts(vec![m, *len], data)
        }
        Primitive::Concat => Tensor::concat_rows(inputs)?,
    };
    if !out.is_finite() {
        return Err(DiffError::NonFinite { op: op.name() });
    }
    Ok(out)
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                *e += c;
            }
        }
        None => *slot = Some(contribution),
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

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Primitive::Leaf,
            parents: Vec::new(),
            value,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn primitive(&self, id: NodeId) -> &Primitive {
        &self.nodes[id.0].op
    }

    /// Records `op` applied to `inputs`, caching its forward value.
    pub fn apply(&mut self, op: Primitive, inputs: &[NodeId]) -> Result<NodeId, DiffError> {
        if op == Primitive::Leaf {
            return Err(DiffError::InvalidArgument("use Tape::leaf for leaves".into()));
        }
        if let Some(&bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(DiffError::UnknownNode(bad.0));
        }
        let values: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = forward(&op, &values)?;
        self.nodes.push(Node {
            op,
            parents: inputs.to_vec(),
            value,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Replaces the value of a leaf. Call [`Tape::recompute`] afterwards to
    /// refresh downstream nodes.
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor) -> Result<(), DiffError> {
        let node = self.nodes.get_mut(id.0).ok_or(DiffError::UnknownNode(id.0))?;
        if node.op != Primitive::Leaf {
            return Err(DiffError::InvalidArgument(format!("node {} is not a leaf", id.0)));
        }
        if node.value.shape() != value.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "set_leaf",
                lhs: node.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        node.value = value;
        Ok(())
    }

    /// Re-evaluates every non-leaf node in recorded order.
    pub fn recompute(&mut self) -> Result<(), DiffError> {
        for i in 0..self.nodes.len() {
            if self.nodes[i].op == Primitive::Leaf {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let values: Vec<&Tensor> = node.parents.iter().map(|p| &before[p.0].value).collect();
            node.value = forward(&node.op, &values)?;
        }
        Ok(())
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, DiffError> {
        let root = self.nodes.get(loss.0).ok_or(DiffError::UnknownNode(loss.0))?;
        if !root.value.is_scalar() {
            return Err(DiffError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(root.value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let parent = |k: usize| &self.nodes[node.parents[k].0].value;
        let slot = |k: usize| node.parents[k].0;
        let y = &node.value;
        match &node.op {
            Primitive::Leaf => {}
            Primitive::MatMul => {
                let (a, b) = (parent(0), parent(1));
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, b.data(), true, &mut da, false);
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, a.data(), true, g.data(), false, &mut db, false);
                accumulate(&mut grads[slot(0)], Tensor::from_parts(vec![m, k], da));
                accumulate(&mut grads[slot(1)], Tensor::from_parts(vec![k, n], db));
            }
            Primitive::Add => {
                accumulate(&mut grads[slot(0)], g.clone());
                accumulate(&mut grads[slot(1)], g.clone());
            }
            Primitive::Sub => {
                accumulate(&mut grads[slot(0)], g.clone());
                accumulate(&mut grads[slot(1)], g.map(|v| -v));
            }
            Primitive::Mul => {
                accumulate(&mut grads[slot(0)], zip_map(g, parent(1), |d, b| d * b));
                accumulate(&mut grads[slot(1)], zip_map(g, parent(0), |d, a| d * a));
            }
            Primitive::AddRow => {
                let n = parent(1).len();
                let mut db = vec![0.0; n];
                for row in g.data().chunks_exact(n) {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                accumulate(&mut grads[slot(0)], g.clone());
                accumulate(&mut grads[slot(1)], Tensor::vector(db));
            }
            Primitive::Scale(c) => accumulate(&mut grads[slot(0)], g.map(|v| c * v)),
            // Subgradient at exactly zero is taken as 0.
            Primitive::Relu => accumulate(
                &mut grads[slot(0)],
                zip_map(g, parent(0), |d, x| if x > 0.0 { d } else { 0.0 }),
            ),
            Primitive::LeakyRelu(alpha) => accumulate(
                &mut grads[slot(0)],
                zip_map(g, parent(0), |d, x| if x > 0.0 { d } else { alpha * d }),
            ),
            Primitive::Softplus => {
                accumulate(&mut grads[slot(0)], zip_map(g, parent(0), |d, x| d * sigmoid(x)))
            }
            Primitive::Sigmoid => {
                accumulate(&mut grads[slot(0)], zip_map(g, y, |d, s| d * s * (1.0 - s)))
            }
            Primitive::Tanh => {
                accumulate(&mut grads[slot(0)], zip_map(g, y, |d, t| d * (1.0 - t * t)))
            }
            Primitive::Exp => accumulate(&mut grads[slot(0)], zip_map(g, y, |d, e| d * e)),
            Primitive::Log => accumulate(&mut grads[slot(0)], zip_map(g, parent(0), |d, x| d / x)),
            Primitive::Square => {
                accumulate(&mut grads[slot(0)], zip_map(g, parent(0), |d, x| 2.0 * d * x))
            }
            Primitive::LogSoftmax => {
                let n = y.shape()[1];
                let mut dx = vec![0.0; y.len()];
                for ((dst, gr), yr) in dx
                    .chunks_exact_mut(n)
                    .zip(g.data().chunks_exact(n))
                    .zip(y.data().chunks_exact(n))
                {
                    let total: f64 = gr.iter().sum();
                    for ((d, gv), lv) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = gv - lv.exp() * total;
                    }
                }
                accumulate(&mut grads[slot(0)], Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Primitive::Sum => {
                let x = parent(0);
                accumulate(&mut grads[slot(0)], Tensor::filled(x.shape(), g.item()));
            }
            Primitive::Mean => {
                let x = parent(0);
                let v = g.item() / x.len() as f64;
                accumulate(&mut grads[slot(0)], Tensor::filled(x.shape(), v));
            }
            Primitive::GatherRows(idx) => {
                let x = parent(0);
                let c = x.cols();
                let mut dx = Tensor::zeros(x.shape());
                for (out_row, &src) in idx.iter().enumerate() {
                    let dst = &mut dx.data_mut()[src * c..(src + 1) * c];
                    for (d, v) in dst.iter_mut().zip(&g.data()[out_row * c..(out_row + 1) * c]) {
                        *d += v;
                    }
                }
                accumulate(&mut grads[slot(0)], dx);
            }
            Primitive::Pick(cols) => {
                let x = parent(0);
                let n = x.shape()[1];
                let mut dx = Tensor::zeros(x.shape());
                for (i, &c) in cols.iter().enumerate() {
                    dx.data_mut()[i * n + c] += g.data()[i];
                }
                accumulate(&mut grads[slot(0)], dx);
            }
            Primitive::SliceCols { start, len } => {
                let x = parent(0);
                let n = x.shape()[1];
                let mut dx = Tensor::zeros(x.shape());
                for (dst, src) in dx.data_mut().chunks_exact_mut(n).zip(g.data().chunks_exact(*len)) {
                    dst[*start..start + len].copy_from_slice(src);
                }
                accumulate(&mut grads[slot(0)], dx);
            }
            Primitive::Concat => {
                let mut offset = 0;
                for (k, p) in node.parents.iter().enumerate() {
                    let n = self.nodes[p.0].value.len();
                    let part = g.data()[offset..offset + n].to_vec();
                    offset += n;
                    let shape = parent(k).shape().to_vec();
                    accumulate(&mut grads[p.0], Tensor::from_parts(shape, part));
                }
            }
        }
    }

    // Convenience wrappers.

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::AddRow, &[a, bias])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Scale(c), &[a])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Relu, &[a])
    }
    pub fn leaky_relu(&mut self, a: NodeId, alpha: f64) -> Result<NodeId, DiffError> {
        self.apply(Primitive::LeakyRelu(alpha), &[a])
    }
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Softplus, &[a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Sigmoid, &[a])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Tanh, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Log, &[a])
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Square, &[a])
    }
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::LogSoftmax, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Sum, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Mean, &[a])
    }
    pub fn gather_rows(&mut self, a: NodeId, rows: Vec<usize>) -> Result<NodeId, DiffError> {
        self.apply(Primitive::GatherRows(rows), &[a])
    }
    pub fn pick(&mut self, a: NodeId, cols: Vec<usize>) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Pick(cols), &[a])
    }
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, DiffError> {
        self.apply(Primitive::SliceCols { start, len }, &[a])
    }
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Concat, parts)
    }
}
