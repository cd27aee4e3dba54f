//! Define-by-run computation graph.
//!
//! Every builder call evaluates its node immediately and appends it to the
//! tape, so node ids are a topological order by construction. The graph can
//! be replayed with new input bindings; replay re-executes every node in
//! order and is bit-for-bit deterministic.

use crate::error::AutodiffError;
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Input(String),
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Pow(NodeId, f64),
    Sqrt(NodeId),
    Log(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    BroadcastScalar(NodeId, Vec<usize>),
    SumRows(NodeId),
    BroadcastRows(NodeId, usize),
    SumCols(NodeId),
    BroadcastCols(NodeId, usize),
    Reshape(NodeId, Vec<usize>),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    /// Derivative mask of (leaky-)ReLU: 1 where x > 0, `slope` elsewhere.
    /// Its own derivative is zero.
    StepMask(NodeId, f64),
    Sigmoid(NodeId),
    Clamp(NodeId, f64, f64),
    /// Elementwise product with a fixed, pre-scaled keep mask.
    Dropout(NodeId, Tensor),
    ConvTranspose1d {
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Pow(..) => "pow",
            Op::Sqrt(..) => "sqrt",
            Op::Log(..) => "log",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::BroadcastScalar(..) => "broadcast_scalar",
            Op::SumRows(..) => "sum_rows",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::SumCols(..) => "sum_cols",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::Reshape(..) => "reshape",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::StepMask(..) => "step_mask",
            Op::Sigmoid(..) => "sigmoid",
            Op::Clamp(..) => "clamp",
            Op::Dropout(..) => "dropout",
            Op::ConvTranspose1d { .. } => "conv_transpose_1d",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Input(_) | Op::Const => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Pow(a, _)
            | Op::Sqrt(a)
            | Op::Log(a)
            | Op::Transpose(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::BroadcastScalar(a, _)
            | Op::SumRows(a)
            | Op::BroadcastRows(a, _)
            | Op::SumCols(a)
            | Op::BroadcastCols(a, _)
            | Op::Reshape(a, _)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::StepMask(a, _)
            | Op::Sigmoid(a)
            | Op::Clamp(a, _, _)
            | Op::Dropout(a, _) => vec![a],
            Op::ConvTranspose1d {
                x, kernel, bias, ..
            } => vec![x, kernel, bias],
        }
    }

    /// Whether the op's vector-Jacobian product is itself expressed in
    /// differentiable graph ops (needed by [`Graph::input_grad_node`]).
    pub(crate) fn has_second_order_rule(&self) -> bool {
        !matches!(
            self,
            Op::Sqrt(_)
                | Op::Sigmoid(_)
                | Op::Clamp(..)
                | Op::Dropout(..)
                | Op::ConvTranspose1d { .. }
        )
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Tensor,
    pub(crate) requires_grad: bool,
}

/// Append-only tape of evaluated nodes.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Name of the op that produced `id`.
    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Looks up an input leaf by name.
    pub fn find_input(&self, name: &str) -> Option<NodeId> {
        self.nodes
            .iter()
            .position(|n| matches!(&n.op, Op::Input(s) if s == name))
            .map(NodeId)
    }

    pub(crate) fn check(&self, id: NodeId) -> Result<(), AutodiffError> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AutodiffError::UnknownNode(id.0))
        }
    }

    fn push(&mut self, op: Op) -> Result<NodeId, AutodiffError> {
        for input in op.inputs() {
            self.check(input)?;
        }
        let id = self.nodes.len();
        let value = self.eval(&op, id)?;
        let requires_grad = match &op {
            Op::Input(_) => true,
            Op::Const | Op::StepMask(..) => false,
            other => other.inputs().iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(id))
    }

    /// Differentiable leaf, rebindable by name on replay.
    pub fn input(&mut self, name: impl Into<String>, value: Tensor) -> Result<NodeId, AutodiffError> {
        self.push_leaf(Op::Input(name.into()), value)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId, AutodiffError> {
        self.push_leaf(Op::Const, value)
    }

    fn push_leaf(&mut self, op: Op, value: Tensor) -> Result<NodeId, AutodiffError> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op.name(), node: id });
        }
        let requires_grad = matches!(op, Op::Input(_));
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(id))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        self.push(Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        self.push(Op::AddScalar(a, c))
    }

    pub fn pow(&mut self, a: NodeId, p: f64) -> Result<NodeId, AutodiffError> {
        self.push(Op::Pow(a, p))
    }

    /// Elementwise square root. The derivative at exactly zero is taken as 0.
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Sqrt(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Log(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Transpose(a))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::SumAll(a))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::MeanAll(a))
    }

    pub fn broadcast_scalar(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, AutodiffError> {
        self.push(Op::BroadcastScalar(a, shape.to_vec()))
    }

    /// `[n, m] -> [m]`, summing over rows.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::SumRows(a))
    }

    /// `[m] -> [n, m]`.
    pub fn broadcast_rows(&mut self, a: NodeId, n: usize) -> Result<NodeId, AutodiffError> {
        self.push(Op::BroadcastRows(a, n))
    }

    /// `[n, m] -> [n]`, summing each row.
    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::SumCols(a))
    }

    /// `[n] -> [n, m]`.
    pub fn broadcast_cols(&mut self, a: NodeId, m: usize) -> Result<NodeId, AutodiffError> {
        self.push(Op::BroadcastCols(a, m))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, AutodiffError> {
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    /// `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId, AutodiffError> {
        self.push(Op::LeakyRelu(a, slope))
    }

    pub(crate) fn step_mask(&mut self, a: NodeId, slope: f64) -> Result<NodeId, AutodiffError> {
        self.push(Op::StepMask(a, slope))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Sigmoid(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId, AutodiffError> {
        self.push(Op::Clamp(a, lo, hi))
    }

    /// Multiplies by a fixed mask. The mask is kept so the same pass can be
    /// replayed exactly.
    pub fn dropout(&mut self, a: NodeId, mask: Tensor) -> Result<NodeId, AutodiffError> {
        self.push(Op::Dropout(a, mask))
    }

    /// x: `[batch, in, len]`, kernel: `[in, out, k]`, bias: `[out]`;
    /// output `[batch, out, len * stride]`.
    pub fn conv_transpose_1d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
    ) -> Result<NodeId, AutodiffError> {
        self.push(Op::ConvTranspose1d {
            x,
            kernel,
            bias,
            stride,
        })
    }

    /// Rebinds named inputs and re-evaluates every node in tape order.
    /// Unbound inputs and constants keep their current values.
    pub fn replay(&mut self, bindings: &[(&str, &Tensor)]) -> Result<(), AutodiffError> {
        for i in 0..self.nodes.len() {
            let value = match &self.nodes[i].op {
                Op::Input(name) => {
                    let Some((_, t)) = bindings.iter().find(|(n, _)| n == name) else {
                        continue;
                    };
                    let current = &self.nodes[i].value;
                    if t.shape() != current.shape() {
                        return Err(AutodiffError::BindingShape {
                            name: name.clone(),
                            expected: current.shape().to_vec(),
                            got: t.shape().to_vec(),
                        });
                    }
                    if !t.is_finite() {
                        return Err(AutodiffError::NonFinite { op: "input", node: i });
                    }
                    (*t).clone()
                }
                Op::Const => continue,
                op => self.eval(op, i)?,
            };
            self.nodes[i].value = value;
        }
        Ok(())
    }

    /// Overwrites one input leaf and re-evaluates the tape.
    pub fn set_input(&mut self, id: NodeId, value: Tensor) -> Result<(), AutodiffError> {
        self.check(id)?;
        let Op::Input(name) = &self.nodes[id.0].op else {
            return Err(AutodiffError::NotAnInput { node: id.0 });
        };
        let name = name.clone();
        self.replay(&[(name.as_str(), &value)])
    }

    fn mismatch(op: &Op, node: usize, detail: String) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op: op.name(),
            node,
            detail,
        }
    }

    pub(crate) fn eval(&self, op: &Op, node: usize) -> Result<Tensor, AutodiffError> {
        let v = |id: NodeId| &self.nodes[id.0].value;
        let same_shape = |a: NodeId, b: NodeId| -> Result<(), AutodiffError> {
            if v(a).shape() == v(b).shape() {
                Ok(())
            } else {
                Err(Self::mismatch(
                    op,
                    node,
                    format!("operands {:?} vs {:?}", v(a).shape(), v(b).shape()),
                ))
            }
        };
        let matrix = |a: NodeId| -> Result<(usize, usize), AutodiffError> {
            match *v(a).shape() {
                [n, m] => Ok((n, m)),
                ref s => Err(Self::mismatch(op, node, format!("expected a matrix, got {s:?}"))),
            }
        };
        let vector = |a: NodeId| -> Result<usize, AutodiffError> {
            match *v(a).shape() {
                [n] => Ok(n),
                ref s => Err(Self::mismatch(op, node, format!("expected a vector, got {s:?}"))),
            }
        };

        let out = match op {
            Op::Input(_) | Op::Const => self.nodes[node].value.clone(),
            Op::Add(a, b) => {
                same_shape(*a, *b)?;
                v(*a).zip_map(v(*b), |x, y| x + y)
            }
            Op::Sub(a, b) => {
                same_shape(*a, *b)?;
                v(*a).zip_map(v(*b), |x, y| x - y)
            }
            Op::Mul(a, b) => {
                same_shape(*a, *b)?;
                v(*a).zip_map(v(*b), |x, y| x * y)
            }
            Op::Scale(a, c) => v(*a).map(|x| x * c),
            Op::AddScalar(a, c) => v(*a).map(|x| x + c),
            Op::Pow(a, p) => v(*a).map(|x| x.powf(*p)),
            Op::Sqrt(a) => v(*a).map(f64::sqrt),
            Op::Log(a) => v(*a).map(f64::ln),
            Op::MatMul(a, b) => {
                let (n, k) = matrix(*a)?;
                let (k2, m) = matrix(*b)?;
                if k != k2 {
                    return Err(Self::mismatch(
                        op,
                        node,
                        format!("inner dimensions {n}x{k} · {k2}x{m}"),
                    ));
                }
                let data = kernels::matmul(v(*a).data(), v(*b).data(), n, k, m);
                Tensor::new(vec![n, m], data)?
            }
            Op::Transpose(a) => {
                let (n, m) = matrix(*a)?;
                Tensor::new(vec![m, n], kernels::transpose(v(*a).data(), n, m))?
            }
            Op::SumAll(a) => Tensor::scalar(v(*a).sum()),
            Op::MeanAll(a) => {
                let t = v(*a);
                if t.numel() == 0 {
                    return Err(Self::mismatch(op, node, "mean of an empty tensor".into()));
                }
                Tensor::scalar(t.sum() / t.numel() as f64)
            }
            Op::BroadcastScalar(a, shape) => {
                let x = v(*a)
                    .item()
                    .ok_or_else(|| Self::mismatch(op, node, "operand is not a scalar".into()))?;
                Tensor::full(shape, x)
            }
            Op::SumRows(a) => {
                let (n, m) = matrix(*a)?;
                let d = v(*a).data();
                let mut out = vec![0.0; m];
                for i in 0..n {
                    for (o, x) in out.iter_mut().zip(&d[i * m..(i + 1) * m]) {
                        *o += x;
                    }
                }
                Tensor::vector(out)
            }
            Op::BroadcastRows(a, n) => {
                let m = vector(*a)?;
                let d = v(*a).data();
                Tensor::from_fn(&[*n, m], |i| d[i % m])
            }
            Op::SumCols(a) => {
                let (_, m) = matrix(*a)?;
                Tensor::vector(v(*a).data().chunks(m.max(1)).map(|r| r.iter().sum()).collect())
            }
            Op::BroadcastCols(a, m) => {
                let n = vector(*a)?;
                let d = v(*a).data();
                Tensor::from_fn(&[n, *m], |i| d[i / m])
            }
            Op::Reshape(a, shape) => v(*a)
                .reshaped(shape)
                .map_err(|e| Self::mismatch(op, node, e.to_string()))?,
            Op::Relu(a) => v(*a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::LeakyRelu(a, s) => v(*a).map(|x| if x > 0.0 { x } else { s * x }),
            Op::StepMask(a, s) => v(*a).map(|x| if x > 0.0 { 1.0 } else { *s }),
            Op::Sigmoid(a) => v(*a).map(sigmoid),
            Op::Clamp(a, lo, hi) => v(*a).map(|x| x.clamp(*lo, *hi)),
            Op::Dropout(a, mask) => {
                if mask.shape() != v(*a).shape() {
                    return Err(Self::mismatch(
                        op,
                        node,
                        format!("mask {:?} vs input {:?}", mask.shape(), v(*a).shape()),
                    ));
                }
                v(*a).zip_map(mask, |x, m| x * m)
            }
            Op::ConvTranspose1d {
                x,
                kernel,
                bias,
                stride,
            } => {
                let geo = self.conv_geometry(op, node, *x, *kernel, *bias, *stride)?;
                let data = kernels::conv_transpose_1d(
                    &geo,
                    v(*x).data(),
                    v(*kernel).data(),
                    v(*bias).data(),
                );
                Tensor::new(vec![geo.batch, geo.out_channels, geo.out_len()], data)?
            }
        };
        if !out.is_finite() {
            return Err(AutodiffError::NonFinite { op: op.name(), node });
        }
        Ok(out)
    }

    pub(crate) fn conv_geometry(
        &self,
        op: &Op,
        node: usize,
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
    ) -> Result<ConvGeometry, AutodiffError> {
        let xs = self.nodes[x.0].value.shape();
        let ks = self.nodes[kernel.0].value.shape();
        let bs = self.nodes[bias.0].value.shape();
        let (&[batch, cin, len], &[kin, cout, k], &[bout]) = (xs, ks, bs) else {
            return Err(Self::mismatch(
                op,
                node,
                format!("expected x [b,in,len], kernel [in,out,k], bias [out]; got {xs:?}, {ks:?}, {bs:?}"),
            ));
        };
        if kin != cin || bout != cout {
            return Err(Self::mismatch(
                op,
                node,
                format!("channels disagree: x {xs:?}, kernel {ks:?}, bias {bs:?}"),
            ));
        }
        if stride == 0 || k == 0 || len == 0 {
            return Err(Self::mismatch(op, node, "stride, kernel and length must be positive".into()));
        }
        let geo = ConvGeometry {
            batch,
            in_channels: cin,
            out_channels: cout,
            len,
            kernel: k,
            stride,
        };
        if k > geo.out_len() + 2 * geo.pad() {
            return Err(Self::mismatch(
                op,
                node,
                format!("kernel length {k} exceeds padded output length {}", geo.out_len() + 2 * geo.pad()),
            ));
        }
        Ok(geo)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Replays `graph` with `inputs` bound and returns the value of `root`.
pub fn forward_eval(
    graph: &mut Graph,
    inputs: &[(&str, &Tensor)],
    root: NodeId,
) -> Result<Tensor, AutodiffError> {
    graph.check(root)?;
    graph.replay(inputs)?;
    Ok(graph.value(root).clone())
}
