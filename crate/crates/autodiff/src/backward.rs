//! Numeric reverse pass.

use crate::error::AutodiffError;
use crate::graph::{sigmoid, Graph, NodeId, Op};
use crate::kernels;
use crate::tensor::Tensor;

/// `∂root/∂node` for every differentiable node the root depends on.
#[derive(Clone, Debug)]
pub struct GradientMap {
    grads: Vec<Option<Tensor>>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Removes and returns the gradient of `id`.
    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (NodeId(i), g)))
    }
}

impl Graph {
    pub(crate) fn check_scalar_root(&self, root: NodeId) -> Result<(), AutodiffError> {
        self.check(root)?;
        let v = self.value(root);
        if v.numel() != 1 {
            return Err(AutodiffError::NonScalarRoot {
                node: root.0,
                shape: v.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Reverse-mode gradient of the scalar `root` with respect to every
    /// differentiable node it depends on.
    pub fn backward(&self, root: NodeId) -> Result<GradientMap, AutodiffError> {
        self.check_scalar_root(root)?;
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::ones(self.shape(root)));
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !matches!(self.nodes[i].op, Op::Input(_)) {
                self.vjp(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(GradientMap { grads })
    }

    fn vjp(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), AutodiffError> {
        let node = &self.nodes[i];
        let val = |id: NodeId| &self.nodes[id.0].value;
        let mut emit = |id: NodeId, contrib: Tensor| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => acc.add_assign(&contrib),
                slot => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Input(_) | Op::Const | Op::StepMask(..) => {}
            Op::Add(a, b) => {
                emit(*a, g.clone());
                emit(*b, g.clone());
            }
            Op::Sub(a, b) => {
                emit(*a, g.clone());
                emit(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                emit(*a, g.zip_map(val(*b), |x, y| x * y));
                emit(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::Scale(a, c) => emit(*a, g.map(|x| x * c)),
            Op::AddScalar(a, _) => emit(*a, g.clone()),
            Op::Pow(a, p) => {
                let p = *p;
                emit(*a, g.zip_map(val(*a), |gx, x| gx * p * x.powf(p - 1.0)));
            }
            Op::Sqrt(a) => emit(
                *a,
                g.zip_map(&node.value, |gx, s| if s > 0.0 { gx * 0.5 / s } else { 0.0 }),
            ),
            Op::Log(a) => emit(*a, g.zip_map(val(*a), |gx, x| gx / x)),
            Op::MatMul(a, b) => {
                let (n, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let m = val(*b).shape()[1];
                if self.nodes[a.0].requires_grad {
                    let ga = kernels::matmul_transpose_b(g.data(), val(*b).data(), n, k, m);
                    emit(*a, Tensor::new(vec![n, k], ga)?);
                }
                if self.nodes[b.0].requires_grad {
                    let gb = kernels::matmul_transpose_a(val(*a).data(), g.data(), n, k, m);
                    emit(*b, Tensor::new(vec![k, m], gb)?);
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (val(*a).shape()[0], val(*a).shape()[1]);
                emit(*a, Tensor::new(vec![n, m], kernels::transpose(g.data(), m, n))?);
            }
            Op::SumAll(a) => emit(*a, Tensor::full(val(*a).shape(), g.data()[0])),
            Op::MeanAll(a) => {
                let t = val(*a);
                emit(*a, Tensor::full(t.shape(), g.data()[0] / t.numel() as f64));
            }
            Op::BroadcastScalar(a, _) => emit(*a, Tensor::new(val(*a).shape().to_vec(), vec![g.sum()])?),
            Op::SumRows(a) => {
                let n = val(*a).shape()[0];
                let d = g.data();
                let m = d.len();
                emit(*a, Tensor::from_fn(&[n, m], |i| d[i % m]));
            }
            Op::BroadcastRows(a, _) => {
                let m = val(*a).shape()[0];
                let mut out = vec![0.0; m];
                for row in g.data().chunks(m.max(1)) {
                    for (o, x) in out.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                emit(*a, Tensor::vector(out));
            }
            Op::SumCols(a) => {
                let m = val(*a).shape()[1];
                let d = g.data();
                emit(*a, Tensor::from_fn(&[d.len(), m], |i| d[i / m]));
            }
            Op::BroadcastCols(a, m) => {
                emit(*a, Tensor::vector(g.data().chunks(*m).map(|r| r.iter().sum()).collect()));
            }
            Op::Reshape(a, _) => emit(*a, g.reshaped(val(*a).shape())?),
            Op::Relu(a) => emit(*a, g.zip_map(val(*a), |gx, x| if x > 0.0 { gx } else { 0.0 })),
            Op::LeakyRelu(a, s) => {
                emit(*a, g.zip_map(val(*a), |gx, x| if x > 0.0 { gx } else { s * gx }));
            }
            Op::Sigmoid(a) => emit(
                *a,
                g.zip_map(val(*a), |gx, x| {
                    let s = sigmoid(x);
                    gx * s * (1.0 - s)
                }),
            ),
            Op::Clamp(a, lo, hi) => emit(
                *a,
                g.zip_map(val(*a), |gx, x| if x > *lo && x < *hi { gx } else { 0.0 }),
            ),
            Op::Dropout(a, mask) => emit(*a, g.zip_map(mask, |gx, m| gx * m)),
            Op::ConvTranspose1d {
                x,
                kernel,
                bias,
                stride,
            } => {
                let geo = self.conv_geometry(&node.op, i, *x, *kernel, *bias, *stride)?;
                let (gx, gk, gb) =
                    kernels::conv_transpose_1d_backward(&geo, val(*x).data(), val(*kernel).data(), g.data());
                emit(*x, Tensor::new(val(*x).shape().to_vec(), gx)?);
                emit(*kernel, Tensor::new(val(*kernel).shape().to_vec(), gk)?);
                emit(*bias, Tensor::new(val(*bias).shape().to_vec(), gb)?);
            }
        }
        Ok(())
    }
}
