//! Gradients built as graph nodes, so they can be differentiated again.

use crate::error::AutodiffError;
use crate::graph::{Graph, NodeId, Op};
use crate::tensor::Tensor;

impl Graph {
    /// Appends nodes computing `∂root/∂wrt` and returns the node holding it.
    ///
    /// The returned node is an ordinary differentiable node: a scalar built
    /// from it (a gradient penalty, say) can be passed to [`Graph::backward`]
    /// to obtain second-order terms with respect to any other input. Every op
    /// between `wrt` and `root` must have a second-order rule; otherwise
    /// [`AutodiffError::NoSecondOrderRule`] names the first offending op and
    /// the graph is left unchanged.
    pub fn input_grad_node(&mut self, root: NodeId, wrt: NodeId) -> Result<NodeId, AutodiffError> {
        self.check_scalar_root(root)?;
        self.check(wrt)?;
        let n = root.0 + 1;

        let mut on_path = vec![false; n];
        if wrt.0 < n {
            on_path[wrt.0] = true;
            for i in wrt.0 + 1..n {
                let op = &self.nodes[i].op;
                on_path[i] = !matches!(op, Op::StepMask(..))
                    && op.inputs().iter().any(|j| on_path[j.0]);
            }
        }
        let mut feeds_root = vec![false; n];
        feeds_root[root.0] = true;
        for i in (0..n).rev() {
            if feeds_root[i] {
                for j in self.nodes[i].op.inputs() {
                    feeds_root[j.0] = true;
                }
            }
        }
        let active: Vec<bool> = (0..n).map(|i| on_path[i] && feeds_root[i]).collect();
        for i in 0..n {
            let op = &self.nodes[i].op;
            if active[i] && i != wrt.0 && !op.has_second_order_rule() {
                return Err(AutodiffError::NoSecondOrderRule {
                    op: op.name(),
                    node: i,
                });
            }
        }

        if wrt.0 >= n || !active[wrt.0] {
            let zeros = Tensor::zeros(self.shape(wrt));
            return self.constant(zeros);
        }

        let mut adjoint: Vec<Option<NodeId>> = vec![None; n];
        let seed = Tensor::ones(self.shape(root));
        adjoint[root.0] = Some(self.constant(seed)?);

        for i in (wrt.0 + 1..n).rev() {
            if !active[i] {
                continue;
            }
            let Some(g) = adjoint[i] else { continue };
            let op = self.nodes[i].op.clone();
            for (input, contrib) in self.symbolic_vjp(&op, g, |j| active[j.0])? {
                adjoint[input.0] = Some(match adjoint[input.0] {
                    Some(acc) => self.add(acc, contrib)?,
                    None => contrib,
                });
            }
        }
        match adjoint[wrt.0] {
            Some(g) => Ok(g),
            None => {
                let zeros = Tensor::zeros(self.shape(wrt));
                self.constant(zeros)
            }
        }
    }

    /// Contributions `(input, adjoint term)` for the inputs selected by `want`.
    fn symbolic_vjp(
        &mut self,
        op: &Op,
        g: NodeId,
        want: impl Fn(NodeId) -> bool,
    ) -> Result<Vec<(NodeId, NodeId)>, AutodiffError> {
        let mut out = Vec::with_capacity(2);
        match op {
            Op::Input(_) | Op::Const | Op::StepMask(..) => {}
            Op::Add(a, b) => {
                if want(*a) {
                    out.push((*a, g));
                }
                if want(*b) {
                    out.push((*b, g));
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    out.push((*a, g));
                }
                if want(*b) {
                    out.push((*b, self.scale(g, -1.0)?));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    out.push((*a, self.mul(g, *b)?));
                }
                if want(*b) {
                    out.push((*b, self.mul(g, *a)?));
                }
            }
            Op::Scale(a, c) => out.push((*a, self.scale(g, *c)?)),
            Op::AddScalar(a, _) => out.push((*a, g)),
            Op::Pow(a, p) => {
                let d = self.pow(*a, p - 1.0)?;
                let d = self.scale(d, *p)?;
                out.push((*a, self.mul(g, d)?));
            }
            Op::Log(a) => {
                let inv = self.pow(*a, -1.0)?;
                out.push((*a, self.mul(g, inv)?));
            }
            Op::MatMul(a, b) => {
                if want(*a) {
                    let bt = self.transpose(*b)?;
                    out.push((*a, self.matmul(g, bt)?));
                }
                if want(*b) {
                    let at = self.transpose(*a)?;
                    out.push((*b, self.matmul(at, g)?));
                }
            }
            Op::Transpose(a) => out.push((*a, self.transpose(g)?)),
            Op::SumAll(a) => {
                let shape = self.shape(*a).to_vec();
                out.push((*a, self.broadcast_scalar(g, &shape)?));
            }
            Op::MeanAll(a) => {
                let shape = self.shape(*a).to_vec();
                let count = self.value(*a).numel() as f64;
                let b = self.broadcast_scalar(g, &shape)?;
                out.push((*a, self.scale(b, 1.0 / count)?));
            }
            Op::BroadcastScalar(a, _) => {
                let shape = self.shape(*a).to_vec();
                let s = self.sum(g)?;
                out.push((*a, self.reshape(s, &shape)?));
            }
            Op::SumRows(a) => {
                let rows = self.shape(*a)[0];
                out.push((*a, self.broadcast_rows(g, rows)?));
            }
            Op::BroadcastRows(a, _) => out.push((*a, self.sum_rows(g)?)),
            Op::SumCols(a) => {
                let cols = self.shape(*a)[1];
                out.push((*a, self.broadcast_cols(g, cols)?));
            }
            Op::BroadcastCols(a, _) => out.push((*a, self.sum_cols(g)?)),
            Op::Reshape(a, _) => {
                let shape = self.shape(*a).to_vec();
                out.push((*a, self.reshape(g, &shape)?));
            }
            Op::Relu(a) => {
                let mask = self.step_mask(*a, 0.0)?;
                out.push((*a, self.mul(g, mask)?));
            }
            Op::LeakyRelu(a, s) => {
                let mask = self.step_mask(*a, *s)?;
                out.push((*a, self.mul(g, mask)?));
            }
            Op::Sqrt(_) | Op::Sigmoid(_) | Op::Clamp(..) | Op::Dropout(..) | Op::ConvTranspose1d { .. } => {
                // Rejected up front by `has_second_order_rule`.
                unreachable!("no second-order rule for {}", op.name())
            }
        }
        Ok(out)
    }
}
