//! Reverse-mode differentiation that records its own work on the tape.
//!
//! `grad` walks the tape backwards from a scalar output and, for every node on
//! a path to one of the requested inputs, records the vector-Jacobian product
//! of its op as new tape nodes. The returned gradients are therefore ordinary
//! nodes: they can feed further computation and be differentiated again,
//! which is what losses containing input-gradients need.

use crate::error::{AutodiffError, Result};
use crate::tape::{NodeId, Op, Tape};
use crate::tensor::Tensor;

impl Tape {
    /// Gradients of the scalar `output` with respect to each node in `wrt`.
    ///
    /// A `wrt` node that `output` does not depend on gets a fresh zero leaf of
    /// its own shape.
    pub fn grad(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        let out_shape = self.shape(output)?;
        if !out_shape.is_scalar() {
            return Err(AutodiffError::NonScalarOutput(out_shape));
        }
        for w in wrt {
            self.node(*w)?;
        }
        let end = output.0 + 1;
        let Some(start) = wrt.iter().map(|w| w.0).min() else {
            return Ok(vec![]);
        };

        // Nodes that lie downstream of some `wrt` node; only these need adjoints.
        let mut relevant = vec![false; end.max(start)];
        for w in wrt {
            if w.0 < end {
                relevant[w.0] = true;
            }
        }
        for i in start..end {
            if relevant[i] {
                continue;
            }
            let op = &self.nodes()[i].op;
            if op.is_constant_derivative() {
                continue;
            }
            relevant[i] = op.parents().iter().any(|p| p.0 >= start && relevant[p.0]);
        }

        let mut adjoint: Vec<Option<NodeId>> = vec![None; end.max(start)];
        if output.0 >= start && relevant[output.0] {
            adjoint[output.0] = Some(self.scalar(1.0));
        }

        for i in (start..end).rev() {
            let Some(g) = adjoint[i] else { continue };
            let op = self.nodes()[i].op.clone();
            if matches!(op, Op::Leaf) || op.is_constant_derivative() {
                continue;
            }
            let contributions = self.vjp(NodeId(i), &op, g, &relevant)?;
            for (parent, contrib) in contributions {
                adjoint[parent.0] = Some(match adjoint[parent.0] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib)?,
                });
            }
        }

        wrt.iter()
            .map(|w| match adjoint.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let s = self.shape(*w)?;
                    Ok(self.leaf(Tensor::zeros(s.rows, s.cols)))
                }
            })
            .collect()
    }

    /// Hessian-vector product `(∂²output/∂x²)·v`, built by differentiating
    /// `⟨∂output/∂x, v⟩` a second time.
    pub fn hvp(&mut self, output: NodeId, x: NodeId, v: &Tensor) -> Result<NodeId> {
        let xs = self.shape(x)?;
        if xs.len() != v.len() {
            return Err(AutodiffError::DimensionMismatch { expected: xs.len(), got: v.len() });
        }
        let v = Tensor::new(xs.rows, xs.cols, v.data().to_vec())?;
        let g = self.grad(output, &[x])?[0];
        let v = self.leaf(v);
        let gv = self.dot(g, v)?;
        Ok(self.grad(gv, &[x])?[0])
    }

    /// Per-op vector-Jacobian products for the parents that need an adjoint.
    fn vjp(
        &mut self,
        y: NodeId,
        op: &Op,
        g: NodeId,
        relevant: &[bool],
    ) -> Result<Vec<(NodeId, NodeId)>> {
        let want = |id: NodeId| relevant.get(id.0).copied().unwrap_or(false);
        let mut out = Vec::with_capacity(2);
        match *op {
            Op::Leaf | Op::StepMask(..) | Op::SignMask(..) => {}
            Op::Add(a, b) => {
                if want(a) {
                    out.push((a, g));
                }
                if want(b) {
                    out.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    out.push((a, g));
                }
                if want(b) {
                    out.push((b, self.neg(g)?));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    out.push((a, self.mul(g, b)?));
                }
                if want(b) {
                    out.push((b, self.mul(g, a)?));
                }
            }
            Op::Div(a, b) => {
                if want(a) {
                    out.push((a, self.div(g, b)?));
                }
                if want(b) {
                    // -g·(a/b)/b
                    let gy = self.mul(g, y)?;
                    let q = self.div(gy, b)?;
                    out.push((b, self.neg(q)?));
                }
            }
            Op::Neg(a) => {
                if want(a) {
                    out.push((a, self.neg(g)?));
                }
            }
            Op::Scale(a, c) => {
                if want(a) {
                    out.push((a, self.scale(g, c)?));
                }
            }
            Op::AddConst(a, _) => {
                if want(a) {
                    out.push((a, g));
                }
            }
            Op::MulScalar(a, s) => {
                if want(a) {
                    out.push((a, self.mul_scalar(g, s)?));
                }
                if want(s) {
                    out.push((s, self.dot(g, a)?));
                }
            }
            Op::AddRow(a, b) => {
                if want(a) {
                    out.push((a, g));
                }
                if want(b) {
                    out.push((b, self.sum_rows(g)?));
                }
            }
            Op::MatMul { a, b, trans_a, trans_b } => {
                // y = op(a)·op(b); each case writes the adjoint in the stored layout.
                if want(a) {
                    let da = match (trans_a, trans_b) {
                        (false, false) => self.matmul_t(g, b, false, true)?,
                        (false, true) => self.matmul_t(g, b, false, false)?,
                        (true, false) => self.matmul_t(b, g, false, true)?,
                        (true, true) => self.matmul_t(b, g, true, true)?,
                    };
                    out.push((a, da));
                }
                if want(b) {
                    let db = match (trans_a, trans_b) {
                        (false, false) => self.matmul_t(a, g, true, false)?,
                        (false, true) => self.matmul_t(g, a, true, false)?,
                        (true, false) => self.matmul_t(a, g, false, false)?,
                        (true, true) => self.matmul_t(g, a, true, true)?,
                    };
                    out.push((b, db));
                }
            }
            Op::Relu(a) => {
                if want(a) {
                    let m = self.step_mask(a, 0.0)?;
                    out.push((a, self.mul(g, m)?));
                }
            }
            Op::LeakyRelu(a, slope) => {
                if want(a) {
                    let m = self.step_mask(a, slope)?;
                    out.push((a, self.mul(g, m)?));
                }
            }
            Op::Tanh(a) => {
                if want(a) {
                    let y2 = self.mul(y, y)?;
                    let d = self.scale(y2, -1.0)?;
                    let d = self.add_const(d, 1.0)?;
                    out.push((a, self.mul(g, d)?));
                }
            }
            Op::Sigmoid(a) => {
                if want(a) {
                    let one_minus = self.scale(y, -1.0)?;
                    let one_minus = self.add_const(one_minus, 1.0)?;
                    let d = self.mul(y, one_minus)?;
                    out.push((a, self.mul(g, d)?));
                }
            }
            Op::Exp(a) => {
                if want(a) {
                    out.push((a, self.mul(g, y)?));
                }
            }
            Op::Log(a) => {
                if want(a) {
                    out.push((a, self.div(g, a)?));
                }
            }
            Op::Sin(a) => {
                if want(a) {
                    let c = self.cos(a)?;
                    out.push((a, self.mul(g, c)?));
                }
            }
            Op::Cos(a) => {
                if want(a) {
                    let s = self.sin(a)?;
                    let gs = self.mul(g, s)?;
                    out.push((a, self.neg(gs)?));
                }
            }
            Op::Sqrt(a) => {
                if want(a) {
                    let half = self.scale(g, 0.5)?;
                    out.push((a, self.div(half, y)?));
                }
            }
            Op::Abs(a) => {
                if want(a) {
                    let s = self.sign_mask(a)?;
                    out.push((a, self.mul(g, s)?));
                }
            }
            Op::Sum(a) => {
                if want(a) {
                    let s = self.shape(a)?;
                    out.push((a, self.broadcast_scalar(g, s)?));
                }
            }
            Op::SumRows(a) => {
                if want(a) {
                    let r = self.shape(a)?.rows;
                    out.push((a, self.broadcast_rows(g, r)?));
                }
            }
            Op::SumCols(a) => {
                if want(a) {
                    let c = self.shape(a)?.cols;
                    out.push((a, self.broadcast_cols(g, c)?));
                }
            }
            Op::BroadcastScalar(a, _) => {
                if want(a) {
                    out.push((a, self.sum(g)?));
                }
            }
            Op::BroadcastRows(a, _) => {
                if want(a) {
                    out.push((a, self.sum_rows(g)?));
                }
            }
            Op::BroadcastCols(a, _) => {
                if want(a) {
                    out.push((a, self.sum_cols(g)?));
                }
            }
            Op::Dot(a, b) => {
                if want(a) {
                    out.push((a, self.mul_scalar(b, g)?));
                }
                if want(b) {
                    out.push((b, self.mul_scalar(a, g)?));
                }
            }
            Op::LogSumExpRows(a) => {
                if want(a) {
                    // softmax(a) = exp(a - lse), expressed through y so it stays differentiable
                    let c = self.shape(a)?.cols;
                    let lse = self.broadcast_cols(y, c)?;
                    let shifted = self.sub(a, lse)?;
                    let p = self.exp(shifted)?;
                    let gb = self.broadcast_cols(g, c)?;
                    out.push((a, self.mul(gb, p)?));
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(a)?.cols;
                if want(a) {
                    out.push((a, self.slice_cols(g, 0, ca)?));
                }
                if want(b) {
                    let cb = self.shape(b)?.cols;
                    out.push((b, self.slice_cols(g, ca, cb)?));
                }
            }
            Op::SliceCols { input, start, .. } => {
                if want(input) {
                    let total = self.shape(input)?.cols;
                    out.push((input, self.pad_cols(g, start, total)?));
                }
            }
            Op::PadCols { input, start, .. } => {
                if want(input) {
                    let len = self.shape(input)?.cols;
                    out.push((input, self.slice_cols(g, start, len)?));
                }
            }
        }
        Ok(out)
    }
}
