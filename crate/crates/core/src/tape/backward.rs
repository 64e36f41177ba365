//! Reverse traversal of the tape.
//!
//! Both modes walk node ids downward, which is reverse topological order
//! because an op can only reference already-recorded inputs. Each node's
//! adjoint is complete before it is propagated, so every node is visited at
//! most once per requested backward pass.

use super::kernels;
use super::{Graph, NodeId, Op, PointwiseFn, Result, TapeError};
use crate::tensor::{Tensor, TensorError};

impl Graph {
    /// Mark every node reachable from `output` through input edges,
    /// including `output` itself.
    fn ancestor_mask(&self, outputs: &[NodeId]) -> Vec<bool> {
        let mut mask = vec![false; self.nodes.len()];
        let mut stack: Vec<NodeId> = outputs.to_vec();
        while let Some(id) = stack.pop() {
            if mask[id] {
                continue;
            }
            mask[id] = true;
            stack.extend(self.nodes[id].op.inputs());
        }
        mask
    }

    /// `needs[n]` is true when an adjoint arriving at `n` can still reach a
    /// requested node, i.e. `n` is requested or some input of `n` is needed.
    /// Propagation is pruned below nodes that are not needed.
    fn needs_mask(&self, upto: NodeId, wrt: &[NodeId]) -> Vec<bool> {
        let mut needs = vec![false; upto + 1];
        for &w in wrt {
            if w <= upto {
                needs[w] = true;
            }
        }
        for id in 0..=upto {
            if !needs[id] {
                needs[id] = self.nodes[id].op.inputs().into_iter().any(|i| needs[i]);
            }
        }
        needs
    }

    fn validate_outputs(
        &self,
        outputs: &[NodeId],
        cot_shapes: &[crate::tensor::Shape],
        wrt: &[NodeId],
    ) -> Result<()> {
        for &o in outputs {
            self.check_node(o)?;
        }
        for &w in wrt {
            self.check_node(w)?;
        }
        for (&o, &cs) in outputs.iter().zip(cot_shapes.iter()) {
            let os = self.shape_of(o);
            if os != cs {
                return Err(TapeError::CotangentShape { expected: os, got: cs });
            }
        }
        Ok(())
    }

    /// Vector-Jacobian product `v^T J` of one output with respect to `wrt`
    /// nodes, as plain tensors. Every `wrt` node must be an ancestor of the
    /// output.
    pub fn vjp(&self, output: NodeId, cotangent: &Tensor, wrt: &[NodeId]) -> Result<Vec<Tensor>> {
        self.vjp_multi(&[output], &[cotangent.clone()], wrt)
    }

    /// [`Graph::vjp`] for several outputs seeded at once (e.g. the two state
    /// tensors of a convLSTM step).
    pub fn vjp_multi(
        &self,
        outputs: &[NodeId],
        cotangents: &[Tensor],
        wrt: &[NodeId],
    ) -> Result<Vec<Tensor>> {
        let shapes: Vec<_> = cotangents.iter().map(|c| c.shape()).collect();
        self.validate_outputs(outputs, &shapes, wrt)?;
        let anc = self.ancestor_mask(outputs);
        for &w in wrt {
            if !anc[w] {
                return Err(TapeError::NotAnAncestor { node: w });
            }
        }
        self.backward_values(outputs, cotangents, wrt)
    }

    /// Gradient of a scalar node. Unlike [`Graph::vjp`], nodes the loss does
    /// not depend on get a zero gradient instead of an error, so a constant
    /// loss yields all-zero gradients.
    pub fn grad(&self, loss: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>> {
        self.check_node(loss)?;
        let shape = self.shape_of(loss);
        if !shape.is_scalar() {
            return Err(TapeError::NotScalar { shape });
        }
        for &w in wrt {
            self.check_node(w)?;
        }
        self.backward_values(&[loss], &[Tensor::scalar(1.0)], wrt)
    }

    fn backward_values(
        &self,
        outputs: &[NodeId],
        cotangents: &[Tensor],
        wrt: &[NodeId],
    ) -> Result<Vec<Tensor>> {
        let start = *outputs.iter().max().expect("at least one output");
        let needs = self.needs_mask(start, wrt);
        let mut adjoints: Vec<Option<Tensor>> = vec![None; start + 1];
        for (&o, c) in outputs.iter().zip(cotangents.iter()) {
            accumulate(&mut adjoints, o, c.clone())?;
        }
        // Collected before propagation drops them.
        let mut results: Vec<Option<Tensor>> = vec![None; wrt.len()];
        for id in (0..=start).rev() {
            let adj = match adjoints[id].take() {
                Some(a) => a,
                None => continue,
            };
            for (slot, &w) in results.iter_mut().zip(wrt.iter()) {
                if w == id {
                    *slot = Some(match slot.take() {
                        Some(prev) => prev.add(&adj)?,
                        None => adj.clone(),
                    });
                }
            }
            if !needs[id] {
                continue;
            }
            for (input, contribution) in self.backward_value_op(id, &adj)? {
                if needs[input] {
                    accumulate(&mut adjoints, input, contribution)?;
                }
            }
        }
        let out: Vec<Tensor> = results
            .into_iter()
            .zip(wrt.iter())
            .map(|(r, &w)| r.unwrap_or_else(|| Tensor::zeros(self.shape_of(w).0)))
            .collect();
        for t in &out {
            if !t.is_all_finite() {
                return Err(TensorError::NonFinite { op: "vjp".into() }.into());
            }
        }
        Ok(out)
    }

    fn backward_value_op(&self, id: NodeId, adj: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let node = &self.nodes[id];
        let value = |n: NodeId| &self.nodes[n].value;
        let out = match node.op {
            Op::Leaf | Op::Detach(_) => vec![],
            Op::Add(a, b) => vec![(a, adj.clone()), (b, adj.clone())],
            Op::Sub(a, b) => vec![(a, adj.clone()), (b, adj.scale(-1.0))],
            Op::Mul(a, b) => vec![(a, adj.hadamard(value(b))?), (b, adj.hadamard(value(a))?)],
            Op::Div(a, b) => {
                let vb = value(b);
                let da = Tensor::new(
                    adj.dims(),
                    adj.data().iter().zip(vb.data()).map(|(g, y)| g / y).collect(),
                )?;
                // d/db (a/b) = -(a/b)/b = -value/b
                let db = Tensor::new(
                    adj.dims(),
                    adj.data()
                        .iter()
                        .zip(node.value.data())
                        .zip(vb.data())
                        .map(|((g, v), y)| -g * v / y)
                        .collect(),
                )?;
                vec![(a, da), (b, db)]
            }
            Op::Affine { x, scale, .. } => vec![(x, adj.scale(scale))],
            Op::Sqrt(x) => {
                let dx = Tensor::new(
                    adj.dims(),
                    adj.data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, y)| g / (2.0 * y))
                        .collect(),
                )?;
                vec![(x, dx)]
            }
            Op::Pointwise { x, f } => {
                let xv = value(x);
                let dx = match f {
                    PointwiseFn::Softplus => Tensor::new(
                        adj.dims(),
                        adj.data()
                            .iter()
                            .zip(xv.data())
                            .map(|(g, v)| g * kernels::sigmoid(*v))
                            .collect(),
                    )?,
                    PointwiseFn::Sigmoid => Tensor::new(
                        adj.dims(),
                        adj.data()
                            .iter()
                            .zip(node.value.data())
                            .map(|(g, y)| g * y * (1.0 - y))
                            .collect(),
                    )?,
                    PointwiseFn::Tanh => Tensor::new(
                        adj.dims(),
                        adj.data()
                            .iter()
                            .zip(node.value.data())
                            .map(|(g, y)| g * (1.0 - y * y))
                            .collect(),
                    )?,
                    PointwiseFn::Relu => Tensor::new(
                        adj.dims(),
                        adj.data()
                            .iter()
                            .zip(xv.data())
                            .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                            .collect(),
                    )?,
                };
                vec![(x, dx)]
            }
            Op::Conv2d { x, k } => {
                let kv = value(k);
                let flipped = kernels::flip_transpose(kv);
                let dx = kernels::conv2d(adj, &flipped);
                let dk = kernels::kernel_grad(value(x), adj, kv.dims()[0], kv.dims()[1]);
                vec![(x, dx), (k, dk)]
            }
            Op::FlipTranspose(k) => vec![(k, kernels::flip_transpose(adj))],
            Op::KernelGrad { x, upstream, .. } => {
                let flipped = kernels::flip_transpose(adj);
                let dx = kernels::conv2d(value(upstream), &flipped);
                let dup = kernels::conv2d(value(x), adj);
                vec![(x, dx), (upstream, dup)]
            }
            Op::ChannelSum(x) => vec![(x, kernels::broadcast_channels(adj, value(x).dims()))],
            Op::BroadcastC { v } => vec![(v, kernels::channel_sum(adj))],
            Op::SumAll(x) => vec![(x, kernels::broadcast_all(adj.data()[0], value(x).dims()))],
            Op::BroadcastAll { s } => vec![(s, kernels::sum_all(adj))],
            Op::ConcatC(a, b) => {
                let ca = value(a).dims()[3];
                let ct = node.value.dims()[3];
                vec![
                    (a, kernels::slice_channels(adj, 0, ca)),
                    (b, kernels::slice_channels(adj, ca, ct)),
                ]
            }
            Op::SliceC { x, from, to } => {
                let total = value(x).dims()[3];
                let _ = to;
                vec![(x, kernels::embed_channels(adj, from, total))]
            }
            Op::L2Norm(x) => {
                let norm = node.value.data()[0];
                let g = adj.data()[0];
                let xv = value(x);
                let dx = if norm == 0.0 {
                    Tensor::zeros(xv.dims())
                } else {
                    xv.scale(g / norm)
                };
                vec![(x, dx)]
            }
        };
        Ok(out)
    }

    /// Differentiable vector-Jacobian product: the adjoint computation is
    /// recorded as new nodes, so the returned nodes can be differentiated
    /// again. The cotangent is itself a node.
    pub fn vjp_tracked(
        &mut self,
        output: NodeId,
        cotangent: NodeId,
        wrt: &[NodeId],
    ) -> Result<Vec<NodeId>> {
        self.vjp_tracked_multi(&[output], &[cotangent], wrt)
    }

    pub fn vjp_tracked_multi(
        &mut self,
        outputs: &[NodeId],
        cotangents: &[NodeId],
        wrt: &[NodeId],
    ) -> Result<Vec<NodeId>> {
        for &c in cotangents {
            self.check_node(c)?;
        }
        let shapes: Vec<_> = cotangents.iter().map(|&c| self.shape_of(c)).collect();
        self.validate_outputs(outputs, &shapes, wrt)?;
        let anc = self.ancestor_mask(outputs);
        for &w in wrt {
            if !anc[w] {
                return Err(TapeError::NotAnAncestor { node: w });
            }
        }
        let start = *outputs.iter().max().expect("at least one output");
        let needs = self.needs_mask(start, wrt);
        let mut adjoints: Vec<Option<NodeId>> = vec![None; start + 1];
        for (&o, &c) in outputs.iter().zip(cotangents.iter()) {
            self.accumulate_node(&mut adjoints, o, c)?;
        }
        let mut results: Vec<Option<NodeId>> = vec![None; wrt.len()];
        for id in (0..=start).rev() {
            let adj = match adjoints[id].take() {
                Some(a) => a,
                None => continue,
            };
            for (slot, &w) in results.iter_mut().zip(wrt.iter()) {
                if w == id {
                    *slot = Some(match slot.take() {
                        Some(prev) => self.add(prev, adj)?,
                        None => adj,
                    });
                }
            }
            if !needs[id] {
                continue;
            }
            for (input, contribution) in self.backward_graph_op(id, adj)? {
                if needs[input] {
                    self.accumulate_node(&mut adjoints, input, contribution)?;
                }
            }
        }
        results
            .into_iter()
            .zip(wrt.iter())
            .map(|(r, &w)| match r {
                Some(n) => Ok(n),
                None => {
                    let shape = self.shape_of(w).0;
                    self.leaf(Tensor::zeros(shape))
                }
            })
            .collect()
    }

    fn accumulate_node(
        &mut self,
        adjoints: &mut [Option<NodeId>],
        id: NodeId,
        contribution: NodeId,
    ) -> Result<()> {
        adjoints[id] = Some(match adjoints[id] {
            Some(existing) => self.add(existing, contribution)?,
            None => contribution,
        });
        Ok(())
    }

    fn backward_graph_op(&mut self, id: NodeId, adj: NodeId) -> Result<Vec<(NodeId, NodeId)>> {
        let op = self.nodes[id].op.clone();
        let out = match op {
            Op::Leaf | Op::Detach(_) => vec![],
            Op::Add(a, b) => vec![(a, adj), (b, adj)],
            Op::Sub(a, b) => {
                let nb = self.neg(adj)?;
                vec![(a, adj), (b, nb)]
            }
            Op::Mul(a, b) => {
                let da = self.mul(adj, b)?;
                let db = self.mul(adj, a)?;
                vec![(a, da), (b, db)]
            }
            Op::Div(a, b) => {
                let da = self.div(adj, b)?;
                let ga = self.mul(adj, id)?;
                let gb = self.div(ga, b)?;
                let db = self.neg(gb)?;
                vec![(a, da), (b, db)]
            }
            Op::Affine { x, scale, .. } => {
                let dx = self.affine(adj, scale, 0.0)?;
                vec![(x, dx)]
            }
            Op::Sqrt(x) => {
                let two_y = self.affine(id, 2.0, 0.0)?;
                let dx = self.div(adj, two_y)?;
                vec![(x, dx)]
            }
            Op::Pointwise { x, f } => {
                let dx = match f {
                    PointwiseFn::Softplus => {
                        let s = self.sigmoid(x)?;
                        self.mul(adj, s)?
                    }
                    PointwiseFn::Sigmoid => {
                        let one_minus = self.affine(id, -1.0, 1.0)?;
                        let d = self.mul(id, one_minus)?;
                        self.mul(adj, d)?
                    }
                    PointwiseFn::Tanh => {
                        let sq = self.mul(id, id)?;
                        let d = self.affine(sq, -1.0, 1.0)?;
                        self.mul(adj, d)?
                    }
                    PointwiseFn::Relu => {
                        return Err(TapeError::UnsupportedDoubleBackward { op: "relu" })
                    }
                };
                vec![(x, dx)]
            }
            Op::Conv2d { x, k } => {
                let flipped = self.flip_transpose(k)?;
                let dx = self.conv2d(adj, flipped)?;
                let [kh, kw, _, _] = self.shape_of(k).0;
                let dk = self.kernel_grad(x, adj, kh, kw)?;
                vec![(x, dx), (k, dk)]
            }
            Op::FlipTranspose(k) => {
                let dk = self.flip_transpose(adj)?;
                vec![(k, dk)]
            }
            Op::KernelGrad { x, upstream, .. } => {
                let flipped = self.flip_transpose(adj)?;
                let dx = self.conv2d(upstream, flipped)?;
                let dup = self.conv2d(x, adj)?;
                vec![(x, dx), (upstream, dup)]
            }
            Op::ChannelSum(x) => {
                let like = self.shape_of(x).0;
                let dx = self.broadcast_channels(adj, like)?;
                vec![(x, dx)]
            }
            Op::BroadcastC { v } => {
                let dv = self.channel_sum(adj)?;
                vec![(v, dv)]
            }
            Op::SumAll(x) => {
                let like = self.shape_of(x).0;
                let dx = self.broadcast_all(adj, like)?;
                vec![(x, dx)]
            }
            Op::BroadcastAll { s } => {
                let ds = self.sum_all(adj)?;
                vec![(s, ds)]
            }
            Op::ConcatC(a, b) => {
                let ca = self.shape_of(a).channels();
                let ct = self.shape_of(id).channels();
                let da = self.slice_channels(adj, 0, ca)?;
                let db = self.slice_channels(adj, ca, ct)?;
                vec![(a, da), (b, db)]
            }
            Op::SliceC { x, from, to } => {
                // Embed the adjoint back into the full channel range by
                // concatenating zero blocks around it.
                let [b, h, w, total] = self.shape_of(x).0;
                let mut dx = adj;
                if from > 0 {
                    let zeros = self.leaf(Tensor::zeros([b, h, w, from]))?;
                    dx = self.concat_channels(zeros, dx)?;
                }
                if to < total {
                    let zeros = self.leaf(Tensor::zeros([b, h, w, total - to]))?;
                    dx = self.concat_channels(dx, zeros)?;
                }
                vec![(x, dx)]
            }
            Op::L2Norm(_) => return Err(TapeError::UnsupportedDoubleBackward { op: "l2_norm" }),
        };
        Ok(out)
    }
}

fn accumulate(adjoints: &mut [Option<Tensor>], id: NodeId, contribution: Tensor) -> Result<()> {
    adjoints[id] = Some(match adjoints[id].take() {
        Some(existing) => existing.add(&contribution)?,
        None => contribution,
    });
    Ok(())
}
