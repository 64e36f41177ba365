//! Small diagnostic cells with closed-form dynamics. They drive the gradient
//! oracles: a linear map over channels has an explicit Jacobian, so
//! fixed-point gradients can be checked against dense linear algebra.

use super::{BoundStep, Cell, CellKind};
use crate::tape::{Graph, NodeId, Result};
use crate::tensor::{Kernel, Tensor};

/// `F(h) = W h + x` with `W` a dense channel-mixing matrix, realized as a
/// 1x1 convolution. The Jacobian at every point is `W`.
#[derive(Clone, Debug)]
pub struct DenseLinearCell {
    w: Kernel,
}

impl DenseLinearCell {
    /// Build from the math-convention matrix: `y_o = sum_i m[o][i] h_i`.
    pub fn from_matrix(m: &[Vec<f64>]) -> DenseLinearCell {
        let c = m.len();
        let mut data = vec![0.0; c * c];
        for (o, row) in m.iter().enumerate() {
            assert_eq!(row.len(), c, "matrix must be square");
            for (i, &v) in row.iter().enumerate() {
                data[i * c + o] = v;
            }
        }
        DenseLinearCell {
            w: Kernel::from_vec([1, 1, c, c], data).expect("1x1 kernel"),
        }
    }

    pub fn diagonal(diag: &[f64]) -> DenseLinearCell {
        let c = diag.len();
        let m: Vec<Vec<f64>> = (0..c)
            .map(|o| (0..c).map(|i| if i == o { diag[o] } else { 0.0 }).collect())
            .collect();
        DenseLinearCell::from_matrix(&m)
    }

    pub fn scalar(a: f64) -> DenseLinearCell {
        DenseLinearCell::diagonal(&[a])
    }

    /// The matrix back in math convention.
    pub fn matrix(&self) -> Vec<Vec<f64>> {
        let c = self.w.in_channels();
        let data = self.w.as_tensor().data();
        (0..c)
            .map(|o| (0..c).map(|i| data[i * c + o]).collect())
            .collect()
    }
}

struct BoundLinear {
    w: NodeId,
    params: Vec<(String, NodeId)>,
}

impl Cell for DenseLinearCell {
    fn kind(&self) -> CellKind {
        CellKind::Linear
    }

    fn channels(&self) -> usize {
        self.w.in_channels()
    }

    fn bind(&self, g: &mut Graph) -> Result<Box<dyn BoundStep>> {
        let w = g.kernel_leaf(&self.w)?;
        Ok(Box::new(BoundLinear {
            w,
            params: vec![("cell.w".to_string(), w)],
        }))
    }

    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("cell.w", self.w.as_tensor());
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let mut t = self.w.as_tensor().clone();
        f("cell.w", &mut t);
        self.w = Kernel::new(t).expect("1x1 kernel unchanged");
    }
}

impl BoundStep for BoundLinear {
    fn step(&self, g: &mut Graph, x: NodeId, state: &[NodeId]) -> Result<Vec<NodeId>> {
        let wh = g.conv2d(state[0], self.w)?;
        Ok(vec![g.add(wh, x)?])
    }

    fn params(&self) -> &[(String, NodeId)] {
        &self.params
    }
}

/// `F(h) = h`; every point is a fixed point.
#[derive(Clone, Copy, Debug)]
pub struct IdentityCell {
    pub channels: usize,
}

struct BoundIdentity;

impl Cell for IdentityCell {
    fn kind(&self) -> CellKind {
        CellKind::Identity
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn bind(&self, _g: &mut Graph) -> Result<Box<dyn BoundStep>> {
        Ok(Box::new(BoundIdentity))
    }

    fn visit_params(&self, _f: &mut dyn FnMut(&str, &Tensor)) {}

    fn visit_params_mut(&mut self, _f: &mut dyn FnMut(&str, &mut Tensor)) {}
}

impl BoundStep for BoundIdentity {
    fn step(&self, g: &mut Graph, _x: NodeId, state: &[NodeId]) -> Result<Vec<NodeId>> {
        Ok(vec![g.affine(state[0], 1.0, 0.0)?])
    }

    fn params(&self) -> &[(String, NodeId)] {
        &[]
    }
}
