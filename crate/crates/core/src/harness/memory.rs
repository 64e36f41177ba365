//! Measured (not asserted) memory accounting: peak saved-activation bytes
//! during one forward+backward, per algorithm and step count.

use crate::cells::Model;
use crate::equilibrium::GradAlgorithm;
use crate::harness::step::{sample_grads, TrainPlan};
use crate::harness::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct MemoryRow {
    pub algorithm: String,
    pub steps: usize,
    pub peak_nodes: usize,
    pub peak_bytes: usize,
}

impl MemoryRow {
    pub fn csv_header() -> &'static str {
        "algorithm,steps,peak_nodes,peak_bytes"
    }

    pub fn to_csv(&self) -> String {
        format!("{},{},{},{}", self.algorithm, self.steps, self.peak_nodes, self.peak_bytes)
    }
}

/// Run one forward+backward per `(algorithm, steps)` pair on the given
/// sample and report the meter's high-water mark.
pub fn memory_report(
    model: &Model,
    algorithms: &[GradAlgorithm],
    steps_list: &[usize],
    image: &Tensor,
    mask: &Tensor,
) -> Result<Vec<MemoryRow>> {
    let mut rows = Vec::new();
    for &algorithm in algorithms {
        for &steps in steps_list {
            // A truncation window wider than the unroll is clamped.
            let algorithm = match algorithm {
                GradAlgorithm::Tbptt { window } => GradAlgorithm::Tbptt { window: window.min(steps) },
                other => other,
            };
            let plan = TrainPlan {
                algorithm,
                steps,
                per_step_loss: false,
                lambda: 0.9,
                penalty_weight: 0.0,
            };
            let out = sample_grads(model, &plan, image, mask, false)?;
            rows.push(MemoryRow {
                algorithm: algorithm.name().to_string(),
                steps,
                peak_nodes: out.peak_nodes,
                peak_bytes: out.peak_bytes,
            });
        }
    }
    Ok(rows)
}
