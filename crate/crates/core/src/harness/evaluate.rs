//! Model evaluation: IoU at one step or along a step range (for the
//! per-step performance curves), plus per-sample loss and penalty telemetry.

use rayon::prelude::*;

use crate::cells::{Cell, Model};
use crate::equilibrium::{forward_unroll, lcp_value};
use crate::harness::{HarnessError, Result};
use crate::pathfinder::{binarize_logits, iou};
use crate::tape::Graph;
use crate::tensor::Tensor;

/// Drive tensor produced by the model's input stage for one image.
pub fn drive(model: &Model, image: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let img = g.leaf(image.clone())?;
    let (x, _) = model.input.build(&mut g, img)?;
    Ok(g.value(x).clone())
}

fn readout_logits(model: &Model, h: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let hn = g.leaf(h.clone())?;
    let (logits, _) = model.readout.build(&mut g, hn)?;
    Ok(g.value(logits).clone())
}

fn bce_value(logits: &Tensor, mask: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.leaf(logits.clone())?;
    let m = g.leaf(mask.clone())?;
    let loss = g.bce_with_logits_mean(l, m)?;
    Ok(g.value(loss).item()?)
}

/// Loss, IoU and penalty of one sample evaluated after `steps` transitions.
pub struct EvalDetail {
    pub loss: f64,
    pub iou: f64,
    pub lcp: f64,
}

pub fn eval_sample(
    model: &Model,
    image: &Tensor,
    mask: &Tensor,
    steps: usize,
    lambda: f64,
) -> Result<EvalDetail> {
    let x = drive(model, image)?;
    let h0 = model.cell.zero_state(x.dims());
    let run = forward_unroll(&model.cell, &x, &h0, steps, false, None)?;
    let logits = readout_logits(model, &run.state[0])?;
    Ok(EvalDetail {
        loss: bce_value(&logits, mask)?,
        iou: iou(&binarize_logits(&logits), mask)?,
        lcp: lcp_value(&model.cell, &x, &run.state, lambda)?,
    })
}

/// Mean IoU at one requested step count.
#[derive(Clone, Copy, Debug)]
pub struct StepEval {
    pub step: usize,
    pub mean_iou: f64,
}

/// Mean IoU of the model at each requested step, over a dataset. Images are
/// evaluated in parallel; the reduction order is fixed by sample index.
pub fn evaluate(
    model: &Model,
    samples: &[(Tensor, Tensor)],
    steps: &[usize],
) -> Result<Vec<StepEval>> {
    if samples.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    if steps.is_empty() || steps.iter().any(|&s| s == 0) {
        return Err(HarnessError::InvalidConfig(
            "evaluation steps must be a non-empty list of values >= 1".into(),
        ));
    }
    let max_step = *steps.iter().max().expect("non-empty");
    let per_sample: Vec<Result<Vec<f64>>> = samples
        .par_iter()
        .map(|(image, mask)| {
            let x = drive(model, image)?;
            let h0 = model.cell.zero_state(x.dims());
            let run = forward_unroll(&model.cell, &x, &h0, max_step, true, None)?;
            let traj = run.trajectory.expect("retained");
            steps
                .iter()
                .map(|&t| {
                    let logits = readout_logits(model, &traj[t][0])?;
                    iou(&binarize_logits(&logits), mask).map_err(Into::into)
                })
                .collect()
        })
        .collect();

    let mut sums = vec![0.0; steps.len()];
    for row in per_sample {
        for (acc, v) in sums.iter_mut().zip(row?) {
            *acc += v;
        }
    }
    Ok(steps
        .iter()
        .zip(sums)
        .map(|(&step, sum)| StepEval {
            step,
            mean_iou: sum / samples.len() as f64,
        })
        .collect())
}
