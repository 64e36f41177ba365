//! Per-sample gradient computation for every algorithm.
//!
//! BPTT/TBPTT record the whole unroll on one tape. RBP/C-RBP run the
//! forward pass untracked (per-step scratch graphs that share the sample's
//! meter), then record a single tracked step at the final iterate and invoke
//! the implicit backward pass. Either way, parameter gradients come back
//! keyed by name, with the sample's loss, IoU and penalty telemetry.

use std::collections::HashMap;

use crate::cells::{Cell, Model};
use crate::equilibrium::{
    crbp_grads_at, forward_unroll, lcp_penalty_at, lcp_value, rbp_grads_at, unroll_tracked,
    CrbpCfg, GradAlgorithm, ImplicitCfg, LossBuild, NeumannOutcome,
};
use crate::harness::{HarnessError, Result};
use crate::pathfinder::{binarize_logits, iou};
use crate::tape::{Graph, Meter};
use crate::tensor::Tensor;

/// Everything `sample_grads` needs to know about the training recipe.
#[derive(Clone, Copy, Debug)]
pub struct TrainPlan {
    pub algorithm: GradAlgorithm,
    pub steps: usize,
    /// Average the loss over every step's readout instead of only the last.
    pub per_step_loss: bool,
    /// Contraction bound used for penalties and diagnostics.
    pub lambda: f64,
    /// Weight of the penalty added to the task loss for the BPTT-family
    /// contractor variants; RBP carries its penalty inside the algorithm.
    pub penalty_weight: f64,
}

pub struct SampleOutput {
    pub grads: HashMap<String, Tensor>,
    pub loss: f64,
    pub iou: f64,
    /// Penalty value when it was computed for this sample.
    pub lcp: Option<f64>,
    pub neumann: Option<NeumannOutcome>,
    pub peak_bytes: usize,
    pub peak_nodes: usize,
}

/// Forward + backward for one image/mask pair.
///
/// `with_lcp_diagnostic` forces the penalty value to be measured (one extra
/// plain VJP) even for algorithms that do not train with it.
pub fn sample_grads(
    model: &Model,
    plan: &TrainPlan,
    image: &Tensor,
    mask: &Tensor,
    with_lcp_diagnostic: bool,
) -> Result<SampleOutput> {
    plan.algorithm.validate()?;
    if plan.steps < 1 {
        return Err(HarnessError::InvalidConfig("steps must be >= 1".into()));
    }
    match plan.algorithm {
        GradAlgorithm::Bptt => unrolled_grads(model, plan, None, image, mask, with_lcp_diagnostic),
        GradAlgorithm::Tbptt { window } => {
            unrolled_grads(model, plan, Some(window), image, mask, with_lcp_diagnostic)
        }
        GradAlgorithm::Rbp { neumann_terms, neumann_tol } => implicit_grads(
            model,
            plan,
            ImplicitCfg { neumann_terms, neumann_tol },
            None,
            image,
            mask,
            with_lcp_diagnostic,
        ),
        GradAlgorithm::Crbp { neumann_terms, neumann_tol, lambda, penalty_weight } => {
            implicit_grads(
                model,
                plan,
                ImplicitCfg { neumann_terms, neumann_tol },
                Some((lambda, penalty_weight)),
                image,
                mask,
                with_lcp_diagnostic,
            )
        }
    }
}

fn unrolled_grads(
    model: &Model,
    plan: &TrainPlan,
    window: Option<usize>,
    image: &Tensor,
    mask: &Tensor,
    with_lcp_diagnostic: bool,
) -> Result<SampleOutput> {
    let meter = Meter::new();
    let mut g = Graph::with_meter(meter.clone());
    let img = g.leaf(image.clone())?;
    let (x, input_params) = model.input.build(&mut g, img)?;
    let h0 = model.cell.zero_state(g.shape_of(x).0);
    let run = unroll_tracked(&mut g, &model.cell, x, &h0, plan.steps, window)?;
    let readout = model.readout.bind(&mut g)?;
    let mask_leaf = g.leaf(mask.clone())?;

    let logits_final = readout.apply(&mut g, run.final_state()[0])?;
    let task = if plan.per_step_loss {
        let mut acc = g.bce_with_logits_mean(logits_final, mask_leaf)?;
        for state in run.states.iter().take(run.states.len() - 1) {
            let logits = readout.apply(&mut g, state[0])?;
            let step_loss = g.bce_with_logits_mean(logits, mask_leaf)?;
            acc = g.add(acc, step_loss)?;
        }
        g.affine(acc, 1.0 / run.states.len() as f64, 0.0)?
    } else {
        g.bce_with_logits_mean(logits_final, mask_leaf)?
    };
    let loss_value = g.value(task).item()?;

    // Contractor variant: penalty at the final iterate, one extra step to
    // expose the Jacobian there. Its gradient flows through the whole
    // unroll, since the evaluation point itself depends on the parameters.
    let mut lcp = None;
    let mut total = task;
    if plan.penalty_weight != 0.0 {
        let probe = run.bound.step(&mut g, x, run.final_state())?;
        let pen = lcp_penalty_at(&mut g, &probe, run.final_state(), plan.lambda)?;
        lcp = Some(g.value(pen).item()?);
        let weighted = g.affine(pen, plan.penalty_weight, 0.0)?;
        total = g.add(task, weighted)?;
    }

    let mut names: Vec<String> = Vec::new();
    let mut ids: Vec<crate::tape::NodeId> = Vec::new();
    for (n, id) in input_params
        .iter()
        .chain(run.params.iter())
        .chain(readout.params.iter())
    {
        names.push(n.clone());
        ids.push(*id);
    }
    let grad_tensors = g.grad(total, &ids)?;
    let iou_value = iou(&binarize_logits(g.value(logits_final)), mask)?;

    if lcp.is_none() && with_lcp_diagnostic {
        let x_val = g.value(x).clone();
        let h_final: Vec<Tensor> = run
            .final_state()
            .iter()
            .map(|&n| g.value(n).clone())
            .collect();
        lcp = Some(lcp_value(&model.cell, &x_val, &h_final, plan.lambda)?);
    }

    Ok(SampleOutput {
        grads: names.into_iter().zip(grad_tensors).collect(),
        loss: loss_value,
        iou: iou_value,
        lcp,
        neumann: None,
        peak_bytes: meter.peak_bytes(),
        peak_nodes: meter.peak_nodes(),
    })
}

fn implicit_grads(
    model: &Model,
    plan: &TrainPlan,
    cfg: ImplicitCfg,
    penalty: Option<(f64, f64)>,
    image: &Tensor,
    mask: &Tensor,
    with_lcp_diagnostic: bool,
) -> Result<SampleOutput> {
    let meter = Meter::new();
    let mut g = Graph::with_meter(meter.clone());
    let img = g.leaf(image.clone())?;
    let (x, input_params) = model.input.build(&mut g, img)?;
    let x_val = g.value(x).clone();
    let h0 = model.cell.zero_state(g.shape_of(x).0);

    // Untracked forward: the tracked step below is step `plan.steps`.
    let h_star = if plan.steps > 1 {
        forward_unroll(
            &model.cell,
            &x_val,
            &h0,
            plan.steps - 1,
            false,
            Some(meter.clone()),
        )?
        .state
    } else {
        h0
    };

    let readout = &model.readout;
    let mut logits_val: Option<Tensor> = None;
    let mut loss_build = |g: &mut Graph, state: &[crate::tape::NodeId]| {
        let bound = readout.bind(g)?;
        let logits = bound.apply(g, state[0])?;
        logits_val = Some(g.value(logits).clone());
        let mask_leaf = g.leaf(mask.clone())?;
        let loss = g.bce_with_logits_mean(logits, mask_leaf)?;
        Ok(LossBuild { loss, params: bound.params })
    };

    let out = match penalty {
        None => rbp_grads_at(&mut g, &model.cell, x, &h_star, &mut loss_build, &input_params, &cfg)?,
        Some((lambda, penalty_weight)) => crbp_grads_at(
            &mut g,
            &model.cell,
            x,
            &h_star,
            &mut loss_build,
            &input_params,
            &CrbpCfg { implicit: cfg, lambda, penalty_weight },
        )?,
    };

    let logits_val = logits_val.expect("loss builder ran");
    let iou_value = iou(&binarize_logits(&logits_val), mask)?;
    let mut lcp = out.penalty;
    if lcp.is_none() && with_lcp_diagnostic {
        lcp = Some(lcp_value(&model.cell, &x_val, &h_star, plan.lambda)?);
    }

    Ok(SampleOutput {
        grads: out.grads.into_iter().collect(),
        loss: out.loss,
        iou: iou_value,
        lcp,
        neumann: Some(out.neumann),
        peak_bytes: meter.peak_bytes(),
        peak_nodes: meter.peak_nodes(),
    })
}
