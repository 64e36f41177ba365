//! Harness-level behavior: memory accounting law, training smoke tests,
//! evaluation edge cases, state-space drift, and reproducibility.

use equilib_core::cells::{Cell, CellKind, IdentityCell, Model};
use equilib_core::equilibrium::GradAlgorithm;
use equilib_core::harness::{
    evaluate, memory_report, sample_grads, state_space_analysis, train, HarnessError, TrainConfig,
    TrainPlan,
};
use equilib_core::pathfinder::{generate_dataset, PathfinderConfig};
use equilib_core::tensor::{Kernel, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

fn tiny_model(seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Model::init(CellKind::HGru, 4, 3, 3, &mut rng)
}

fn tiny_sample(size: usize, seed: u64) -> (Tensor, Tensor) {
    let cfg = PathfinderConfig {
        image_size: size,
        target_dashes: 5,
        distractor_dashes: 5,
        n_distractor_contours: 1,
        dash_length_px: 3,
        ..Default::default()
    };
    let s = equilib_core::pathfinder::generate_sample(&cfg, seed).unwrap();
    (s.image, s.mask)
}

#[test]
fn memory_law_bptt_linear_rbp_constant() {
    let model = tiny_model(3);
    let (image, mask) = tiny_sample(32, 1);
    let algorithms = [
        GradAlgorithm::Bptt,
        GradAlgorithm::Crbp {
            neumann_terms: 15,
            neumann_tol: 1e-6,
            lambda: 0.9,
            penalty_weight: 1.0,
        },
    ];
    let rows = memory_report(&model, &algorithms, &[20, 40, 80], &image, &mask).unwrap();
    let bytes = |alg: &str, n: usize| {
        rows.iter()
            .find(|r| r.algorithm == alg && r.steps == n)
            .map(|r| r.peak_bytes as f64)
            .unwrap()
    };
    let bptt_ratio = bytes("bptt", 40) / bytes("bptt", 20);
    assert!(
        (1.8..=2.2).contains(&bptt_ratio),
        "bptt 40/20 saved-bytes ratio {bptt_ratio}"
    );
    let crbp_ratio = bytes("crbp", 80) / bytes("crbp", 20);
    assert!(
        (0.95..=1.05).contains(&crbp_ratio),
        "crbp 80/20 saved-bytes ratio {crbp_ratio}"
    );
}

#[test]
fn memory_at_one_step_is_comparable_between_bptt_and_rbp() {
    let model = tiny_model(4);
    let (image, mask) = tiny_sample(32, 2);
    let rows = memory_report(
        &model,
        &[GradAlgorithm::Bptt, GradAlgorithm::Rbp { neumann_terms: 15, neumann_tol: 1e-6 }],
        &[1],
        &image,
        &mask,
    )
    .unwrap();
    let bptt = rows[0].peak_bytes as f64;
    let rbp = rows[1].peak_bytes as f64;
    // Within one step's worth of activations of each other: the same graph
    // except for bookkeeping around the tracked step.
    let ratio = rbp / bptt;
    assert!((0.5..=2.0).contains(&ratio), "one-step ratio {ratio}");
}

#[test]
fn zero_logit_model_scores_zero_iou_and_empty_dataset_errors() {
    let mut model = tiny_model(5);
    // Kill the readout: a zero kernel makes every logit 0, which binarizes
    // to an empty prediction.
    model.readout.kernel = Kernel::from_vec([1, 1, 4, 1], vec![0.0; 4]).unwrap();
    let (image, mask) = tiny_sample(32, 3);
    assert!(mask.data().iter().any(|&v| v > 0.0));
    let evals = evaluate(&model, &[(image, mask)], &[1, 3]).unwrap();
    assert_eq!(evals[0].mean_iou, 0.0);
    assert_eq!(evals[1].mean_iou, 0.0);

    match evaluate(&model, &[], &[1]) {
        Err(HarnessError::EmptyDataset) => {}
        other => panic!("expected EmptyDataset, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn state_space_distances_vanish_for_a_fixed_point_cell() {
    let cell = IdentityCell { channels: 3 };
    let drives: Vec<Tensor> = (0..4)
        .map(|i| Tensor::randn([1, 4, 4, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(i)))
        .collect();
    let out = state_space_analysis(&cell, &drives, 3, 10).unwrap();
    for d in &out.distances {
        assert_eq!(*d, 0.0);
    }
    // The identity cell keeps h at zero here, so the covariance is rank
    // deficient and the fallback must engage rather than error.
    assert!(out.components_used >= 1);
}

fn write_tiny_dataset(dir: &PathBuf, seed: u64, n: usize) {
    let _ = std::fs::remove_dir_all(dir);
    let cfg = PathfinderConfig {
        image_size: 32,
        target_dashes: 5,
        distractor_dashes: 5,
        n_distractor_contours: 1,
        dash_length_px: 3,
        seed,
        ..Default::default()
    };
    generate_dataset(&cfg, n, dir).unwrap();
}

fn tiny_train_config(out: &PathBuf, train: &PathBuf, test: &PathBuf) -> TrainConfig {
    TrainConfig {
        algorithm: GradAlgorithm::Bptt,
        steps: 2,
        horizon: 4,
        lr: 3e-4,
        batch_size: 2,
        epochs: 2,
        lambda: 0.9,
        penalty_weight: 0.0,
        per_step_loss: false,
        train_data: train.clone(),
        test_data: test.clone(),
        out_dir: out.clone(),
        seed: 11,
        cell: CellKind::HGru,
        channels: 3,
        kernel_extent: 3,
        input_extent: 3,
        input_bn: true,
    }
}

#[test]
fn zero_epochs_yields_initialized_checkpoint_and_no_metric_rows() {
    let base = std::env::temp_dir().join("equilib_train_zero");
    let (train_dir, test_dir, out_dir) =
        (base.join("train"), base.join("test"), base.join("out"));
    write_tiny_dataset(&train_dir, 0, 2);
    write_tiny_dataset(&test_dir, 100, 2);
    let _ = std::fs::remove_dir_all(&out_dir);
    let mut cfg = tiny_train_config(&out_dir, &train_dir, &test_dir);
    cfg.epochs = 0;
    let outcome = train(&cfg).unwrap();
    assert!(outcome.records.is_empty());
    assert!(outcome.final_checkpoint.join("checkpoint.txt").exists());
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1, "header only");
    // The initialized checkpoint loads back.
    let (model, meta) = equilib_core::cells::checkpoint::load_model(&outcome.final_checkpoint).unwrap();
    assert_eq!(meta.channels, 3);
    assert_eq!(model.cell.channels(), 3);
}

#[test]
fn training_runs_are_reproducible_byte_for_byte() {
    let base = std::env::temp_dir().join("equilib_train_repro");
    let (train_dir, test_dir) = (base.join("train"), base.join("test"));
    write_tiny_dataset(&train_dir, 0, 4);
    write_tiny_dataset(&test_dir, 100, 2);

    let run = |label: &str| {
        let out_dir = base.join(label);
        let _ = std::fs::remove_dir_all(&out_dir);
        let cfg = tiny_train_config(&out_dir, &train_dir, &test_dir);
        train(&cfg).unwrap();
        let metrics = std::fs::read(out_dir.join("metrics.csv")).unwrap();
        let ckpt = std::fs::read(
            out_dir.join("checkpoints/final/params/cell.w_s.tsr"),
        )
        .unwrap();
        (metrics, ckpt)
    };
    let (m1, c1) = run("a");
    let (m2, c2) = run("b");
    assert_eq!(m1, m2, "metric streams must be byte-identical");
    assert_eq!(c1, c2, "checkpoints must be byte-identical");
}

#[test]
fn per_algorithm_smoke_gradients_are_finite_and_nonzero() {
    let model = tiny_model(6);
    let (image, mask) = tiny_sample(32, 4);
    for algorithm in [
        GradAlgorithm::Bptt,
        GradAlgorithm::Tbptt { window: 2 },
        GradAlgorithm::Rbp { neumann_terms: 10, neumann_tol: 1e-6 },
        GradAlgorithm::Crbp { neumann_terms: 10, neumann_tol: 1e-6, lambda: 0.9, penalty_weight: 1.0 },
    ] {
        let plan = TrainPlan {
            algorithm,
            steps: 3,
            per_step_loss: false,
            lambda: 0.9,
            penalty_weight: 0.0,
        };
        let out = sample_grads(&model, &plan, &image, &mask, true).unwrap();
        assert!(out.loss.is_finite());
        assert!(out.lcp.is_some());
        let wsg = &out.grads["cell.w_s"];
        assert!(wsg.data().iter().all(|v| v.is_finite()));
        assert!(wsg.max_abs() > 0.0, "{}: w_s gradient all zero", algorithm.name());
        let inb = &out.grads["input.bank"];
        assert!(inb.max_abs() > 0.0, "{}: input gradient all zero", algorithm.name());
    }
}

#[test]
fn per_step_loss_changes_gradients_but_not_shapes() {
    let model = tiny_model(7);
    let (image, mask) = tiny_sample(32, 5);
    let base = TrainPlan {
        algorithm: GradAlgorithm::Bptt,
        steps: 3,
        per_step_loss: false,
        lambda: 0.9,
        penalty_weight: 0.0,
    };
    let per_step = TrainPlan { per_step_loss: true, ..base };
    let a = sample_grads(&model, &base, &image, &mask, false).unwrap();
    let b = sample_grads(&model, &per_step, &image, &mask, false).unwrap();
    let ga = &a.grads["cell.w_f"];
    let gb = &b.grads["cell.w_f"];
    assert_eq!(ga.dims(), gb.dims());
    assert!(ga.sub(gb).unwrap().max_abs() > 0.0);
}

#[test]
fn rbp_with_penalty_weight_is_rejected_as_misconfigured() {
    let base = std::env::temp_dir().join("equilib_train_reject");
    let cfg = TrainConfig {
        algorithm: GradAlgorithm::Rbp { neumann_terms: 5, neumann_tol: 1e-6 },
        penalty_weight: 1.0,
        ..tiny_train_config(&base.join("out"), &base.join("train"), &base.join("test"))
    };
    assert!(matches!(cfg.validate(), Err(HarnessError::InvalidConfig(_))));
}
