//! Memorization oracle: a model trained on a single sample must reach high
//! training IoU quickly, which exercises the full forward/backward/update
//! path end to end.

use equilib_core::cells::CellKind;
use equilib_core::equilibrium::GradAlgorithm;
use equilib_core::harness::{evaluate, train, TrainConfig};
use equilib_core::pathfinder::{generate_dataset, PathfinderConfig};

#[test]
fn one_sample_overfits_to_high_iou() {
    let base = std::env::temp_dir().join("equilib_overfit");
    let (train_dir, out_dir) = (base.join("train"), base.join("out"));
    let _ = std::fs::remove_dir_all(&base);
    let cfg = PathfinderConfig {
        image_size: 40,
        target_dashes: 6,
        distractor_dashes: 6,
        n_distractor_contours: 1,
        dash_length_px: 3,
        seed: 4,
        ..Default::default()
    };
    generate_dataset(&cfg, 1, &train_dir).unwrap();

    // 200 parameter updates on the single sample.
    let config = TrainConfig {
        algorithm: GradAlgorithm::Bptt,
        steps: 4,
        horizon: 4,
        lr: 3e-3,
        batch_size: 1,
        epochs: 200,
        lambda: 0.9,
        penalty_weight: 0.0,
        per_step_loss: false,
        train_data: train_dir.clone(),
        test_data: train_dir.clone(),
        out_dir,
        seed: 7,
        cell: CellKind::HGru,
        channels: 6,
        kernel_extent: 5,
        input_extent: 5,
        input_bn: true,
    };
    let outcome = train(&config).unwrap();
    let train_iou = outcome
        .records
        .iter()
        .filter(|r| r.split == "train")
        .map(|r| r.mean_iou)
        .fold(0.0f64, f64::max);
    assert!(
        train_iou >= 0.9,
        "memorization failed: best training IoU {train_iou}"
    );

    // Evaluating the trained checkpoint at the training step count agrees.
    let (model, _) = equilib_core::cells::checkpoint::load_model(&outcome.best_checkpoint).unwrap();
    let ds = equilib_core::pathfinder::load_dataset(&train_dir).unwrap();
    let pairs: Vec<_> = ds.samples.into_iter().map(|s| (s.image, s.mask)).collect();
    let evals = evaluate(&model, &pairs, &[4]).unwrap();
    assert!(evals[0].mean_iou >= 0.9, "checkpoint eval IoU {}", evals[0].mean_iou);
}
