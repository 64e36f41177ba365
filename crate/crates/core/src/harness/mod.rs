//! Training, evaluation and diagnostics around the cells and gradient
//! algorithms: the Adam loop, per-epoch metrics, checkpointing, state-space
//! analysis and memory accounting.

pub mod adam;
pub mod analysis;
pub mod evaluate;
pub mod memory;
pub mod step;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use analysis::{ks_two_sample, pooled_channels, state_space_analysis, StateSpaceOutput};
pub use evaluate::{drive, eval_sample, evaluate, EvalDetail, StepEval};
pub use memory::{memory_report, MemoryRow};
pub use step::{sample_grads, SampleOutput, TrainPlan};

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cells::checkpoint::{save_model, CheckpointError, CheckpointMeta};
use crate::cells::{CellKind, Model};
use crate::equilibrium::{EquilibriumError, GradAlgorithm};
use crate::pathfinder::{load_dataset, PathfinderError};
use crate::tape::TapeError;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Pathfinder(#[from] PathfinderError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training diverged at epoch {epoch} ({detail}); last good checkpoint: {last_checkpoint}")]
    Diverged {
        epoch: usize,
        detail: String,
        last_checkpoint: String,
    },
}

impl From<TensorError> for HarnessError {
    fn from(e: TensorError) -> Self {
        HarnessError::Tape(e.into())
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Full training recipe: algorithm, model profile, data locations.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub algorithm: GradAlgorithm,
    /// Recurrent steps N during training.
    pub steps: usize,
    /// Analysis horizon T >= N.
    pub horizon: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Contraction bound, used by penalties and diagnostics.
    pub lambda: f64,
    /// Penalty weight for the contractor BPTT-family variants.
    pub penalty_weight: f64,
    /// Supervise the readout of every step instead of only the last.
    pub per_step_loss: bool,
    pub train_data: PathBuf,
    pub test_data: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub cell: CellKind,
    pub channels: usize,
    pub kernel_extent: usize,
    pub input_extent: usize,
    pub input_bn: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.algorithm.validate()?;
        if self.steps < 1 || self.horizon < self.steps {
            return Err(HarnessError::InvalidConfig(format!(
                "need horizon >= steps >= 1, got steps={}, horizon={}",
                self.steps, self.horizon
            )));
        }
        if self.lr <= 0.0 {
            return Err(HarnessError::InvalidConfig("lr must be > 0".into()));
        }
        if self.batch_size < 1 {
            return Err(HarnessError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(HarnessError::InvalidConfig(format!(
                "lambda must be in [0, 1), got {}",
                self.lambda
            )));
        }
        if matches!(self.algorithm, GradAlgorithm::Rbp { .. }) && self.penalty_weight != 0.0 {
            return Err(HarnessError::InvalidConfig(
                "rbp with a penalty weight is crbp; set algorithm=crbp".into(),
            ));
        }
        Ok(())
    }

    fn plan(&self) -> TrainPlan {
        TrainPlan {
            algorithm: self.algorithm,
            steps: self.steps,
            per_step_loss: self.per_step_loss,
            lambda: self.lambda,
            penalty_weight: self.penalty_weight,
        }
    }
}

/// One row of the per-epoch metrics stream. Wall-clock time is reported
/// separately from the deterministic columns so that metric files stay
/// byte-reproducible.
#[derive(Clone, Debug)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: &'static str,
    pub mean_iou: f64,
    pub mean_loss: f64,
    pub mean_lcp: f64,
    pub peak_bytes: usize,
    pub wall_seconds: f64,
}

impl MetricsRecord {
    pub fn csv_header() -> &'static str {
        "epoch,split,mean_iou,mean_loss,mean_lcp,peak_bytes"
    }

    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.split, self.mean_iou, self.mean_loss, self.mean_lcp, self.peak_bytes
        )
    }
}

pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub max_test_iou: f64,
    pub best_epoch: usize,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

fn io_err(context: String) -> impl FnOnce(std::io::Error) -> HarnessError {
    move |source| HarnessError::Io { context, source }
}

fn dataset_pairs(dir: &Path) -> Result<Vec<(Tensor, Tensor)>> {
    let ds = load_dataset(dir)?;
    if ds.samples.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    Ok(ds.samples.into_iter().map(|s| (s.image, s.mask)).collect())
}

struct MetricsWriter {
    metrics: std::fs::File,
    timing: std::fs::File,
}

impl MetricsWriter {
    fn create(dir: &Path) -> Result<MetricsWriter> {
        std::fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
        let metrics_path = dir.join("metrics.csv");
        let timing_path = dir.join("timing.csv");
        let mut metrics = std::fs::File::create(&metrics_path)
            .map_err(io_err(format!("creating {}", metrics_path.display())))?;
        writeln!(metrics, "{}", MetricsRecord::csv_header())
            .map_err(io_err("writing metrics header".into()))?;
        let mut timing = std::fs::File::create(&timing_path)
            .map_err(io_err(format!("creating {}", timing_path.display())))?;
        writeln!(timing, "epoch,split,wall_seconds").map_err(io_err("writing timing header".into()))?;
        Ok(MetricsWriter { metrics, timing })
    }

    fn append(&mut self, rec: &MetricsRecord) -> Result<()> {
        writeln!(self.metrics, "{}", rec.to_csv()).map_err(io_err("appending metrics row".into()))?;
        writeln!(self.timing, "{},{},{}", rec.epoch, rec.split, rec.wall_seconds)
            .map_err(io_err("appending timing row".into()))?;
        Ok(())
    }
}

/// Train a freshly initialized model per the config. Deterministic for a
/// fixed config: sample order, gradient reduction and parameter updates are
/// all seeded and order-stable.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let train_set = dataset_pairs(&config.train_data)?;
    let test_set = dataset_pairs(&config.test_data)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::init(
        config.cell,
        config.channels,
        config.kernel_extent,
        config.input_extent,
        &mut rng,
    );
    if !config.input_bn {
        model.input.bn = None;
    }

    let ckpt_root = config.out_dir.join("checkpoints");
    let meta = CheckpointMeta {
        cell: config.cell,
        channels: config.channels,
        kernel_extent: config.kernel_extent,
        steps: config.steps,
        lambda: config.lambda,
    };
    let mut writer = MetricsWriter::create(&config.out_dir)?;

    let param_order: Vec<String> = {
        let mut names = Vec::new();
        model.visit_params(&mut |n, _| names.push(n.to_string()));
        names
    };

    let plan = config.plan();
    let mut adam = AdamState::new();
    let mut records = Vec::new();
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut last_checkpoint = String::from("<none>");
    let best_dir = ckpt_root.join("best");

    for epoch in 1..=config.epochs {
        let epoch_start = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut epoch_rng =
            ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut epoch_rng);

        let mut sums = EpochSums::default();
        for batch in order.chunks(config.batch_size) {
            let outputs: Vec<Result<SampleOutput>> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &idx)| {
                    let (image, mask) = &train_set[idx];
                    // The penalty value is free for contractor runs; other
                    // algorithms measure it on the batch's first sample.
                    sample_grads(&model, &plan, image, mask, k == 0)
                })
                .collect();

            let mut mean: HashMap<String, Tensor> = HashMap::new();
            let count = batch.len() as f64;
            for out in outputs {
                let out = out.map_err(|e| HarnessError::Diverged {
                    epoch,
                    detail: e.to_string(),
                    last_checkpoint: last_checkpoint.clone(),
                })?;
                for name in &param_order {
                    if let Some(g) = out.grads.get(name) {
                        let scaled = g.scale(1.0 / count);
                        match mean.remove(name) {
                            Some(acc) => {
                                mean.insert(name.clone(), acc.add(&scaled)?);
                            }
                            None => {
                                mean.insert(name.clone(), scaled);
                            }
                        }
                    }
                }
                sums.absorb(&out);
            }
            adam_step(&mut model, &mean, &mut adam, config.lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS);
        }

        if sums.neumann_failures > 0 {
            log::warn!(
                "epoch {epoch}: neumann adjoint hit its term budget on {} of {} samples",
                sums.neumann_failures,
                train_set.len()
            );
        }

        let train_wall = epoch_start.elapsed().as_secs_f64();
        let train_row = MetricsRecord {
            epoch,
            split: "train",
            mean_iou: sums.iou / sums.count as f64,
            mean_loss: sums.loss / sums.count as f64,
            mean_lcp: sums.mean_lcp(),
            peak_bytes: sums.peak_bytes,
            wall_seconds: train_wall,
        };
        writer.append(&train_row)?;
        records.push(train_row);

        let eval_start = Instant::now();
        let details: Vec<Result<EvalDetail>> = test_set
            .par_iter()
            .map(|(image, mask)| eval_sample(&model, image, mask, config.steps, config.lambda))
            .collect();
        let mut test_sums = (0.0, 0.0, 0.0);
        for d in details {
            let d = d?;
            test_sums.0 += d.iou;
            test_sums.1 += d.loss;
            test_sums.2 += d.lcp;
        }
        let n_test = test_set.len() as f64;
        let test_row = MetricsRecord {
            epoch,
            split: "test",
            mean_iou: test_sums.0 / n_test,
            mean_loss: test_sums.1 / n_test,
            mean_lcp: test_sums.2 / n_test,
            peak_bytes: sums.peak_bytes,
            wall_seconds: eval_start.elapsed().as_secs_f64(),
        };
        let test_iou = test_row.mean_iou;
        writer.append(&test_row)?;
        records.push(test_row);

        let epoch_dir = ckpt_root.join(format!("epoch_{epoch:03}"));
        save_model(&epoch_dir, &model, &meta)?;
        last_checkpoint = epoch_dir.display().to_string();
        if test_iou > best.1 {
            best = (epoch, test_iou);
            save_model(&best_dir, &model, &meta)?;
        }
        log::info!(
            "epoch {epoch}: train iou {:.4} loss {:.4} | test iou {:.4} loss {:.4}",
            records[records.len() - 2].mean_iou,
            records[records.len() - 2].mean_loss,
            test_iou,
            test_sums.1 / n_test,
        );
    }

    let final_dir = ckpt_root.join("final");
    save_model(&final_dir, &model, &meta)?;
    if config.epochs == 0 {
        save_model(&best_dir, &model, &meta)?;
    }
    Ok(TrainOutcome {
        records,
        max_test_iou: if best.1.is_finite() { best.1 } else { 0.0 },
        best_epoch: best.0,
        final_checkpoint: final_dir,
        best_checkpoint: best_dir,
    })
}

#[derive(Default)]
struct EpochSums {
    count: usize,
    loss: f64,
    iou: f64,
    lcp_sum: f64,
    lcp_count: usize,
    peak_bytes: usize,
    neumann_failures: usize,
}

impl EpochSums {
    fn absorb(&mut self, out: &SampleOutput) {
        self.count += 1;
        self.loss += out.loss;
        self.iou += out.iou;
        if let Some(v) = out.lcp {
            self.lcp_sum += v;
            self.lcp_count += 1;
        }
        self.peak_bytes = self.peak_bytes.max(out.peak_bytes);
        if let Some(n) = out.neumann {
            if !n.converged {
                self.neumann_failures += 1;
            }
        }
    }

    fn mean_lcp(&self) -> f64 {
        if self.lcp_count == 0 {
            f64::NAN
        } else {
            self.lcp_sum / self.lcp_count as f64
        }
    }
}
