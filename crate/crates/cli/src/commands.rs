//! Subcommand implementations and the exit-code mapping.

use std::io::Write;
use std::path::Path;

use equilib_core::cells::checkpoint::load_model;
use equilib_core::cells::{CellKind, Model};
use equilib_core::equilibrium::{EquilibriumError, GradAlgorithm};
use equilib_core::gradcheck::{self, CheckRow};
use equilib_core::harness::{
    self, drive, evaluate, memory_report, state_space_analysis, HarnessError,
};
use equilib_core::pathfinder::{self, PathfinderError};
use equilib_core::tape::TapeError;
use equilib_core::tensor::TensorError;

use crate::config::{self, ConfigError};
use crate::manifest::{sha256_hex, RunManifest};

pub struct CliError {
    pub code: i32,
    pub message: String,
}

pub type Result<T> = std::result::Result<T, CliError>;

fn err(code: i32, message: impl Into<String>) -> CliError {
    CliError { code, message: message.into() }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        err(2, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        err(3, e.to_string())
    }
}

fn tensor_code(e: &TensorError) -> i32 {
    match e {
        TensorError::Io { .. } | TensorError::BadFile { .. } => 3,
        TensorError::NonFinite { .. } => 4,
        _ => 2,
    }
}

fn tape_code(e: &TapeError) -> i32 {
    match e {
        TapeError::Tensor(t) => tensor_code(t),
        TapeError::UnsupportedDoubleBackward { .. } => 4,
        _ => 2,
    }
}

impl From<PathfinderError> for CliError {
    fn from(e: PathfinderError) -> Self {
        let code = match &e {
            PathfinderError::Infeasible(_) | PathfinderError::PlacementFailed { .. } => 2,
            PathfinderError::Io { .. } | PathfinderError::BadManifest { .. } => 3,
            PathfinderError::Tensor(t) => tensor_code(t),
        };
        err(code, e.to_string())
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        let code = match &e {
            HarnessError::InvalidConfig(_) | HarnessError::EmptyDataset => 2,
            HarnessError::Io { .. } | HarnessError::Checkpoint(_) => 3,
            HarnessError::Diverged { .. } => 4,
            HarnessError::Tape(t) => tape_code(t),
            HarnessError::Equilibrium(eq) => match eq {
                EquilibriumError::InvalidConfig(_) | EquilibriumError::WindowOutOfRange { .. } => 2,
                EquilibriumError::Tape(t) => tape_code(t),
                _ => 4,
            },
            HarnessError::Pathfinder(p) => match p {
                PathfinderError::Infeasible(_) | PathfinderError::PlacementFailed { .. } => 2,
                PathfinderError::Io { .. } | PathfinderError::BadManifest { .. } => 3,
                PathfinderError::Tensor(t) => tensor_code(t),
            },
        };
        err(code, e.to_string())
    }
}

impl From<equilib_core::cells::checkpoint::CheckpointError> for CliError {
    fn from(e: equilib_core::cells::checkpoint::CheckpointError) -> Self {
        err(3, e.to_string())
    }
}

impl From<EquilibriumError> for CliError {
    fn from(e: EquilibriumError) -> Self {
        let code = match &e {
            EquilibriumError::InvalidConfig(_) | EquilibriumError::WindowOutOfRange { .. } => 2,
            EquilibriumError::Tape(t) => tape_code(t),
            _ => 4,
        };
        err(code, e.to_string())
    }
}

impl From<TapeError> for CliError {
    fn from(e: TapeError) -> Self {
        err(tape_code(&e), e.to_string())
    }
}

/// Refuse to clobber a previous run unless forced.
fn guard_out_dir(out: &Path, force: bool) -> Result<()> {
    if !force && out.join("run_manifest.txt").exists() {
        return Err(err(
            3,
            format!(
                "{} already holds a run (run_manifest.txt exists); pass --force to overwrite",
                out.display()
            ),
        ));
    }
    std::fs::create_dir_all(out)?;
    Ok(())
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::with_capacity(rows.len() * 32 + header.len() + 1);
    text.push_str(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    equilib_core::tensor::write_atomic(path, text.as_bytes())
        .map_err(|e| err(3, e.to_string()))?;
    Ok(())
}

pub fn generate(
    config_path: Option<&Path>,
    n: usize,
    out: &Path,
    seed: Option<u64>,
    force: bool,
) -> Result<()> {
    let (mut cfg, hash, resolved) = match config_path {
        Some(p) => {
            let raw = config::parse_file(p)?;
            let cfg = raw.pathfinder()?;
            raw.reject_unknown()?;
            (cfg, sha256_hex(&raw.bytes), raw.resolved_pairs())
        }
        None => (pathfinder::PathfinderConfig::default(), sha256_hex(b""), vec![]),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    guard_out_dir(out, force)?;
    let manifest = RunManifest::begin(
        out,
        "generate",
        &hash,
        &resolved,
        &[format!("{}", out.join("manifest.jsonl").display())],
    )?;
    let ds = pathfinder::generate_dataset(&cfg, n, out)?;
    println!(
        "generated {} samples into {} (config hash {})",
        ds.n_samples,
        out.display(),
        ds.config_hash
    );
    manifest.finish()?;
    Ok(())
}

pub fn train(config_path: &Path, force: bool) -> Result<()> {
    let raw = config::parse_file(config_path)?;
    let cfg = raw.train()?;
    raw.reject_unknown()?;
    cfg.validate()?;
    guard_out_dir(&cfg.out_dir, force)?;
    let manifest = RunManifest::begin(
        &cfg.out_dir,
        "train",
        &sha256_hex(&raw.bytes),
        &raw.resolved_pairs(),
        &[
            format!("{}", cfg.out_dir.join("metrics.csv").display()),
            format!("{}", cfg.out_dir.join("checkpoints").display()),
        ],
    )?;
    let outcome = harness::train(&cfg)?;
    println!(
        "trained {} epochs; max test IoU {:.4} at epoch {}; final checkpoint {}",
        cfg.epochs,
        outcome.max_test_iou,
        outcome.best_epoch,
        outcome.final_checkpoint.display()
    );
    manifest.finish()?;
    Ok(())
}

fn parse_steps_arg(arg: &str) -> Result<Vec<usize>> {
    let arg = arg.trim();
    if let Some((a, b)) = arg.split_once("..") {
        let lo: usize = a
            .trim()
            .parse()
            .map_err(|_| err(2, format!("bad step range start {a:?}")))?;
        let hi: usize = b
            .trim()
            .parse()
            .map_err(|_| err(2, format!("bad step range end {b:?}")))?;
        if lo < 1 || hi < lo {
            return Err(err(2, format!("step range {arg:?} must satisfy 1 <= A <= B")));
        }
        Ok((lo..=hi).collect())
    } else {
        arg.split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| err(2, format!("bad step value {s:?}")))
            })
            .collect()
    }
}

fn load_pairs(data: &Path) -> Result<Vec<(equilib_core::Tensor, equilib_core::Tensor)>> {
    let ds = pathfinder::load_dataset(data)?;
    Ok(ds.samples.into_iter().map(|s| (s.image, s.mask)).collect())
}

pub fn eval(ckpt: &Path, data: &Path, steps: &str, out: &Path, force: bool) -> Result<()> {
    let steps = parse_steps_arg(steps)?;
    let (model, _meta) = load_model(ckpt)?;
    let pairs = load_pairs(data)?;
    guard_out_dir(out, force)?;
    let manifest = RunManifest::begin(
        out,
        "eval",
        &sha256_hex(format!("{} {} {:?}", ckpt.display(), data.display(), steps).as_bytes()),
        &[],
        &[format!("{}", out.join("per_step_iou.csv").display())],
    )?;
    let evals = evaluate(&model, &pairs, &steps)?;
    let rows: Vec<String> = evals
        .iter()
        .map(|e| format!("{},{}", e.step, e.mean_iou))
        .collect();
    write_csv(&out.join("per_step_iou.csv"), "step,mean_iou", &rows)?;
    for e in &evals {
        println!("step {:>3}: mean IoU {:.4}", e.step, e.mean_iou);
    }
    manifest.finish()?;
    Ok(())
}

pub fn analyze(
    ckpt: &Path,
    data: &Path,
    n: usize,
    t: usize,
    out: &Path,
    png: bool,
    force: bool,
) -> Result<()> {
    let (model, _meta) = load_model(ckpt)?;
    let pairs = load_pairs(data)?;
    guard_out_dir(out, force)?;
    let manifest = RunManifest::begin(
        out,
        "analyze",
        &sha256_hex(format!("{} {} N={n} T={t}", ckpt.display(), data.display()).as_bytes()),
        &[],
        &[
            format!("{}", out.join("projections.csv").display()),
            format!("{}", out.join("distances.csv").display()),
        ],
    )?;
    let drives: Vec<equilib_core::Tensor> = pairs
        .iter()
        .map(|(image, _)| drive(&model, image))
        .collect::<harness::Result<_>>()?;
    let analysis = state_space_analysis(&model.cell, &drives, n, t)?;
    if analysis.rank_warning {
        eprintln!(
            "warning: covariance was rank-deficient, projected onto {} component(s)",
            analysis.components_used
        );
    }
    let proj_rows: Vec<String> = analysis
        .projections
        .iter()
        .map(|p| format!("{},{},{},{}", p.image, p.step, p.pc1, p.pc2))
        .collect();
    write_csv(&out.join("projections.csv"), "image,step,pc1,pc2", &proj_rows)?;
    let dist_rows: Vec<String> = analysis
        .distances
        .iter()
        .enumerate()
        .map(|(i, d)| format!("{i},{d}"))
        .collect();
    write_csv(&out.join("distances.csv"), "image,distance", &dist_rows)?;
    if png {
        harness::analysis::write_scatter_png(&out.join("state_space.png"), &analysis, n)?;
    }
    let mut sorted = analysis.distances.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    println!(
        "analyzed {} images; median d(h_{n}, h_{t}) = {median:.6}",
        pairs.len()
    );
    manifest.finish()?;
    Ok(())
}

pub fn gradcheck(suite_name: &str, out: &Path, force: bool) -> Result<()> {
    let suite = match suite_name {
        "linear" => gradcheck::suite_linear(),
        "hgru" => gradcheck::suite_hgru(),
        "lcp" => gradcheck::suite_lcp(),
        other => return Err(err(2, format!("unknown gradcheck suite {other:?}; use linear, hgru or lcp"))),
    }?;
    guard_out_dir(out, force)?;
    let manifest = RunManifest::begin(
        out,
        "gradcheck",
        &sha256_hex(suite_name.as_bytes()),
        &[],
        &[format!("{}", out.join("gradcheck.csv").display())],
    )?;
    let rows: Vec<String> = suite.rows.iter().map(CheckRow::to_csv).collect();
    write_csv(&out.join("gradcheck.csv"), CheckRow::csv_header(), &rows)?;
    let max = suite.max_rel_err();
    println!(
        "suite {}: {} coordinates, max rel err {:.3e} (tolerance {:.0e})",
        suite.name,
        suite.rows.len(),
        max,
        suite.tolerance
    );
    manifest.finish()?;
    if !suite.passed() {
        return Err(err(
            4,
            format!("gradient check failed: max rel err {max:.3e} exceeds {:.0e}", suite.tolerance),
        ));
    }
    Ok(())
}

pub fn memreport(algorithms: &str, steps: &str, out: &Path, force: bool) -> Result<()> {
    let steps = parse_steps_arg(steps)?;
    let algorithms: Vec<GradAlgorithm> = algorithms
        .split(',')
        .map(|name| match name.trim() {
            "bptt" => Ok(GradAlgorithm::Bptt),
            "tbptt" => Ok(GradAlgorithm::Tbptt { window: 3 }),
            "rbp" => Ok(GradAlgorithm::Rbp { neumann_terms: 15, neumann_tol: 1e-6 }),
            "crbp" => Ok(GradAlgorithm::Crbp {
                neumann_terms: 15,
                neumann_tol: 1e-6,
                lambda: 0.9,
                penalty_weight: 1.0,
            }),
            other => Err(err(2, format!("unknown algorithm {other:?}"))),
        })
        .collect::<Result<_>>()?;
    guard_out_dir(out, force)?;
    let manifest = RunManifest::begin(
        out,
        "memreport",
        &sha256_hex(format!("{algorithms:?} {steps:?}").as_bytes()),
        &[],
        &[format!("{}", out.join("memory.csv").display())],
    )?;

    // Desk-profile model and a fixed sample.
    let mut rng = equilib_core::seeded_rng(0);
    let model = Model::init(CellKind::HGru, 8, 5, 5, &mut rng);
    let sample = pathfinder::generate_sample(&pathfinder::PathfinderConfig::default(), 0)?;
    let rows = memory_report(&model, &algorithms, &steps, &sample.image, &sample.mask)?;
    let csv_rows: Vec<String> = rows.iter().map(|r| r.to_csv()).collect();
    write_csv(&out.join("memory.csv"), equilib_core::harness::MemoryRow::csv_header(), &csv_rows)?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{}", equilib_core::harness::MemoryRow::csv_header())?;
    for r in &csv_rows {
        writeln!(stdout, "{r}")?;
    }
    manifest.finish()?;
    Ok(())
}
