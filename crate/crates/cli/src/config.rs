//! Strict flat key=value config files with `[section]` headers.
//!
//! Every key must be known to the section that declares it; unknown keys are
//! collected and reported as a configuration error, so typos cannot be
//! silently ignored. Values are plain text: numbers, booleans, paths.

use std::collections::BTreeMap;
use std::path::PathBuf;

use equilib_core::cells::CellKind;
use equilib_core::equilibrium::GradAlgorithm;
use equilib_core::harness::TrainConfig;
use equilib_core::pathfinder::PathfinderConfig;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

/// Parsed file: `section.key -> value`, preserving nothing but the pairs.
pub struct RawConfig {
    values: BTreeMap<String, String>,
    consumed: std::cell::RefCell<std::collections::BTreeSet<String>>,
    /// The exact bytes of the file, for hashing.
    pub bytes: Vec<u8>,
}

pub fn parse_file(path: &std::path::Path) -> Result<RawConfig> {
    let bytes = std::fs::read(path)
        .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| ConfigError(format!("{} is not UTF-8", path.display())))?;
    let mut section = String::new();
    let mut values = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            ConfigError(format!("{}:{}: expected key = value", path.display(), lineno + 1))
        })?;
        let key = if section.is_empty() {
            k.trim().to_string()
        } else {
            format!("{section}.{}", k.trim())
        };
        if values.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(ConfigError(format!("duplicate key {key}")));
        }
    }
    Ok(RawConfig {
        values,
        consumed: Default::default(),
        bytes,
    })
}

impl RawConfig {
    fn take(&self, key: &str) -> Option<&String> {
        let v = self.values.get(key);
        if v.is_some() {
            self.consumed.borrow_mut().insert(key.to_string());
        }
        v
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| ConfigError(format!("key {key}: cannot parse {v:?}"))),
        }
    }

    fn required(&self, key: &str) -> Result<&String> {
        self.take(key)
            .ok_or_else(|| ConfigError(format!("missing required key {key}")))
    }

    /// After all sections were read, every present key must have been
    /// consumed.
    pub fn reject_unknown(&self) -> Result<()> {
        let consumed = self.consumed.borrow();
        let unknown: Vec<&String> = self
            .values
            .keys()
            .filter(|k| !consumed.contains(*k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            let list: Vec<String> = unknown.iter().map(|s| s.to_string()).collect();
            Err(ConfigError(format!("unknown keys: {}", list.join(", "))))
        }
    }

    /// The `[pathfinder]` section, defaults filled from the desk profile.
    pub fn pathfinder(&self) -> Result<PathfinderConfig> {
        let d = PathfinderConfig::default();
        Ok(PathfinderConfig {
            image_size: self.parse("pathfinder.image_size", d.image_size)?,
            target_dashes: self.parse("pathfinder.target_dashes", d.target_dashes)?,
            n_distractor_contours: self
                .parse("pathfinder.n_distractor_contours", d.n_distractor_contours)?,
            distractor_dashes: self.parse("pathfinder.distractor_dashes", d.distractor_dashes)?,
            dash_length_px: self.parse("pathfinder.dash_length_px", d.dash_length_px)?,
            gap_length_px: self.parse("pathfinder.gap_length_px", d.gap_length_px)?,
            thickness_px: self.parse("pathfinder.thickness_px", d.thickness_px)?,
            curvature_jitter: self.parse("pathfinder.curvature_jitter", d.curvature_jitter)?,
            marker_radius_px: self.parse("pathfinder.marker_radius_px", d.marker_radius_px)?,
            min_separation_px: self.parse("pathfinder.min_separation_px", d.min_separation_px)?,
            seed: self.parse("pathfinder.seed", d.seed)?,
        })
    }

    /// The `[model]` + `[train]` sections.
    pub fn train(&self) -> Result<TrainConfig> {
        let cell = match self.parse("model.cell", "hgru".to_string())?.as_str() {
            "hgru" => CellKind::HGru,
            "convlstm" => CellKind::ConvLstm,
            other => return Err(ConfigError(format!("model.cell: unknown cell {other}"))),
        };
        let steps: usize = self.parse("train.steps", 6)?;
        let neumann_terms: usize = self.parse("train.neumann_terms", 15)?;
        let neumann_tol: f64 = self.parse("train.neumann_tol", 1e-6)?;
        let lambda: f64 = self.parse("train.lambda", 0.9)?;
        let penalty_weight: f64 = self.parse("train.penalty_weight", 0.0)?;
        let algorithm = match self.parse("train.algorithm", "bptt".to_string())?.as_str() {
            "bptt" => GradAlgorithm::Bptt,
            "tbptt" => GradAlgorithm::Tbptt {
                window: self.parse("train.window", 1usize.max(steps / 2))?,
            },
            "rbp" => GradAlgorithm::Rbp { neumann_terms, neumann_tol },
            "crbp" => GradAlgorithm::Crbp {
                neumann_terms,
                neumann_tol,
                lambda,
                penalty_weight: if penalty_weight == 0.0 { 1.0 } else { penalty_weight },
            },
            other => return Err(ConfigError(format!("train.algorithm: unknown algorithm {other}"))),
        };
        // window/neumann keys may be present but unused by the chosen
        // algorithm; consume them so strictness targets genuine typos.
        let _ = self.take("train.window");
        Ok(TrainConfig {
            algorithm,
            steps,
            horizon: self.parse("train.horizon", steps.max(40))?,
            lr: self.parse("train.lr", 3e-4)?,
            batch_size: self.parse("train.batch_size", 16)?,
            epochs: self.parse("train.epochs", 20)?,
            lambda,
            penalty_weight: match algorithm {
                GradAlgorithm::Bptt | GradAlgorithm::Tbptt { .. } => penalty_weight,
                _ => 0.0,
            },
            per_step_loss: self.parse("train.per_step_loss", false)?,
            train_data: PathBuf::from(self.required("train.train_data")?),
            test_data: PathBuf::from(self.required("train.test_data")?),
            out_dir: PathBuf::from(self.required("train.out")?),
            seed: self.parse("train.seed", 0)?,
            cell,
            channels: self.parse("model.channels", 8)?,
            kernel_extent: self.parse("model.kernel_extent", 5)?,
            input_extent: self.parse("model.input_extent", 5)?,
            input_bn: self.parse("model.input_bn", true)?,
        })
    }

    /// Every resolved key=value pair, for the run manifest.
    pub fn resolved_pairs(&self) -> Vec<(String, String)> {
        self.values
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}
