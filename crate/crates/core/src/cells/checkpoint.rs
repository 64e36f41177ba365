//! Model checkpoints: a plain-text manifest plus one binary tensor file per
//! parameter under `params/`, named by the parameter's visit name.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{
    AnyCell, BnParams, Cell, CellKind, ConvLstm, ConvLstmParams, HGru, HGruParams, InputStage,
    Model, Readout, DEFAULT_BN_EPS,
};
use crate::tensor::{read_tensor, write_atomic, write_tensor, Kernel, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint manifest {path}: {reason}")]
    Manifest { path: String, reason: String },
    #[error("checkpoint parameter {name}: {reason}")]
    Param { name: String, reason: String },
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// Manifest fields describing how the checkpointed model was trained.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub cell: CellKind,
    pub channels: usize,
    pub kernel_extent: usize,
    pub steps: usize,
    pub lambda: f64,
}

const MANIFEST_NAME: &str = "checkpoint.txt";
const PARAMS_DIR: &str = "params";

pub fn save_model(dir: &Path, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    let params_dir = dir.join(PARAMS_DIR);
    std::fs::create_dir_all(&params_dir).map_err(|source| CheckpointError::Io {
        context: format!("creating {}", params_dir.display()),
        source,
    })?;

    let mut manifest = String::new();
    manifest.push_str(&format!("cell={}\n", meta.cell.name()));
    manifest.push_str(&format!("channels={}\n", meta.channels));
    manifest.push_str(&format!("kernel_extent={}\n", meta.kernel_extent));
    manifest.push_str(&format!("steps={}\n", meta.steps));
    manifest.push_str(&format!("lambda={}\n", meta.lambda));
    manifest.push_str(&format!("input_bn={}\n", model.input.bn.is_some()));
    manifest.push_str(&format!("input_bn_eps={}\n", model.input.eps));
    if let AnyCell::HGru(h) = &model.cell {
        manifest.push_str(&format!("cell_bn_eps={}\n", h.params.eps));
    }
    manifest.push_str(&format!("readout_bn_eps={}\n", model.readout.eps));
    write_atomic(&dir.join(MANIFEST_NAME), manifest.as_bytes())?;

    let mut err: Option<CheckpointError> = None;
    model.visit_params(&mut |name, t| {
        if err.is_none() {
            if let Err(e) = write_tensor(&params_dir.join(format!("{name}.tsr")), t) {
                err = Some(e.into());
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn load_model(dir: &Path) -> Result<(Model, CheckpointMeta)> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&manifest_path).map_err(|source| CheckpointError::Io {
        context: format!("reading {}", manifest_path.display()),
        source,
    })?;
    let mut fields = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| CheckpointError::Manifest {
            path: manifest_path.display().to_string(),
            reason: format!("line without '=': {line}"),
        })?;
        fields.insert(k.to_string(), v.to_string());
    }
    let get = |key: &str| -> Result<&String> {
        fields.get(key).ok_or_else(|| CheckpointError::Manifest {
            path: manifest_path.display().to_string(),
            reason: format!("missing key {key}"),
        })
    };
    let parse = |key: &str| -> Result<f64> {
        get(key)?.parse().map_err(|_| CheckpointError::Manifest {
            path: manifest_path.display().to_string(),
            reason: format!("key {key} is not a number"),
        })
    };

    let cell_kind = match get("cell")?.as_str() {
        "hgru" => CellKind::HGru,
        "convlstm" => CellKind::ConvLstm,
        other => {
            return Err(CheckpointError::Manifest {
                path: manifest_path.display().to_string(),
                reason: format!("unknown cell kind {other}"),
            })
        }
    };
    let meta = CheckpointMeta {
        cell: cell_kind,
        channels: parse("channels")? as usize,
        kernel_extent: parse("kernel_extent")? as usize,
        steps: parse("steps")? as usize,
        lambda: parse("lambda")?,
    };
    let input_bn = get("input_bn")?.as_str() == "true";
    let input_eps = parse("input_bn_eps").unwrap_or(DEFAULT_BN_EPS);
    let readout_eps = parse("readout_bn_eps").unwrap_or(DEFAULT_BN_EPS);

    let params_dir = dir.join(PARAMS_DIR);
    let load = |name: &str| -> Result<Tensor> {
        read_tensor(&params_dir.join(format!("{name}.tsr"))).map_err(|e| CheckpointError::Param {
            name: name.to_string(),
            reason: e.to_string(),
        })
    };
    let load_kernel = |name: &str| -> Result<Kernel> {
        Kernel::new(load(name)?).map_err(|e| CheckpointError::Param {
            name: name.to_string(),
            reason: e.to_string(),
        })
    };

    let input = InputStage {
        bank: load_kernel("input.bank")?,
        bn: if input_bn {
            Some(BnParams {
                scale: load("input.bn_scale")?,
                bias: load("input.bn_bias")?,
            })
        } else {
            None
        },
        eps: input_eps,
    };

    let cell = match cell_kind {
        CellKind::HGru => AnyCell::HGru(HGru::new(HGruParams {
            u_s: load_kernel("cell.u_s")?,
            u_f: load_kernel("cell.u_f")?,
            w_s: load_kernel("cell.w_s")?,
            w_f: load_kernel("cell.w_f")?,
            alpha: load("cell.alpha")?,
            mu: load("cell.mu")?,
            nu_f: load("cell.nu_f")?,
            omega: load("cell.omega")?,
            bn_s: BnParams {
                scale: load("cell.bn_s_scale")?,
                bias: load("cell.bn_s_bias")?,
            },
            bn_f: BnParams {
                scale: load("cell.bn_f_scale")?,
                bias: load("cell.bn_f_bias")?,
            },
            eps: parse("cell_bn_eps").unwrap_or(DEFAULT_BN_EPS),
        })),
        CellKind::ConvLstm => AnyCell::ConvLstm(ConvLstm::new(ConvLstmParams {
            w_i: load_kernel("cell.w_i")?,
            w_f: load_kernel("cell.w_f")?,
            w_o: load_kernel("cell.w_o")?,
            w_g: load_kernel("cell.w_g")?,
            b_i: load("cell.b_i")?,
            b_f: load("cell.b_f")?,
            b_o: load("cell.b_o")?,
            b_g: load("cell.b_g")?,
        })),
        other => {
            return Err(CheckpointError::Manifest {
                path: manifest_path.display().to_string(),
                reason: format!("cell kind {} is not checkpointable", other.name()),
            })
        }
    };

    let readout = Readout {
        bn: BnParams {
            scale: load("readout.bn_scale")?,
            bias: load("readout.bn_bias")?,
        },
        kernel: load_kernel("readout.kernel")?,
        eps: readout_eps,
    };

    // Cross-check declared sizes against the loaded tensors.
    let model = Model { input, cell, readout };
    let c = model.cell.channels();
    if c != meta.channels {
        return Err(CheckpointError::Manifest {
            path: manifest_path.display().to_string(),
            reason: format!("channels={} but tensors have {c}", meta.channels),
        });
    }
    Ok((model, meta))
}

pub fn checkpoint_dir(root: &Path, label: &str) -> PathBuf {
    root.join(label)
}
