//! Run manifest: written into the output directory before any work starts,
//! recording the subcommand, the fully resolved configuration, the hash of
//! the config bytes, the library version and the output paths. The end
//! timestamp is appended on completion.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub struct RunManifest {
    path: PathBuf,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    /// Write the manifest before work begins.
    pub fn begin(
        out_dir: &Path,
        subcommand: &str,
        config_hash: &str,
        resolved: &[(String, String)],
        outputs: &[String],
    ) -> std::io::Result<RunManifest> {
        std::fs::create_dir_all(out_dir)?;
        let mut text = String::new();
        text.push_str(&format!("subcommand={subcommand}\n"));
        text.push_str(&format!("version={}\n", env!("CARGO_PKG_VERSION")));
        text.push_str(&format!("config_hash={config_hash}\n"));
        text.push_str(&format!("started_unix={}\n", unix_now()));
        for (k, v) in resolved {
            text.push_str(&format!("config.{k}={v}\n"));
        }
        for out in outputs {
            text.push_str(&format!("output={out}\n"));
        }
        let path = out_dir.join("run_manifest.txt");
        std::fs::write(&path, text)?;
        Ok(RunManifest { path })
    }

    /// Append the end timestamp after the subcommand finished.
    pub fn finish(self) -> std::io::Result<()> {
        let mut f = std::fs::OpenOptions::new().append(true).open(&self.path)?;
        writeln!(f, "ended_unix={}", unix_now())
    }
}
