use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::commands::CliError;

/// Sidecar written next to every output file.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command_line: Vec<String>,
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub wall_time_secs: f64,
    pub outputs: Vec<PathBuf>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

/// JSON document with a pointer to its manifest.
#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    manifest: Option<String>,
    #[serde(flatten)]
    body: &'a T,
}

pub struct Sink {
    started: Instant,
    argv: Vec<String>,
    config_sha256: String,
    seed: Option<u64>,
}

impl Sink {
    pub fn new(argv: &[String], config_bytes: &[u8], seed: Option<u64>) -> Self {
        Self { started: Instant::now(), argv: argv.to_vec(), config_sha256: sha256_hex(config_bytes), seed }
    }

    pub fn json<T: Serialize>(&self, out: Option<&Path>, body: &T) -> Result<(), CliError> {
        let manifest = out.map(|o| manifest_path(o).file_name().unwrap_or_default().to_string_lossy().into_owned());
        let text = serde_json::to_string_pretty(&Stamped { manifest, body })
            .map_err(|e| CliError::Io(format!("serialising output: {e}")))?;
        self.emit(out, format!("{text}\n").as_bytes())
    }

    pub fn csv<T: Serialize>(&self, out: Option<&Path>, rows: &[T]) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r).map_err(|e| CliError::Io(format!("writing CSV: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Io(format!("writing CSV: {e}")))?;
        self.emit(out, &bytes)
    }

    fn emit(&self, out: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
        let Some(path) = out else {
            std::io::stdout().write_all(bytes).map_err(|e| CliError::Io(format!("stdout: {e}")))?;
            return Ok(());
        };
        fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let manifest = RunManifest {
            command_line: self.argv.clone(),
            config_sha256: self.config_sha256.clone(),
            seed: self.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_secs: self.started.elapsed().as_secs_f64(),
            outputs: vec![path.to_path_buf()],
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
        let mp = manifest_path(path);
        fs::write(&mp, text).map_err(|e| CliError::Io(format!("{}: {e}", mp.display())))
    }
}
