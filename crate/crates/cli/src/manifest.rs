//! `run_manifest.json`: the resolved config, seeds, and sha256 of every
//! file a run read or wrote. Passing it back as `--config` replays the run.

use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::commands::RunRecord;
use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const MANIFEST_NAME: &str = "run_manifest.json";

#[derive(Serialize)]
struct FileHash {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Seeds {
    corpus: u64,
    train: u64,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool_version: &'static str,
    command: &'a str,
    resolved_config: &'a ExperimentConfig,
    seeds: Seeds,
    inputs: Vec<FileHash>,
    artifacts: Vec<FileHash>,
}

fn hash_file(path: &Path, base: Option<&Path>) -> Result<FileHash, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let shown = base.and_then(|b| path.strip_prefix(b).ok()).unwrap_or(path);
    Ok(FileHash { path: shown.display().to_string(), sha256: hex::encode(Sha256::digest(&bytes)) })
}

pub fn write(out: &Path, command: &str, cfg: &ExperimentConfig, run: &RunRecord) -> Result<(), CliError> {
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        command,
        resolved_config: cfg,
        seeds: Seeds { corpus: cfg.corpus.seed, train: cfg.train.seed },
        inputs: run.inputs.iter().map(|p| hash_file(p, None)).collect::<Result<_, _>>()?,
        artifacts: run.artifacts.iter().map(|p| hash_file(p, Some(out))).collect::<Result<_, _>>()?,
    };
    let path = out.join(MANIFEST_NAME);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}
