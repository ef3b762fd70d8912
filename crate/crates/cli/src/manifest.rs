use std::fs;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

/// Provenance of one command invocation. Timestamps live only here, so
/// every other artifact is reproducible byte for byte.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub tool_version: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outputs_digest: Option<String>,
    pub started_at: String,
    pub finished_at: Option<String>,
}

pub fn hash_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Digest over the manifest and every data file it lists, in listed order.
pub fn hash_corpus(dir: &Path) -> anyhow::Result<String> {
    let m = slmt::corpus::load_manifest(dir)?;
    let mut h = Sha256::new();
    h.update(fs::read(dir.join("manifest.json"))?);
    for e in &m.files {
        for f in [&e.src_file, &e.tgt_file] {
            h.update(fs::read(dir.join(f)).with_context(|| format!("reading {f}"))?);
        }
    }
    Ok(hex::encode(h.finalize()))
}

impl RunManifest {
    pub fn start(command: &str, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_digest: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            outputs_digest: None,
            started_at: chrono::Utc::now().to_rfc3339(),
            finished_at: None,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> anyhow::Result<()> {
        self.inputs.push(InputFile {
            path: path.display().to_string(),
            sha256: hash_file(path)?,
        });
        Ok(())
    }

    pub fn finish(mut self, path: &Path) -> anyhow::Result<()> {
        self.finished_at = Some(chrono::Utc::now().to_rfc3339());
        let text = serde_json::to_string_pretty(&self)? + "\n";
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}
