//! Run directories, provenance headers and atomic file writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    Sha256::digest(cfg.canonical_json().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

pub struct RunDir {
    pub root: PathBuf,
    pub hash: String,
    pretty: bool,
}

impl RunDir {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let hash = config_hash(cfg);
        let id = cfg.output.run_id.clone().unwrap_or_else(|| hash[..12].to_string());
        Self { root: cfg.output.dir.join(id), hash, pretty: cfg.output.pretty }
    }

    pub fn path(&self, sub: &str, name: &str) -> PathBuf {
        self.root.join(sub).join(name)
    }

    pub fn header(&self) -> String {
        format!("config_sha256: {}", self.hash)
    }

    /// Writes `bytes` next to the target and renames it into place.
    pub fn write_atomic(&self, path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
        let dir = path.parent().context("output path has no parent")?;
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let name = path.file_name().context("output path has no file name")?.to_string_lossy();
        let tmp = dir.join(format!(".{name}.tmp"));
        {
            let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
        Ok(())
    }

    /// JSON document with the config hash as its first field.
    pub fn write_json<T: Serialize>(&self, path: &Path, kind: &str, body: &T) -> anyhow::Result<()> {
        #[derive(Serialize)]
        struct Envelope<'a, T> {
            config_sha256: &'a str,
            kind: &'a str,
            body: &'a T,
        }
        let env = Envelope { config_sha256: &self.hash, kind, body };
        let mut text = if self.pretty { serde_json::to_string_pretty(&env)? } else { serde_json::to_string(&env)? };
        text.push('\n');
        self.write_atomic(path, text.as_bytes())
    }

    /// CSV with `#` header comments carrying the config hash.
    pub fn write_csv(&self, path: &Path, comments: &[String], header: &str, rows: &[Vec<f64>]) -> anyhow::Result<()> {
        let mut out = format!("# {}\n", self.header());
        for c in comments {
            out.push_str(&format!("# {c}\n"));
        }
        out.push_str(header);
        out.push('\n');
        for r in rows {
            let cells: Vec<String> = r.iter().map(|v| format!("{v:.17e}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        self.write_atomic(path, out.as_bytes())
    }
}
