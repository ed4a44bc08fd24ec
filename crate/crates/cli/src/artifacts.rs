//! Files written by the commands: metrics CSV, JSON summaries, the encoder
//! sidecar and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use damvp_core::adapt::EpochRecord;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const METRICS_HEADER: [&str; 6] = ["epoch", "split", "loss", "top1", "n_clusters", "seconds"];

/// Write via a temporary sibling and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn metrics_csv(records: &[EpochRecord]) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER)?;
    for r in records {
        w.write_record([
            r.epoch.to_string(),
            r.split.clone(),
            format!("{:.6}", r.loss),
            format!("{:.6}", r.top1),
            r.n_clusters.to_string(),
            format!("{:.3}", r.seconds),
        ])?;
    }
    Ok(w.into_inner()?)
}

/// Hash of a metrics CSV with the wall-clock column left out.
fn metrics_digest(bytes: &[u8]) -> anyhow::Result<String> {
    let mut r = csv::Reader::from_reader(bytes);
    let headers = r.headers()?.clone();
    let keep: Vec<usize> = (0..headers.len()).filter(|&i| &headers[i] != "seconds").collect();
    let mut h = Sha256::new();
    for i in &keep {
        h.update(headers[*i].as_bytes());
        h.update([0x1f]);
    }
    for row in r.records() {
        let row = row?;
        h.update([0x1e]);
        for i in &keep {
            h.update(row[*i].as_bytes());
            h.update([0x1f]);
        }
    }
    Ok(hex(&h.finalize()))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub path: String,
    pub sha256: String,
}

/// Record of one command invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<OutputEntry>,
    pub seed: u64,
    pub encoder_fingerprint: Option<String>,
    pub started_unix: f64,
    pub finished_unix: f64,
    /// Hash over output names and contents, excluding wall-clock fields.
    pub content_hash: String,
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub struct ManifestBuilder {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub seed: u64,
    pub encoder_fingerprint: Option<u64>,
    started: f64,
    outputs: Vec<(PathBuf, String)>,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: serde_json::Value, seed: u64) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config,
            inputs: Vec::new(),
            seed,
            encoder_fingerprint: None,
            started: unix_now(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, s: impl Into<String>) {
        self.inputs.push(s.into());
    }

    /// Register an already written output file.
    pub fn output(&mut self, path: &Path) -> anyhow::Result<()> {
        let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
        let digest = if path.extension().is_some_and(|e| e == "csv") && bytes.starts_with(b"epoch,") {
            metrics_digest(&bytes)?
        } else {
            hex(&Sha256::digest(&bytes))
        };
        self.outputs.push((path.to_path_buf(), digest));
        Ok(())
    }

    pub fn write(self, path: &Path) -> anyhow::Result<RunManifest> {
        let mut named: Vec<(String, &String)> = self
            .outputs
            .iter()
            .map(|(p, d)| (p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()), d))
            .collect();
        named.sort();
        let mut h = Sha256::new();
        for (name, digest) in &named {
            h.update(name.as_bytes());
            h.update([0]);
            h.update(digest.as_bytes());
            h.update([0]);
        }
        let manifest = RunManifest {
            command: self.command,
            config: self.config,
            inputs: self.inputs,
            outputs: self
                .outputs
                .iter()
                .map(|(p, d)| OutputEntry {
                    path: p.display().to_string(),
                    sha256: d.clone(),
                })
                .collect(),
            seed: self.seed,
            encoder_fingerprint: self.encoder_fingerprint.map(|f| format!("{f:016x}")),
            started_unix: self.started,
            finished_unix: unix_now(),
            content_hash: hex(&h.finalize()),
        };
        write_json(path, &manifest)?;
        Ok(manifest)
    }
}

/// Metadata stored next to an encoder weight file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSidecar {
    pub fingerprint: String,
    /// Dataset the encoder was pretrained on.
    pub pretext: String,
    pub tau: Option<f64>,
    pub tau_scale: Option<f64>,
    pub reference: Option<String>,
}

pub fn sidecar_path(encoder: &Path) -> PathBuf {
    let mut s = encoder.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn read_sidecar(path: &Path) -> anyhow::Result<Option<EncoderSidecar>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Some(
        serde_json::from_str(&text).with_context(|| format!("parsing encoder metadata {}", path.display()))?,
    ))
}

/// Sibling path `<path><suffix>`.
pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
