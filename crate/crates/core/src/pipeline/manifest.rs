//! The run manifest: one JSON document that records everything a generation
//! run produced and everything needed to reproduce it (config snapshot, plan,
//! prompts, seeds, per-pass sharing traces, artifact paths, metric values).
//!
//! All artifact paths are relative to the run directory, so a run can be
//! archived or moved wholesale. The manifest is written last and atomically:
//! a directory containing `manifest.json` is a complete run.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::SharingMode;
use crate::backend::TraceEntry;
use crate::eval::MetricRecord;
use crate::masks::MaskIndex;
use crate::plan::{serialize_plan, Plan};
use crate::recaption::{PromptMode, StepPrompt};

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("manifest references missing artifact {0}")]
    MissingArtifact(PathBuf),
    #[error("failed to {action} {path}")]
    Io {
        action: &'static str,
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed manifest")]
    Json(#[from] serde_json::Error),
}

/// One generation pass and the routing decisions it actually made.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassRecord {
    pub name: String,
    /// Whether region masks constrained this pass.
    pub masked: bool,
    pub trace: Vec<TraceEntry>,
}

/// Everything one run produced. Field order is the serialization order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationManifest {
    pub run_id: String,
    /// Unix seconds at write time. The only field excluded from determinism
    /// comparisons.
    pub created_at: u64,
    /// Job-identity config snapshot (no output dir, no credentials).
    pub config: BTreeMap<String, String>,
    /// The validated plan in canonical wire form.
    pub plan: serde_json::Value,
    pub prompt_mode: PromptMode,
    pub sharing: SharingMode,
    pub prompts: Vec<StepPrompt>,
    pub seeds: Vec<u64>,
    /// Hashes of the prompt templates in play, keyed by protocol name.
    pub template_hashes: BTreeMap<String, String>,
    pub passes: Vec<PassRecord>,
    /// Final images, relative to the run directory.
    pub images: Vec<String>,
    /// Final latents, relative to the run directory.
    pub latents: Vec<String>,
    /// step → label → mask file, relative to `masks/`. Empty when the run had
    /// no mask pass.
    pub mask_index: MaskIndex,
    pub metrics: Vec<MetricRecord>,
    /// Verdict file from a later `compare`, relative to the run directory.
    pub verdicts: Option<String>,
}

impl GenerationManifest {
    /// Copy with the timestamp zeroed, for byte-level determinism comparison.
    pub fn without_timestamp(&self) -> Self {
        let mut copy = self.clone();
        copy.created_at = 0;
        copy
    }
}

/// Content hash identifying a job: the config snapshot plus the canonical
/// plan. Identical jobs collide into the same run directory intentionally.
pub fn run_id(snapshot: &BTreeMap<String, String>, plan: &Plan) -> String {
    let mut hasher = Sha256::new();
    for (key, value) in snapshot {
        hasher.update(key.as_bytes());
        hasher.update([0x1e]);
        hasher.update(value.as_bytes());
        hasher.update([0x1f]);
    }
    hasher.update(serialize_plan(plan).as_bytes());
    let digest = hasher.finalize();
    hex::encode(&digest[..8])
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Every artifact path the manifest mentions, resolved against the run dir.
fn referenced_paths(dir: &Path, manifest: &GenerationManifest) -> Vec<PathBuf> {
    let mut paths: Vec<PathBuf> = manifest
        .images
        .iter()
        .chain(&manifest.latents)
        .map(|rel| dir.join(rel))
        .collect();
    for labels in manifest.mask_index.values() {
        for file in labels.values() {
            paths.push(dir.join("masks").join(file));
        }
    }
    if let Some(rel) = &manifest.verdicts {
        paths.push(dir.join(rel));
    }
    paths
}

/// Write `manifest.json` into the run directory: verify every referenced
/// artifact exists first, then write via a temp file and rename so readers
/// never observe a partial manifest.
pub fn write_manifest(dir: &Path, manifest: &GenerationManifest) -> Result<PathBuf, ManifestError> {
    for path in referenced_paths(dir, manifest) {
        if !path.is_file() {
            return Err(ManifestError::MissingArtifact(path));
        }
    }
    let mut bytes = serde_json::to_vec_pretty(manifest)?;
    bytes.push(b'\n');
    let path = dir.join("manifest.json");
    let tmp = dir.join("manifest.json.tmp");
    let io_err = |action: &'static str, at: &Path| {
        let at = at.to_path_buf();
        move |source: io::Error| ManifestError::Io {
            action,
            path: at,
            source,
        }
    };
    fs::write(&tmp, &bytes).map_err(io_err("write", &tmp))?;
    let file = fs::File::open(&tmp).map_err(io_err("open", &tmp))?;
    file.sync_all().map_err(io_err("sync", &tmp))?;
    fs::rename(&tmp, &path).map_err(io_err("rename into", &path))?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<GenerationManifest, ManifestError> {
    let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
        action: "read",
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}
