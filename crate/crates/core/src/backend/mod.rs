//! Pluggable generation backends. A backend exposes a denoiser whose
//! self-attention layers delegate to a replaceable processor; installing a
//! [`SharedProcessor`] turns a batch of independent generations into one
//! coupled sequence. Ships a tiny deterministic toy denoiser so every
//! numerical guarantee can be verified at desk scale.

mod processor;
mod toy;

pub use processor::{
    AttentionContext, AttentionProcessor, IndependentProcessor, SharedProcessor, TraceEntry,
};
pub use toy::{ToyDenoiser, ToySpec};

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{AttentionError, AttentionSchedule};
use crate::masks::RegionMaskSet;
use crate::mat::Mat;
use crate::plan::SimilarityMatrix;
use crate::recaption::StepPrompt;

/// Longest accepted conditioning prompt, in bytes.
pub const MAX_PROMPT_BYTES: usize = 4096;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("prompt {index} is {len} bytes, limit {limit}")]
    PromptTooLong {
        index: usize,
        len: usize,
        limit: usize,
    },
    #[error("backend {0:?} does not expose replaceable attention")]
    UnsupportedBackend(String),
    #[error("invalid generation request: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Static settings of one generation backend instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    /// Backend identifier, e.g. "toy".
    pub backend: String,
    /// Output images are square with this side length.
    pub image_size: u32,
    /// Denoising iterations; must equal the schedule's total.
    pub total_steps: usize,
    /// Strength of the text-conditioning injection.
    pub guidance: f32,
    pub schedule: AttentionSchedule,
}

impl Default for BackendConfig {
    fn default() -> Self {
        let schedule = AttentionSchedule::default();
        Self {
            backend: "toy".into(),
            image_size: 64,
            total_steps: schedule.total_steps(),
            guidance: 1.0,
            schedule,
        }
    }
}

/// Latent geometry of a denoiser: P = h·w positions, `channels` features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentSpec {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
}

impl LatentSpec {
    pub fn positions(&self) -> usize {
        self.h * self.w
    }
}

/// A denoiser with replaceable self-attention. The batch couples through
/// attention only; everything else is per-image.
pub trait Denoiser: Send + Sync {
    fn latent_spec(&self) -> LatentSpec;

    fn layer_ids(&self) -> Vec<String>;

    /// Replaces the attention computation of every self-attention layer.
    /// Backends without replaceable attention refuse with
    /// [`BackendError::UnsupportedBackend`].
    fn install_processor(
        &mut self,
        processor: Arc<dyn AttentionProcessor>,
    ) -> Result<(), BackendError>;

    /// Runs the sampling loop for the whole batch and returns one final
    /// latent (P×channels) per image.
    fn run(
        &self,
        prompts: &[String],
        seeds: &[u64],
        guidance: f32,
        total_steps: usize,
    ) -> Result<Vec<Mat>, BackendError>;

    /// Decodes a final latent to an RGB image of the given square size.
    fn decode(&self, latent: &Mat, image_size: u32) -> Result<RgbImage, BackendError>;
}

/// Free-function form of the hook installation.
pub fn install_processor(
    denoiser: &mut dyn Denoiser,
    processor: Arc<dyn AttentionProcessor>,
) -> Result<(), BackendError> {
    denoiser.install_processor(processor)
}

/// Everything one sampling run produced.
#[derive(Debug)]
pub struct GenerationResult {
    pub images: Vec<RgbImage>,
    /// Final latents, one P×channels matrix per image.
    pub latents: Vec<Mat>,
    pub prompts: Vec<String>,
    pub seeds: Vec<u64>,
    /// Actual routing decisions, one entry per (step, layer).
    pub trace: Vec<TraceEntry>,
}

/// Generates the N-image sequence for one plan: installs a shared processor
/// built from the schedule, W, and the optional region masks, runs the
/// coupled sampling loop, and decodes the images.
///
/// Pass `masks: None` for the similarity-only first pass (cross-image
/// attention spatially unrestricted).
pub fn generate_sequence(
    denoiser: &mut dyn Denoiser,
    prompts: &[StepPrompt],
    seeds: &[u64],
    masks: Option<&RegionMaskSet>,
    w: &SimilarityMatrix,
    config: &BackendConfig,
) -> Result<GenerationResult, BackendError> {
    let n = prompts.len();
    if n == 0 {
        return Err(BackendError::InvalidConfig("empty prompt list".into()));
    }
    if seeds.len() != n {
        return Err(BackendError::InvalidConfig(format!(
            "{n} prompts but {} seeds",
            seeds.len()
        )));
    }
    if w.dim() != n {
        return Err(BackendError::InvalidConfig(format!(
            "similarity matrix is {}x{0} but the sequence has {n} steps",
            w.dim()
        )));
    }
    if config.total_steps != config.schedule.total_steps() {
        return Err(BackendError::InvalidConfig(format!(
            "config.total_steps {} != schedule total {}",
            config.total_steps,
            config.schedule.total_steps()
        )));
    }
    for (index, prompt) in prompts.iter().enumerate() {
        if prompt.text.len() > MAX_PROMPT_BYTES {
            return Err(BackendError::PromptTooLong {
                index,
                len: prompt.text.len(),
                limit: MAX_PROMPT_BYTES,
            });
        }
    }
    let spec = denoiser.latent_spec();
    let latent_masks = match masks {
        Some(set) => {
            if set.step_count() != n {
                return Err(BackendError::InvalidConfig(format!(
                    "mask set covers {} steps, sequence has {n}",
                    set.step_count()
                )));
            }
            let vectors = set.latent_vectors().to_vec();
            for (step, v) in vectors.iter().enumerate() {
                if v.len() != spec.positions() {
                    return Err(BackendError::InvalidConfig(format!(
                        "step {step} latent mask has {} cells, backend expects {}",
                        v.len(),
                        spec.positions()
                    )));
                }
            }
            Some(vectors)
        }
        None => None,
    };

    let shared = Arc::new(SharedProcessor::new(
        config.schedule.clone(),
        w.clone(),
        latent_masks,
    ));
    denoiser.install_processor(shared.clone())?;

    let texts: Vec<String> = prompts.iter().map(|p| p.text.clone()).collect();
    let latents = denoiser.run(&texts, seeds, config.guidance, config.total_steps)?;
    let images = latents
        .iter()
        .map(|latent| denoiser.decode(latent, config.image_size))
        .collect::<Result<Vec<_>, _>>()?;

    Ok(GenerationResult {
        images,
        latents,
        prompts: texts,
        seeds: seeds.to_vec(),
        trace: shared.trace(),
    })
}

/// Sidecar describing a raw latent blob.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentShape {
    pub rows: usize,
    pub cols: usize,
}

/// Writes a latent as a raw little-endian f32 blob plus a `.shape.json`
/// sidecar next to it.
pub fn write_latent(path: &Path, latent: &Mat) -> Result<(), BackendError> {
    let io_err = |source| BackendError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err)?;
    }
    fs::write(path, latent.to_le_bytes()).map_err(io_err)?;
    let shape = LatentShape {
        rows: latent.rows(),
        cols: latent.cols(),
    };
    let sidecar = sidecar_path(path);
    fs::write(
        &sidecar,
        serde_json::to_vec(&shape).expect("shape serializes"),
    )
    .map_err(|source| BackendError::Io {
        path: sidecar,
        source,
    })
}

/// Reads a latent written by [`write_latent`].
pub fn read_latent(path: &Path) -> Result<Mat, BackendError> {
    let sidecar = sidecar_path(path);
    let shape: LatentShape = serde_json::from_slice(&fs::read(&sidecar).map_err(|source| {
        BackendError::Io {
            path: sidecar.clone(),
            source,
        }
    })?)
    .map_err(|e| BackendError::InvalidConfig(format!("bad shape sidecar {}: {e}", sidecar.display())))?;
    let bytes = fs::read(path).map_err(|source| BackendError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Mat::from_le_bytes(shape.rows, shape.cols, &bytes).ok_or_else(|| {
        BackendError::InvalidConfig(format!(
            "latent blob {} does not match shape {}x{}",
            path.display(),
            shape.rows,
            shape.cols
        ))
    })
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".shape.json");
    path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn latent_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let latent = Mat::randn(&mut rng, 64, 4, 1.0);
        let path = dir.path().join("latents/step0.f32");
        write_latent(&path, &latent).unwrap();
        let back = read_latent(&path).unwrap();
        assert!(latent.bit_eq(&back), "raw f32 blob must round-trip bitwise");
    }

    #[test]
    fn truncated_latent_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let latent = Mat::zeros(4, 4);
        let path = dir.path().join("l.f32");
        write_latent(&path, &latent).unwrap();
        fs::write(&path, &latent.to_le_bytes()[..10]).unwrap();
        assert!(matches!(
            read_latent(&path),
            Err(BackendError::InvalidConfig(_))
        ));
    }
}
