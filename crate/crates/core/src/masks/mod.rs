//! Per-step, per-object binary region masks. A pluggable segmenter produces
//! image-resolution bitmaps for the object labels the plan marks as shared;
//! this module pools them down to the attention resolution and unions them
//! per step so the kernel can restrict cross-image attention to object
//! regions.
//!
//! Masks depend on images and images depend on masks, so generation runs in
//! two passes: pass 1 shares with similarity biases only (all-open masks),
//! its images are segmented, and pass 2 regenerates with full biases from
//! the same seeds.

mod adapter;

pub use adapter::{FixtureSegmenter, HttpSegmenter, SegmentationAdapter};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use thiserror::Error;

use crate::plan::{Continuity, Plan};

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bitmap entries must be 0 or 1, got {0}")]
    NonBinary(u8),
    #[error("segmentation adapter failed: {0}")]
    Adapter(String),
    #[error("image format error: {0}")]
    ImageFormat(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("mask index error: {0}")]
    Index(String),
}

/// Row-major binary image at generation resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Bitmap {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, MaskError> {
        if width == 0 || height == 0 {
            return Err(MaskError::ShapeMismatch(
                "bitmap dimensions must be positive".into(),
            ));
        }
        if data.len() != width * height {
            return Err(MaskError::ShapeMismatch(format!(
                "bitmap data length {} != {width}x{height}",
                data.len()
            )));
        }
        if let Some(&bad) = data.iter().find(|&&b| b > 1) {
            return Err(MaskError::NonBinary(bad));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![1; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: u8) {
        assert!(value <= 1, "bitmap values are binary");
        self.data[y * self.width + x] = value;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&b| b == 1).count()
    }

    /// Logical OR with another bitmap of the same dimensions.
    pub fn or(&self, other: &Bitmap) -> Result<Bitmap, MaskError> {
        if self.width != other.width || self.height != other.height {
            return Err(MaskError::ShapeMismatch(format!(
                "cannot OR {}x{} with {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a | b)
            .collect();
        Ok(Bitmap {
            width: self.width,
            height: self.height,
            data,
        })
    }

    /// Grayscale encoding: 1 → 255, 0 → 0.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([self.get(y as usize, x as usize) * 255])
        })
    }

    /// Grayscale decoding: values ≥ 128 → 1.
    pub fn from_gray(img: &GrayImage) -> Self {
        let (width, height) = (img.width() as usize, img.height() as usize);
        let data = img.pixels().map(|p| u8::from(p.0[0] >= 128)).collect();
        Self {
            width,
            height,
            data,
        }
    }
}

/// Max-pool area binning to a h×w grid, flattened row-major to length h·w.
/// A latent cell is 1 iff any pixel it covers is 1, so thin structures
/// survive and errors lean toward sharing.
pub fn downsample(bitmap: &Bitmap, h: usize, w: usize) -> Result<Vec<u8>, MaskError> {
    let (big_h, big_w) = (bitmap.height(), bitmap.width());
    if h == 0 || w == 0 {
        return Err(MaskError::ShapeMismatch(
            "target dimensions must be positive".into(),
        ));
    }
    if big_h < h || big_w < w {
        return Err(MaskError::ShapeMismatch(format!(
            "cannot downsample {big_w}x{big_h} to {w}x{h}"
        )));
    }
    let mut out = vec![0u8; h * w];
    for r in 0..h {
        let y0 = r * big_h / h;
        let y1 = (r + 1) * big_h / h;
        for c in 0..w {
            let x0 = c * big_w / w;
            let x1 = (c + 1) * big_w / w;
            'cell: for y in y0..y1 {
                for x in x0..x1 {
                    if bitmap.get(y, x) == 1 {
                        out[r * w + c] = 1;
                        break 'cell;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// One object's region in one step, at both resolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectMask {
    pub step: usize,
    pub label: String,
    pub bitmap: Bitmap,
    latent: Vec<u8>,
    latent_h: usize,
    latent_w: usize,
}

impl ObjectMask {
    pub fn from_bitmap(
        step: usize,
        label: impl Into<String>,
        bitmap: Bitmap,
        latent_h: usize,
        latent_w: usize,
    ) -> Result<Self, MaskError> {
        let latent = downsample(&bitmap, latent_h, latent_w)?;
        Ok(Self {
            step,
            label: label.into(),
            bitmap,
            latent,
            latent_h,
            latent_w,
        })
    }

    pub fn latent(&self) -> &[u8] {
        &self.latent
    }
}

/// Per-step union of the shared-object masks; steps with no shared objects
/// keep an all-zero union.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMaskSet {
    unions: Vec<Bitmap>,
    latents: Vec<Vec<u8>>,
}

impl RegionMaskSet {
    pub fn from_object_masks(
        step_count: usize,
        image_w: usize,
        image_h: usize,
        latent_h: usize,
        latent_w: usize,
        masks: &[ObjectMask],
    ) -> Result<Self, MaskError> {
        let mut unions = vec![Bitmap::zeros(image_w, image_h); step_count];
        for mask in masks {
            if mask.step >= step_count {
                return Err(MaskError::ShapeMismatch(format!(
                    "mask for step {} outside plan of {step_count} steps",
                    mask.step
                )));
            }
            unions[mask.step] = unions[mask.step].or(&mask.bitmap)?;
        }
        let latents = unions
            .iter()
            .map(|u| downsample(u, latent_h, latent_w))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { unions, latents })
    }

    /// All-open masks for every step: used when masks should not restrict
    /// sharing (pass 1, and the globally-shared mode).
    pub fn all_open(step_count: usize, image_w: usize, image_h: usize, latent_h: usize, latent_w: usize) -> Self {
        Self {
            unions: vec![Bitmap::ones(image_w, image_h); step_count],
            latents: vec![vec![1u8; latent_h * latent_w]; step_count],
        }
    }

    pub fn step_count(&self) -> usize {
        self.unions.len()
    }

    pub fn union(&self, step: usize) -> &Bitmap {
        &self.unions[step]
    }

    /// The per-step latent vectors the attention kernel consumes.
    pub fn latent_vectors(&self) -> &[Vec<u8>] {
        &self.latents
    }
}

/// Which object labels carry a mask at each step. A non-new tag opens its
/// label both at its own step and at the step it references, so the object's
/// region is available on both sides of the sharing link; new objects and
/// never-referenced labels contribute nothing.
pub fn select_shared_objects(plan: &Plan) -> Vec<Vec<String>> {
    let mut shared: Vec<Vec<String>> = vec![Vec::new(); plan.len()];
    let mut push = |step: usize, label: &str| {
        if !shared[step].iter().any(|l| l == label) {
            shared[step].push(label.to_owned());
        }
    };
    for step in &plan.steps {
        for tag in &step.objects {
            if tag.continuity == Continuity::New {
                continue;
            }
            if let Some(reference) = tag.reference_step {
                if reference < plan.len() {
                    push(reference, &tag.label);
                }
                push(step.index, &tag.label);
            }
        }
    }
    shared
}

/// Segments one generated image for the given labels. Undetected labels are
/// logged and skipped rather than failing the run.
pub fn segment_step(
    image: &RgbImage,
    step: usize,
    labels: &[String],
    adapter: &dyn SegmentationAdapter,
    latent_h: usize,
    latent_w: usize,
) -> Result<Vec<ObjectMask>, MaskError> {
    if labels.is_empty() {
        return Ok(Vec::new());
    }
    let bitmaps = adapter.segment(image, step, labels)?;
    if bitmaps.len() != labels.len() {
        return Err(MaskError::Adapter(format!(
            "adapter returned {} masks for {} labels",
            bitmaps.len(),
            labels.len()
        )));
    }
    let mut out = Vec::new();
    for (label, bitmap) in labels.iter().zip(bitmaps) {
        match bitmap {
            Some(bitmap) => {
                if bitmap.width() != image.width() as usize
                    || bitmap.height() != image.height() as usize
                {
                    return Err(MaskError::ShapeMismatch(format!(
                        "step {step}: mask for {label:?} is {}x{} but the image is {}x{}",
                        bitmap.width(),
                        bitmap.height(),
                        image.width(),
                        image.height()
                    )));
                }
                out.push(ObjectMask::from_bitmap(
                    step,
                    label.clone(),
                    bitmap,
                    latent_h,
                    latent_w,
                )?);
            }
            None => log::warn!("step {step}: label {label:?} not detected, mask absent"),
        }
    }
    Ok(out)
}

/// Filename-safe form of an object label.
fn sanitize_label(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// steps (as decimal strings) → labels → mask filenames, stored next to the
/// mask images as `index.json`.
pub type MaskIndex = BTreeMap<String, BTreeMap<String, String>>;

/// Writes `step{i}_{label}.png` grayscale masks plus `index.json` into `dir`
/// and returns the index.
pub fn write_mask_set(dir: &Path, masks: &[ObjectMask]) -> Result<MaskIndex, MaskError> {
    fs::create_dir_all(dir).map_err(|source| MaskError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut index: MaskIndex = BTreeMap::new();
    for mask in masks {
        let filename = format!("step{}_{}.png", mask.step, sanitize_label(&mask.label));
        let path = dir.join(&filename);
        mask.bitmap
            .to_gray()
            .save(&path)
            .map_err(|e| MaskError::ImageFormat(format!("writing {}: {e}", path.display())))?;
        index
            .entry(mask.step.to_string())
            .or_default()
            .insert(mask.label.clone(), filename);
    }
    let index_path = dir.join("index.json");
    let body = serde_json::to_vec_pretty(&index)
        .map_err(|e| MaskError::Index(format!("serializing index: {e}")))?;
    fs::write(&index_path, body).map_err(|source| MaskError::Io {
        path: index_path,
        source,
    })?;
    Ok(index)
}

/// Reads an `index.json` written by [`write_mask_set`].
pub fn read_mask_index(dir: &Path) -> Result<MaskIndex, MaskError> {
    let path = dir.join("index.json");
    let bytes = fs::read(&path).map_err(|source| MaskError::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_slice(&bytes)
        .map_err(|e| MaskError::Index(format!("parsing {}: {e}", path.display())))
}

/// Loads one mask image back into a bitmap.
pub fn read_mask_bitmap(path: &Path) -> Result<Bitmap, MaskError> {
    let img = image::open(path)
        .map_err(|e| MaskError::ImageFormat(format!("reading {}: {e}", path.display())))?
        .into_luma8();
    Ok(Bitmap::from_gray(&img))
}
