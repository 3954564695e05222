//! Segmentation adapters: a remote open-vocabulary segmenter over HTTP and a
//! fixture adapter that replays masks from the on-disk layout written by
//! [`write_mask_set`](super::write_mask_set).

use std::io::Cursor;
use std::path::PathBuf;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use image::RgbImage;

use super::{read_mask_bitmap, read_mask_index, Bitmap, MaskError, MaskIndex};

/// Produces one optional bitmap per requested label; `None` means the label
/// was not detected in the image. Implementations may be called concurrently
/// across steps.
pub trait SegmentationAdapter: Send + Sync {
    fn segment(
        &self,
        image: &RgbImage,
        step: usize,
        labels: &[String],
    ) -> Result<Vec<Option<Bitmap>>, MaskError>;
}

/// Replays recorded masks from a directory holding `index.json` plus the
/// mask images it references. The image content is ignored; the step index
/// is the retrieval key.
pub struct FixtureSegmenter {
    dir: PathBuf,
    index: MaskIndex,
}

impl FixtureSegmenter {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, MaskError> {
        let dir = dir.into();
        let index = read_mask_index(&dir)?;
        Ok(Self { dir, index })
    }
}

impl SegmentationAdapter for FixtureSegmenter {
    fn segment(
        &self,
        _image: &RgbImage,
        step: usize,
        labels: &[String],
    ) -> Result<Vec<Option<Bitmap>>, MaskError> {
        let step_entry = self.index.get(&step.to_string());
        labels
            .iter()
            .map(|label| {
                let Some(filename) = step_entry.and_then(|m| m.get(label)) else {
                    return Ok(None);
                };
                read_mask_bitmap(&self.dir.join(filename)).map(Some)
            })
            .collect()
    }
}

/// Remote segmenter speaking a small JSON protocol: the request carries the
/// PNG-encoded image (base64), the step index, and the label list; the
/// response maps each label to a base64 PNG mask or null.
pub struct HttpSegmenter {
    endpoint: String,
    http: reqwest::blocking::Client,
}

impl HttpSegmenter {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            http: reqwest::blocking::Client::new(),
        }
    }
}

impl SegmentationAdapter for HttpSegmenter {
    fn segment(
        &self,
        image: &RgbImage,
        step: usize,
        labels: &[String],
    ) -> Result<Vec<Option<Bitmap>>, MaskError> {
        let mut png = Vec::new();
        image::DynamicImage::ImageRgb8(image.clone())
            .write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)
            .map_err(|e| MaskError::ImageFormat(format!("encoding request image: {e}")))?;
        let body = serde_json::json!({
            "image_png_base64": BASE64.encode(&png),
            "step": step,
            "labels": labels,
        });
        let resp = self
            .http
            .post(&self.endpoint)
            .json(&body)
            .send()
            .map_err(|e| MaskError::Adapter(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(MaskError::Adapter(format!(
                "segmenter returned status {}",
                resp.status()
            )));
        }
        let value: serde_json::Value = resp
            .json()
            .map_err(|e| MaskError::Adapter(format!("segmenter response is not JSON: {e}")))?;
        let masks = value
            .get("masks")
            .and_then(|m| m.as_object())
            .ok_or_else(|| MaskError::Adapter("response missing \"masks\" object".into()))?;
        labels
            .iter()
            .map(|label| match masks.get(label) {
                Some(serde_json::Value::String(b64)) => {
                    let bytes = BASE64
                        .decode(b64)
                        .map_err(|e| MaskError::Adapter(format!("mask for {label:?}: {e}")))?;
                    let img = image::load_from_memory(&bytes)
                        .map_err(|e| {
                            MaskError::ImageFormat(format!("mask for {label:?}: {e}"))
                        })?
                        .into_luma8();
                    Ok(Some(Bitmap::from_gray(&img)))
                }
                _ => Ok(None),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{write_mask_set, ObjectMask};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fixture_segmenter_replays_recorded_masks() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let data: Vec<u8> = (0..256).map(|_| u8::from(rng.gen_bool(0.4))).collect();
        let bitmap = Bitmap::new(16, 16, data).unwrap();
        let mask = ObjectMask::from_bitmap(1, "cake", bitmap.clone(), 4, 4).unwrap();
        write_mask_set(dir.path(), &[mask]).unwrap();

        let segmenter = FixtureSegmenter::new(dir.path()).unwrap();
        let image = RgbImage::new(16, 16);
        let labels = vec!["cake".to_string(), "spoon".to_string()];

        let first = segmenter.segment(&image, 1, &labels).unwrap();
        assert_eq!(first[0].as_ref(), Some(&bitmap), "recorded mask replays");
        assert_eq!(first[1], None, "unrecorded label is absent");

        let second = segmenter.segment(&image, 1, &labels).unwrap();
        assert_eq!(first, second, "replay is deterministic");

        let other_step = segmenter.segment(&image, 0, &labels).unwrap();
        assert!(other_step.iter().all(Option::is_none), "step is part of the key");
    }
}
