//! Classic reference-free metrics behind adapter traits.
//!
//! Real scorers (CLIP-style text/image alignment, perceptual distances over
//! consecutive frames) run in external model servers; this module defines the
//! interfaces and ships deterministic hash-derived mocks so the pipeline and
//! its tests produce stable numbers with no model in the loop.

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::EvalError;

/// Which way a metric points: alignment scores are higher-better, perceptual
/// distances lower-better. Fixed per metric, never configurable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

/// The supported metric families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    ClipScore,
    Dreamsim,
    L2Dino,
}

impl MetricName {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::ClipScore => "clip_score",
            MetricName::Dreamsim => "dreamsim",
            MetricName::L2Dino => "l2_dino",
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            MetricName::ClipScore => Direction::HigherBetter,
            MetricName::Dreamsim | MetricName::L2Dino => Direction::LowerBetter,
        }
    }
}

/// One computed metric value with its fixed direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: MetricName,
    pub value: f64,
    pub direction: Direction,
}

impl MetricRecord {
    pub fn new(metric: MetricName, value: f64) -> Self {
        Self {
            metric,
            value,
            direction: metric.direction(),
        }
    }
}

/// Scores how well one image matches one text prompt (higher is better).
pub trait ImageTextScorer: Send + Sync {
    fn score(&self, image: &RgbImage, prompt: &str) -> Result<f64, EvalError>;
}

/// Perceptual distance between two images (lower is closer).
pub trait ImageDistance: Send + Sync {
    fn distance(&self, a: &RgbImage, b: &RgbImage) -> Result<f64, EvalError>;
}

fn image_digest(image: &RgbImage) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(image.width().to_le_bytes());
    hasher.update(image.height().to_le_bytes());
    hasher.update(image.as_raw());
    hasher.finalize().into()
}

fn unit_interval(bytes: &[u8]) -> f64 {
    let raw = u64::from_le_bytes(bytes[..8].try_into().expect("digest has 32 bytes"));
    raw as f64 / u64::MAX as f64
}

/// Deterministic mock scorer: hash of image bytes and prompt, mapped into
/// [0, 1]. Any pixel or prompt change moves the score; reruns do not.
#[derive(Debug, Default, Clone, Copy)]
pub struct HashScorer;

impl ImageTextScorer for HashScorer {
    fn score(&self, image: &RgbImage, prompt: &str) -> Result<f64, EvalError> {
        let mut hasher = Sha256::new();
        hasher.update(image_digest(image));
        hasher.update([0x1f]);
        hasher.update(prompt.as_bytes());
        let digest: [u8; 32] = hasher.finalize().into();
        Ok(unit_interval(&digest))
    }
}

/// Deterministic mock distance: XOR of the two images' digests, mapped into
/// [0, 1]. Symmetric by construction, and identical images get exactly 0.
#[derive(Debug, Default, Clone, Copy)]
pub struct HashDistance;

impl ImageDistance for HashDistance {
    fn distance(&self, a: &RgbImage, b: &RgbImage) -> Result<f64, EvalError> {
        let da = image_digest(a);
        let db = image_digest(b);
        let mixed: Vec<u8> = da.iter().zip(db).map(|(&x, y)| x ^ y).collect();
        Ok(unit_interval(&mixed))
    }
}

/// Compute the standard metric set for one generated sequence.
///
/// `clip_score` averages the scorer over aligned (image, prompt) pairs.
/// `dreamsim` and `l2_dino` average their distance adapters over consecutive
/// image pairs; a single-image sequence has no pairs, so those records are
/// omitted rather than fabricated.
pub fn classic_metrics(
    images: &[RgbImage],
    prompts: &[String],
    scorer: &dyn ImageTextScorer,
    dreamsim: &dyn ImageDistance,
    l2_dino: &dyn ImageDistance,
) -> Result<Vec<MetricRecord>, EvalError> {
    if images.len() != prompts.len() {
        return Err(EvalError::PromptImageMismatch {
            images: images.len(),
            prompts: prompts.len(),
        });
    }
    if images.is_empty() {
        return Err(EvalError::PromptImageMismatch {
            images: 0,
            prompts: prompts.len(),
        });
    }
    let mut alignment = 0.0;
    for (image, prompt) in images.iter().zip(prompts) {
        alignment += scorer.score(image, prompt)?;
    }
    let mut records = vec![MetricRecord::new(
        MetricName::ClipScore,
        alignment / images.len() as f64,
    )];
    if images.len() >= 2 {
        let pairs = (images.len() - 1) as f64;
        let mut sim_total = 0.0;
        let mut dino_total = 0.0;
        for pair in images.windows(2) {
            sim_total += dreamsim.distance(&pair[0], &pair[1])?;
            dino_total += l2_dino.distance(&pair[0], &pair[1])?;
        }
        records.push(MetricRecord::new(MetricName::Dreamsim, sim_total / pairs));
        records.push(MetricRecord::new(MetricName::L2Dino, dino_total / pairs));
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(width: u32, height: u32, rgb: [u8; 3]) -> RgbImage {
        RgbImage::from_pixel(width, height, image::Rgb(rgb))
    }

    #[test]
    fn mock_adapters_are_deterministic_and_input_sensitive() {
        let image = solid(4, 4, [10, 20, 30]);
        let first = HashScorer.score(&image, "chop the onion").expect("score");
        let second = HashScorer.score(&image, "chop the onion").expect("score");
        assert_eq!(first, second, "same inputs must give the same score");
        let other = HashScorer.score(&image, "fry the onion").expect("score");
        assert_ne!(first, other, "a prompt change must move the score");
        assert!((0.0..=1.0).contains(&first), "scores live in [0, 1]");
    }

    #[test]
    fn identical_images_have_distance_zero() {
        let a = solid(4, 4, [1, 2, 3]);
        let b = solid(4, 4, [1, 2, 3]);
        assert_eq!(HashDistance.distance(&a, &b).expect("distance"), 0.0);
        let c = solid(4, 4, [1, 2, 4]);
        assert!(HashDistance.distance(&a, &c).expect("distance") > 0.0);
    }

    #[test]
    fn distance_is_symmetric() {
        let a = solid(4, 4, [9, 9, 9]);
        let b = solid(4, 4, [0, 1, 2]);
        assert_eq!(
            HashDistance.distance(&a, &b).expect("a,b"),
            HashDistance.distance(&b, &a).expect("b,a"),
        );
    }

    #[test]
    fn three_image_sequence_averages_exactly_two_pair_distances() {
        let images = [
            solid(4, 4, [0, 0, 0]),
            solid(4, 4, [100, 0, 0]),
            solid(4, 4, [0, 100, 0]),
        ];
        let prompts: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let records =
            classic_metrics(&images, &prompts, &HashScorer, &HashDistance, &HashDistance)
                .expect("metrics");
        assert_eq!(records.len(), 3, "clip + dreamsim + l2_dino");
        let d01 = HashDistance.distance(&images[0], &images[1]).expect("d01");
        let d12 = HashDistance.distance(&images[1], &images[2]).expect("d12");
        let expected = (d01 + d12) / 2.0;
        for record in &records[1..] {
            assert_eq!(
                record.value, expected,
                "{} must average the two consecutive-pair distances",
                record.metric.as_str()
            );
            assert_eq!(record.direction, Direction::LowerBetter);
        }
        assert_eq!(records[0].direction, Direction::HigherBetter);
    }

    #[test]
    fn single_image_sequence_reports_alignment_only() {
        let images = [solid(4, 4, [5, 5, 5])];
        let prompts = vec!["only step".to_string()];
        let records =
            classic_metrics(&images, &prompts, &HashScorer, &HashDistance, &HashDistance)
                .expect("metrics");
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].metric, MetricName::ClipScore);
    }

    #[test]
    fn prompt_count_mismatch_is_rejected() {
        let images = [solid(4, 4, [5, 5, 5])];
        let err = classic_metrics(&images, &[], &HashScorer, &HashDistance, &HashDistance)
            .expect_err("mismatch must be rejected");
        assert!(matches!(
            err,
            EvalError::PromptImageMismatch { images: 1, prompts: 0 }
        ));
    }
}
