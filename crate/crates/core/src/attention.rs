//! Shared self-attention across N images. Each image's queries attend over
//! the row-concatenation of every image's keys, with two additive
//! logit biases: log of the inflated state-similarity row and log of the
//! inflated region mask. A zero similarity or mask entry therefore excludes
//! its column exactly (weight 0 after softmax), while the self-segment is
//! always fully open so every softmax row stays well-defined.
//!
//! All paths (standard per-image attention, plain concatenated-KV sharing,
//! and the biased kernel) run through the same softmax and accumulation
//! helpers in a fixed left-to-right order. That is what makes the reduction
//! guarantees hold bit-for-bit, not just approximately: an all-ones bias adds
//! +0.0 to every logit, and excluded columns are skipped rather than
//! multiplied by zero, so the surviving accumulation sequence is identical to
//! the unbiased one.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mat::{dot, Mat};
use crate::plan::SimilarityMatrix;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("image index {index} out of range for {count} images")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("invalid schedule: shared_steps {shared} exceeds total_steps {total}")]
    InvalidSchedule { shared: usize, total: usize },
    #[error("mask entries must be 0 or 1, got {0}")]
    NonBinaryMask(u8),
}

/// Projected activations for all N images of a sequence: Q_i, K_i (P×d_k)
/// and V_i (P×d_v), with P, d_k, d_v identical across images.
#[derive(Debug, Clone)]
pub struct FeatureBlock {
    q: Vec<Mat>,
    k: Vec<Mat>,
    v: Vec<Mat>,
}

impl FeatureBlock {
    pub fn new(q: Vec<Mat>, k: Vec<Mat>, v: Vec<Mat>) -> Result<Self, AttentionError> {
        if q.is_empty() || q.len() != k.len() || q.len() != v.len() {
            return Err(AttentionError::ShapeMismatch(format!(
                "need equal non-zero image counts, got q={} k={} v={}",
                q.len(),
                k.len(),
                v.len()
            )));
        }
        let positions = q[0].rows();
        let key_dim = q[0].cols();
        let value_dim = v[0].cols();
        if positions == 0 || key_dim == 0 || value_dim == 0 {
            return Err(AttentionError::ShapeMismatch(
                "positions and feature dims must be positive".into(),
            ));
        }
        for (i, ((qi, ki), vi)) in q.iter().zip(&k).zip(&v).enumerate() {
            let ok = qi.rows() == positions
                && ki.rows() == positions
                && vi.rows() == positions
                && qi.cols() == key_dim
                && ki.cols() == key_dim
                && vi.cols() == value_dim;
            if !ok {
                return Err(AttentionError::ShapeMismatch(format!(
                    "image {i}: expected Q/K {positions}x{key_dim}, V {positions}x{value_dim}, \
                     got Q {}x{}, K {}x{}, V {}x{}",
                    qi.rows(),
                    qi.cols(),
                    ki.rows(),
                    ki.cols(),
                    vi.rows(),
                    vi.cols()
                )));
            }
        }
        Ok(Self { q, k, v })
    }

    /// Random block with standard-normal entries, for tests and calibration.
    pub fn randn<R: Rng>(
        rng: &mut R,
        images: usize,
        positions: usize,
        key_dim: usize,
        value_dim: usize,
    ) -> Self {
        let gen = |rng: &mut R, cols: usize| {
            (0..images)
                .map(|_| Mat::randn(rng, positions, cols, 1.0))
                .collect::<Vec<_>>()
        };
        let q = gen(rng, key_dim);
        let k = gen(rng, key_dim);
        let v = gen(rng, value_dim);
        Self::new(q, k, v).expect("random blocks are shape-consistent")
    }

    pub fn image_count(&self) -> usize {
        self.q.len()
    }

    pub fn positions(&self) -> usize {
        self.q[0].rows()
    }

    pub fn key_dim(&self) -> usize {
        self.q[0].cols()
    }

    pub fn value_dim(&self) -> usize {
        self.v[0].cols()
    }

    pub fn q(&self, image: usize) -> &Mat {
        &self.q[image]
    }

    pub fn k(&self, image: usize) -> &Mat {
        &self.k[image]
    }

    pub fn v(&self, image: usize) -> &Mat {
        &self.v[image]
    }

    fn check_image(&self, image: usize) -> Result<(), AttentionError> {
        if image < self.image_count() {
            Ok(())
        } else {
            Err(AttentionError::IndexOutOfRange {
                index: image,
                count: self.image_count(),
            })
        }
    }
}

/// Row i of the similarity matrix broadcast over positions: a length N·P
/// vector whose segment j is constant W_{i,j}, with the self-segment 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct InflatedSimilarity {
    image: usize,
    image_count: usize,
    positions: usize,
    values: Vec<f32>,
}

impl InflatedSimilarity {
    pub fn image(&self) -> usize {
        self.image
    }

    pub fn image_count(&self) -> usize {
        self.image_count
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Inflation of an all-ones similarity row: no cross-image damping.
    pub fn all_ones(image: usize, image_count: usize, positions: usize) -> Self {
        Self {
            image,
            image_count,
            positions,
            values: vec![1.0; image_count * positions],
        }
    }
}

/// Per-image binary region masks broadcast to length N·P, with the
/// self-segment forced open.
#[derive(Debug, Clone, PartialEq)]
pub struct InflatedMask {
    image: usize,
    image_count: usize,
    positions: usize,
    values: Vec<f32>,
}

impl InflatedMask {
    pub fn image(&self) -> usize {
        self.image
    }

    pub fn image_count(&self) -> usize {
        self.image_count
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Inflation of all-open masks: no spatial restriction.
    pub fn all_open(image: usize, image_count: usize, positions: usize) -> Self {
        Self {
            image,
            image_count,
            positions,
            values: vec![1.0; image_count * positions],
        }
    }
}

/// Broadcasts row `image` of W over `positions` spatial slots per image.
pub fn inflate_similarity(
    w: &SimilarityMatrix,
    image: usize,
    positions: usize,
) -> Result<InflatedSimilarity, AttentionError> {
    let n = w.dim();
    if image >= n {
        return Err(AttentionError::IndexOutOfRange {
            index: image,
            count: n,
        });
    }
    if positions == 0 {
        return Err(AttentionError::ShapeMismatch(
            "positions must be positive".into(),
        ));
    }
    let mut values = Vec::with_capacity(n * positions);
    for j in 0..n {
        let fill = if j == image { 1.0 } else { w.get(image, j) };
        values.extend(std::iter::repeat(fill).take(positions));
    }
    Ok(InflatedSimilarity {
        image,
        image_count: n,
        positions,
        values,
    })
}

/// Concatenates per-image binary masks, forcing the segment of `image`
/// itself to all ones so the query image can always attend to itself.
pub fn inflate_masks(masks: &[Vec<u8>], image: usize) -> Result<InflatedMask, AttentionError> {
    let n = masks.len();
    if image >= n {
        return Err(AttentionError::IndexOutOfRange {
            index: image,
            count: n,
        });
    }
    let positions = masks[0].len();
    if positions == 0 {
        return Err(AttentionError::ShapeMismatch(
            "masks must have at least one position".into(),
        ));
    }
    let mut values = Vec::with_capacity(n * positions);
    for (j, mask) in masks.iter().enumerate() {
        if mask.len() != positions {
            return Err(AttentionError::ShapeMismatch(format!(
                "mask {j} has length {}, expected {positions}",
                mask.len()
            )));
        }
        if j == image {
            values.extend(std::iter::repeat(1.0).take(positions));
            continue;
        }
        for &bit in mask {
            match bit {
                0 => values.push(0.0),
                1 => values.push(1.0),
                other => return Err(AttentionError::NonBinaryMask(other)),
            }
        }
    }
    Ok(InflatedMask {
        image,
        image_count: n,
        positions,
        values,
    })
}

/// Stacks all keys and values in image-index order: K^+ is (N·P)×d_k with
/// image 0's rows first, V^+ likewise.
pub fn concat_kv(blocks: &FeatureBlock) -> (Mat, Mat) {
    let ks: Vec<&Mat> = blocks.k.iter().collect();
    let vs: Vec<&Mat> = blocks.v.iter().collect();
    (Mat::vstack(&ks), Mat::vstack(&vs))
}

/// In-place softmax treating -inf logits as exactly excluded: their weight
/// is written as literal 0.0 and they never contribute to the max or the
/// normalizer beyond adding zero.
fn softmax_in_place(row: &mut [f32]) {
    let mut max = f32::NEG_INFINITY;
    for &logit in row.iter() {
        if logit > max {
            max = logit;
        }
    }
    debug_assert!(max.is_finite(), "softmax row has no finite logits");
    let mut sum = 0.0f32;
    for slot in row.iter_mut() {
        let weight = if *slot == f32::NEG_INFINITY {
            0.0
        } else {
            (*slot - max).exp()
        };
        *slot = weight;
        sum += weight;
    }
    for slot in row.iter_mut() {
        *slot /= sum;
    }
}

/// Softmax(Q·keysᵀ/√d_k + bias) rows. `bias` has one entry per key row.
fn attention_weights(q: &Mat, keys: &Mat, bias: Option<&[f32]>) -> Mat {
    let scale = (q.cols() as f32).sqrt();
    let mut weights = Mat::zeros(q.rows(), keys.rows());
    for r in 0..q.rows() {
        let q_row = q.row(r);
        let out = weights.row_mut(r);
        for (c, slot) in out.iter_mut().enumerate() {
            let base = dot(q_row, keys.row(c)) / scale;
            *slot = match bias {
                Some(b) => base + b[c],
                None => base,
            };
        }
        softmax_in_place(out);
    }
    weights
}

/// H = weights · values, skipping zero weights so that excluded columns
/// leave the accumulation sequence (and hence the bits) of the surviving
/// terms untouched.
fn weighted_rows(weights: &Mat, values: &Mat) -> Mat {
    let mut out = Mat::zeros(weights.rows(), values.cols());
    for r in 0..weights.rows() {
        for c in 0..weights.cols() {
            let w = weights.get(r, c);
            if w == 0.0 {
                continue;
            }
            let v_row = values.row(c);
            let out_row = out.row_mut(r);
            for (slot, &v) in out_row.iter_mut().zip(v_row) {
                *slot += w * v;
            }
        }
    }
    out
}

/// Single-image self-attention: softmax(Q·Kᵀ/√d_k)·V.
pub fn standard_attention(q: &Mat, k: &Mat, v: &Mat) -> Result<Mat, AttentionError> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(AttentionError::ShapeMismatch(format!(
            "Q {}x{}, K {}x{}, V {}x{} do not compose",
            q.rows(),
            q.cols(),
            k.rows(),
            k.cols(),
            v.rows(),
            v.cols()
        )));
    }
    Ok(weighted_rows(&attention_weights(q, k, None), v))
}

/// Plain concatenated-KV sharing for image `i`: every image's keys and
/// values are visible, with no similarity or mask bias.
pub fn kv_shared_attention(blocks: &FeatureBlock, image: usize) -> Result<Mat, AttentionError> {
    blocks.check_image(image)?;
    let (k_plus, v_plus) = concat_kv(blocks);
    Ok(weighted_rows(
        &attention_weights(blocks.q(image), &k_plus, None),
        &v_plus,
    ))
}

/// The attention map A_i^+ (P rows, N·P columns) of the biased kernel:
/// row-softmax(Q_i·K^{+T}/√d_k + log S_i^+ + log M_i^+).
pub fn shared_attention_map(
    blocks: &FeatureBlock,
    similarity: &InflatedSimilarity,
    mask: &InflatedMask,
    image: usize,
) -> Result<Mat, AttentionError> {
    blocks.check_image(image)?;
    let n = blocks.image_count();
    let p = blocks.positions();
    if similarity.image != image || mask.image != image {
        return Err(AttentionError::ShapeMismatch(format!(
            "biases inflated for images {}/{} but attending image {image}",
            similarity.image, mask.image
        )));
    }
    if similarity.values.len() != n * p || mask.values.len() != n * p {
        return Err(AttentionError::ShapeMismatch(format!(
            "bias lengths {}/{} do not match {n} images x {p} positions",
            similarity.values.len(),
            mask.values.len()
        )));
    }
    // ln(1) = +0.0 keeps open columns bit-identical to the unbiased kernel;
    // ln(0) = -inf excludes a column outright.
    let bias: Vec<f32> = similarity
        .values
        .iter()
        .zip(&mask.values)
        .map(|(&s, &m)| s.ln() + m.ln())
        .collect();
    let (k_plus, _) = concat_kv(blocks);
    Ok(attention_weights(blocks.q(image), &k_plus, Some(&bias)))
}

/// H_i = A_i^+ · V^+ for image `i` under the biased kernel.
pub fn shared_attention(
    blocks: &FeatureBlock,
    similarity: &InflatedSimilarity,
    mask: &InflatedMask,
    image: usize,
) -> Result<Mat, AttentionError> {
    let map = shared_attention_map(blocks, similarity, mask, image)?;
    let (_, v_plus) = concat_kv(blocks);
    Ok(weighted_rows(&map, &v_plus))
}

/// Which self-attention layers participate in sharing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerFilter {
    All,
    AllowList(BTreeSet<String>),
}

impl LayerFilter {
    pub fn admits(&self, layer_id: &str) -> bool {
        match self {
            Self::All => true,
            Self::AllowList(ids) => ids.contains(layer_id),
        }
    }
}

/// When sharing is active: during the first `shared_steps` of `total_steps`
/// denoising iterations (counted 0-based from the noisiest step), on layers
/// admitted by the filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSchedule {
    total_steps: usize,
    shared_steps: usize,
    layer_filter: LayerFilter,
}

impl AttentionSchedule {
    pub fn new(
        total_steps: usize,
        shared_steps: usize,
        layer_filter: LayerFilter,
    ) -> Result<Self, AttentionError> {
        if shared_steps > total_steps {
            return Err(AttentionError::InvalidSchedule {
                shared: shared_steps,
                total: total_steps,
            });
        }
        Ok(Self {
            total_steps,
            shared_steps,
            layer_filter,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn shared_steps(&self) -> usize {
        self.shared_steps
    }

    pub fn layer_filter(&self) -> &LayerFilter {
        &self.layer_filter
    }
}

/// Sharing in the first 15 of 20 steps on every self-attention layer.
impl Default for AttentionSchedule {
    fn default() -> Self {
        Self {
            total_steps: 20,
            shared_steps: 15,
            layer_filter: LayerFilter::All,
        }
    }
}

/// True iff the kernel should share at this denoising step and layer.
pub fn attention_router(schedule: &AttentionSchedule, step: usize, layer_id: &str) -> bool {
    step < schedule.shared_steps && schedule.layer_filter.admits(layer_id)
}
