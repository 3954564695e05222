//! Attention processors: the pluggable computation a denoiser's
//! self-attention layers delegate to. The shared processor routes each call
//! through the schedule and falls back to the very same standard-attention
//! function the independent processor uses, which is what makes an unrouted
//! hooked run bit-identical to an unhooked one.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_router, inflate_masks, inflate_similarity, shared_attention, standard_attention,
    AttentionError, AttentionSchedule, FeatureBlock, InflatedMask,
};
use crate::mat::Mat;
use crate::plan::SimilarityMatrix;

/// Identifies one attention call site inside the sampling loop.
#[derive(Debug, Clone, Copy)]
pub struct AttentionContext<'a> {
    /// Denoising step, 0-based from the noisiest.
    pub step: usize,
    pub layer_id: &'a str,
    /// Which image of the batch is querying.
    pub image: usize,
}

/// One routing decision, recorded per (step, layer).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub layer: String,
    pub shared: bool,
}

/// Computes the attention output for one image of the batch.
pub trait AttentionProcessor: Send + Sync {
    fn attend(&self, blocks: &FeatureBlock, ctx: &AttentionContext)
        -> Result<Mat, AttentionError>;
}

/// Plain per-image self-attention; the unhooked behaviour.
pub struct IndependentProcessor;

impl AttentionProcessor for IndependentProcessor {
    fn attend(
        &self,
        blocks: &FeatureBlock,
        ctx: &AttentionContext,
    ) -> Result<Mat, AttentionError> {
        standard_attention(blocks.q(ctx.image), blocks.k(ctx.image), blocks.v(ctx.image))
    }
}

/// Shared attention gated by the schedule, with similarity and (optional)
/// region-mask biases. Records every routing decision it actually takes.
pub struct SharedProcessor {
    schedule: AttentionSchedule,
    similarity: SimilarityMatrix,
    /// Per-image latent masks; `None` leaves cross-image attention
    /// spatially unrestricted.
    masks: Option<Vec<Vec<u8>>>,
    trace: Mutex<Vec<TraceEntry>>,
}

impl SharedProcessor {
    pub fn new(
        schedule: AttentionSchedule,
        similarity: SimilarityMatrix,
        masks: Option<Vec<Vec<u8>>>,
    ) -> Self {
        Self {
            schedule,
            similarity,
            masks,
            trace: Mutex::new(Vec::new()),
        }
    }

    /// Deduplicated, ordered record of the decisions taken so far. All
    /// images of a batch see the same decision at a given (step, layer), so
    /// the trace is per call site.
    pub fn trace(&self) -> Vec<TraceEntry> {
        let mut entries = self.trace.lock().expect("trace poisoned").clone();
        entries.sort();
        entries.dedup();
        entries
    }

    fn record(&self, ctx: &AttentionContext, shared: bool) {
        let mut trace = self.trace.lock().expect("trace poisoned");
        let entry = TraceEntry {
            step: ctx.step,
            layer: ctx.layer_id.to_owned(),
            shared,
        };
        if trace.last() != Some(&entry) {
            trace.push(entry);
        }
    }
}

impl AttentionProcessor for SharedProcessor {
    fn attend(
        &self,
        blocks: &FeatureBlock,
        ctx: &AttentionContext,
    ) -> Result<Mat, AttentionError> {
        let shared = attention_router(&self.schedule, ctx.step, ctx.layer_id);
        self.record(ctx, shared);
        if !shared {
            return standard_attention(
                blocks.q(ctx.image),
                blocks.k(ctx.image),
                blocks.v(ctx.image),
            );
        }
        let positions = blocks.positions();
        let s = inflate_similarity(&self.similarity, ctx.image, positions)?;
        let m = match &self.masks {
            Some(masks) => inflate_masks(masks, ctx.image)?,
            None => InflatedMask::all_open(ctx.image, blocks.image_count(), positions),
        };
        shared_attention(blocks, &s, &m, ctx.image)
    }
}
