//! A tiny deterministic denoiser for desk-scale verification. It is not a
//! trained model: weights are seeded random projections and the "denoising"
//! update is a fixed-rate contraction toward a prompt-conditioned attention
//! trunk. What matters is that it has genuine softmax self-attention layers
//! behind the replaceable processor interface, per-image seeds, and prompt
//! conditioning, so every sharing guarantee (bit-exact isolation, schedule
//! boundaries, coherence direction) is observable on it.

use std::sync::Arc;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{
    AttentionContext, AttentionProcessor, BackendError, Denoiser, IndependentProcessor,
    LatentSpec, MAX_PROMPT_BYTES,
};
use crate::attention::FeatureBlock;
use crate::mat::Mat;

/// Per-step descent rate on the epsilon head. Each step moves the latent a
/// quarter of the way toward the trunk output, so the seed noise decays by
/// (1 - rate)^steps over a full schedule while the trunk keeps injecting the
/// prompt- and sharing-determined structure.
const UPDATE_RATE: f32 = 0.25;
/// Scale of the prompt-embedding field.
const CONDITIONING_STD: f32 = 0.5;
/// Off-identity scale of the epsilon head. The head is identity-plus-noise:
/// epsilon is the (perturbed) gap between the latent and the trunk output,
/// so descending on it is a contraction toward the trunk fixed point.
const EPS_HEAD_STD: f32 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToySpec {
    pub latent_h: usize,
    pub latent_w: usize,
    pub channels: usize,
    pub layers: usize,
    pub weight_seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            latent_h: 8,
            latent_w: 8,
            channels: 4,
            layers: 2,
            weight_seed: 0xA11CE,
        }
    }
}

struct LayerWeights {
    wq: Mat,
    wk: Mat,
    wv: Mat,
    wo: Mat,
}

pub struct ToyDenoiser {
    spec: ToySpec,
    layers: Vec<LayerWeights>,
    eps_head: Mat,
    decoder: Mat,
    processor: Arc<dyn AttentionProcessor>,
}

impl ToyDenoiser {
    pub fn new(spec: ToySpec) -> Self {
        assert!(
            spec.latent_h > 0 && spec.latent_w > 0 && spec.channels > 0 && spec.layers > 0,
            "toy spec dimensions must be positive"
        );
        let c = spec.channels;
        let std = 1.0 / (c as f32).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.weight_seed);
        let layers = (0..spec.layers)
            .map(|_| LayerWeights {
                wq: Mat::randn(&mut rng, c, c, std),
                wk: Mat::randn(&mut rng, c, c, std),
                wv: Mat::randn(&mut rng, c, c, std),
                wo: Mat::randn(&mut rng, c, c, std),
            })
            .collect();
        let eps_noise = Mat::randn(&mut rng, c, c, EPS_HEAD_STD * std);
        let eps_head = Mat::from_fn(c, c, |r, col| {
            let identity = if r == col { 1.0 } else { 0.0 };
            identity + eps_noise.get(r, col)
        });
        let decoder = Mat::randn(&mut rng, c, 3, std);
        Self {
            spec,
            layers,
            eps_head,
            decoder,
            processor: Arc::new(IndependentProcessor),
        }
    }

    /// Prompt conditioning: a pseudorandom P×c field seeded by the prompt's
    /// content hash, so any one-character change moves every activation.
    fn embed_prompt(&self, text: &str) -> Mat {
        let digest = Sha256::digest(text.as_bytes());
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::randn(
            &mut rng,
            self.spec.latent_h * self.spec.latent_w,
            self.spec.channels,
            CONDITIONING_STD,
        )
    }
}

impl Denoiser for ToyDenoiser {
    fn latent_spec(&self) -> LatentSpec {
        LatentSpec {
            h: self.spec.latent_h,
            w: self.spec.latent_w,
            channels: self.spec.channels,
        }
    }

    fn layer_ids(&self) -> Vec<String> {
        (0..self.spec.layers).map(|i| format!("layer{i}")).collect()
    }

    fn install_processor(
        &mut self,
        processor: Arc<dyn AttentionProcessor>,
    ) -> Result<(), BackendError> {
        self.processor = processor;
        Ok(())
    }

    fn run(
        &self,
        prompts: &[String],
        seeds: &[u64],
        guidance: f32,
        total_steps: usize,
    ) -> Result<Vec<Mat>, BackendError> {
        if prompts.is_empty() || prompts.len() != seeds.len() {
            return Err(BackendError::InvalidConfig(format!(
                "{} prompts vs {} seeds",
                prompts.len(),
                seeds.len()
            )));
        }
        for (index, text) in prompts.iter().enumerate() {
            if text.len() > MAX_PROMPT_BYTES {
                return Err(BackendError::PromptTooLong {
                    index,
                    len: text.len(),
                    limit: MAX_PROMPT_BYTES,
                });
            }
        }
        let n = prompts.len();
        let p = self.spec.latent_h * self.spec.latent_w;
        let c = self.spec.channels;

        let mut latents: Vec<Mat> = seeds
            .iter()
            .map(|&seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Mat::randn(&mut rng, p, c, 1.0)
            })
            .collect();
        let conditionings: Vec<Mat> = prompts.iter().map(|t| self.embed_prompt(t)).collect();

        for step in 0..total_steps {
            let mut hidden: Vec<Mat> = latents
                .iter()
                .zip(&conditionings)
                .map(|(x, cond)| x.add_scaled(cond, guidance))
                .collect();

            for (layer_index, layer) in self.layers.iter().enumerate() {
                let layer_id = format!("layer{layer_index}");
                let q = hidden.iter().map(|h| h.matmul(&layer.wq)).collect();
                let k = hidden.iter().map(|h| h.matmul(&layer.wk)).collect();
                let v = hidden.iter().map(|h| h.matmul(&layer.wv)).collect();
                let blocks = FeatureBlock::new(q, k, v)?;
                let mut next = Vec::with_capacity(n);
                for image in 0..n {
                    let ctx = AttentionContext {
                        step,
                        layer_id: &layer_id,
                        image,
                    };
                    let attended = self.processor.attend(&blocks, &ctx)?;
                    next.push(attended.matmul(&layer.wo));
                }
                hidden = next;
            }

            // Epsilon is the gap between the latent and the attention-mixed
            // trunk output, so each step pulls the latent toward whatever the
            // attention layers mixed: the image's own rows under independent
            // routing, the pooled rows of every coupled image under sharing.
            for (x, h) in latents.iter_mut().zip(&hidden) {
                let gap = x.add_scaled(h, -1.0);
                let eps = gap.matmul(&self.eps_head);
                *x = x.add_scaled(&eps, -UPDATE_RATE);
            }
        }
        Ok(latents)
    }

    fn decode(&self, latent: &Mat, image_size: u32) -> Result<RgbImage, BackendError> {
        let spec = self.latent_spec();
        if latent.rows() != spec.positions() || latent.cols() != spec.channels {
            return Err(BackendError::InvalidConfig(format!(
                "latent is {}x{}, backend expects {}x{}",
                latent.rows(),
                latent.cols(),
                spec.positions(),
                spec.channels
            )));
        }
        if image_size == 0 {
            return Err(BackendError::InvalidConfig("image_size must be positive".into()));
        }
        let rgb = latent.matmul(&self.decoder);
        let (h, w) = (spec.h, spec.w);
        let size = image_size as usize;
        let img = RgbImage::from_fn(image_size, image_size, |x, y| {
            // Nearest-neighbour upsample from the latent grid.
            let cell_y = (y as usize * h / size).min(h - 1);
            let cell_x = (x as usize * w / size).min(w - 1);
            let row = cell_y * w + cell_x;
            let px = |ch: usize| {
                let v = rgb.get(row, ch).tanh();
                ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        });
        Ok(img)
    }
}
