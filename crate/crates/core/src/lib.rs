//! Training-free generation of coherent image sequences from textual
//! instructions.
//!
//! The pipeline has two phases. First, an LLM turns a goal into a structured
//! plan: per-step actions, post-action scene states, object continuity tags,
//! and a state-similarity matrix ([`plan`], [`recaption`]). Second, a
//! diffusion-style backend generates one image per step while a shared
//! self-attention kernel lets each image borrow keys and values from the
//! others, gated by the similarity matrix and per-object region masks
//! ([`attention`], [`masks`], [`backend`]). A model-judge harness compares
//! candidate sequences pairwise ([`eval`]), and [`pipeline`] wires the phases
//! together behind a run manifest.
//!
//! Everything runs deterministically at desk scale: the backend ships a tiny
//! seeded denoiser, and the LLM / segmentation / judge adapters all have
//! fixture implementations that replay recorded responses.

pub mod attention;
pub mod backend;
pub mod client;
pub mod eval;
pub mod masks;
pub mod mat;
pub mod pipeline;
pub mod plan;
pub mod recaption;

pub use mat::Mat;
