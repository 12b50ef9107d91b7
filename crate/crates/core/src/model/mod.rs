//! Desk-scale reference implementation of the text-prompted segmentation model.
//!
//! Pipeline: a patch-embedding image encoder and a token-embedding text encoder
//! feed a joint interaction block (learnable queries cross-attend to image tokens,
//! then self-attend jointly with text tokens, then a two-layer FFN). The first `n`
//! rows become semantic queries that are projected into mask embeddings (three-layer
//! MLP) and class embeddings (one linear layer). Candidate mask logits are dot
//! products of mask embeddings with the pixel feature map; the candidate whose class
//! embedding has the highest cosine similarity with the prompt's final token is
//! returned.
//!
//! Every gradient is written out by hand; [`gradcheck`] compares them to central
//! finite differences.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod network;
pub mod text;
pub mod train;

pub use gradcheck::{gradient_check, GradCheckReport, TensorCheck};
pub use layers::{Activation, Attention, Linear};
pub use loss::{segmentation_loss, sigmoid, LossBreakdown, LossConfig};
pub use network::{
    cross_attention, decode_candidate_masks, encode_image, encode_text, feed_forward,
    image_tensor, project_embeddings, select_mask, self_attention, upsample_bilinear,
    FeatureMatrix, FeatureRole, ModelParams, PixelFeatureMap, Prediction, SegModel,
};
pub use text::Vocab;
pub use gradcheck::gradient_check_with_step;
pub use train::{train, train_with, EpochStats, Sample, TrainConfig, TrainReport};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("image dims {0}x{1} not divisible by patch size {2}")]
    IndivisibleDims(usize, usize, usize),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("prompt has {0} tokens, more than the {1} supported positions")]
    PromptTooLong(usize, usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("zero vector has no cosine similarity")]
    ZeroVector,
    #[error("training diverged at epoch {0} (loss {1})")]
    DivergedLoss(usize, f64),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channel width `d` shared by every token stream.
    pub dim: usize,
    /// Number of learnable queries `n`.
    pub queries: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Edge length `P` of the non-overlapping image patches.
    pub patch_size: usize,
    pub ffn_hidden: usize,
    /// Number of learned text positions.
    pub max_len: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            queries: 16,
            heads: 2,
            head_dim: 8,
            patch_size: 4,
            ffn_hidden: 32,
            max_len: 16,
            activation: Activation::Relu,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            self.dim,
            self.queries,
            self.heads,
            self.head_dim,
            self.patch_size,
            self.ffn_hidden,
            self.max_len,
        ];
        if fields.contains(&0) {
            return Err(ModelError::InvalidConfig(format!(
                "all sizes must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}
