//! Plugin contracts for the noise predictor, latent codec, identity embedder,
//! face parser and attribute scorers, plus deterministic toy implementations.

mod plugin;
pub mod process;
pub(crate) mod toy;

use std::fmt;

use image::RgbImage;

use crate::conditioning::IdentityEmbedding;
use crate::error::Result;
use crate::masks::SegmentationMap;
use crate::tensor::{LatentShape, LatentTensor};

pub use plugin::{
    attach, probe_backbone, register_external_backend, ConcurrencyLimited, Launch, PluginHandle,
    PluginKind, PluginManifest, PluginRegistry, Serialized,
};
pub use process::{serve_plugin, ProcessBackbone, ProcessEmbedder};
pub use toy::{
    toy_face_layout, ToyAttentionBackbone, ToyCodec, ToyFaceParser, ToyPointwiseBackbone,
    ToyScorer, ToyStatsEmbedder, TOY_EMBED_DIM,
};

/// What the sampler tells the backbone about the current step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timestep {
    pub t: usize,
    pub steps: usize,
    pub alpha_bar: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneInfo {
    pub name: String,
    pub version: String,
    pub latent_shape: LatentShape,
    pub embedding_dim: usize,
    pub deterministic: bool,
    /// Allowed max-abs difference between two identical calls (0 for bit-exact).
    pub tolerance: f32,
    pub max_concurrency: usize,
}

/// Noise predictor ε_θ(x_t, t, c) with an adapter scale for the identity branch.
pub trait NoisePredictor: Send + Sync {
    fn info(&self) -> &BackboneInfo;

    /// Stable identifier of the predictor and its weights.
    fn fingerprint(&self) -> String;

    fn predict(
        &self,
        x: &LatentTensor,
        step: Timestep,
        condition: &IdentityEmbedding,
        lambda_img: f32,
    ) -> Result<LatentTensor>;

    /// Conditional and unconditional predictions; may be batched by implementations.
    fn predict_pair(
        &self,
        x: &LatentTensor,
        step: Timestep,
        condition: &IdentityEmbedding,
        null: &IdentityEmbedding,
        lambda_img: f32,
    ) -> Result<(LatentTensor, LatentTensor)> {
        Ok((
            self.predict(x, step, condition, lambda_img)?,
            self.predict(x, step, null, lambda_img)?,
        ))
    }
}

pub trait LatentCodec: Send + Sync {
    fn name(&self) -> &str;
    fn fingerprint(&self) -> String;
    fn scale_factor(&self) -> usize;
    fn latent_shape_for(&self, width: u32, height: u32) -> Result<LatentShape>;
    fn encode(&self, image: &RgbImage) -> Result<LatentTensor>;
    fn decode(&self, latent: &LatentTensor) -> Result<RgbImage>;
}

pub trait IdentityEmbedder: Send + Sync {
    fn name(&self) -> &str;
    fn fingerprint(&self) -> String;
    fn dim(&self) -> usize;
    /// Whether concurrent calls are allowed; non-reentrant embedders get serialized.
    fn reentrant(&self) -> bool {
        true
    }
    /// Raw (unnormalized) embedding.
    fn embed(&self, image: &RgbImage) -> Result<Vec<f32>>;
}

pub trait FaceParser: Send + Sync {
    fn name(&self) -> &str;
    fn parse(&self, image: &RgbImage) -> Result<SegmentationMap>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttributeKind {
    /// Head orientation angles in degrees.
    Pose,
    /// Gaze angles in degrees.
    Gaze,
    /// Expression coefficient vector.
    Expression,
    /// Single image-quality score.
    Quality,
}

impl AttributeKind {
    pub const ALL: [AttributeKind; 4] = [
        AttributeKind::Pose,
        AttributeKind::Gaze,
        AttributeKind::Expression,
        AttributeKind::Quality,
    ];
}

impl fmt::Display for AttributeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttributeKind::Pose => "pose",
            AttributeKind::Gaze => "gaze",
            AttributeKind::Expression => "expression",
            AttributeKind::Quality => "quality",
        })
    }
}

pub trait AttributeScorer: Send + Sync {
    fn name(&self) -> &str;
    fn kind(&self) -> AttributeKind;
    fn score(&self, image: &RgbImage) -> Result<Vec<f64>>;
}

/// Feature vectors for Fréchet distance.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn features(&self, image: &RgbImage) -> Result<Vec<f64>>;
}
