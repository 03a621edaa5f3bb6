//! Image-level glue: encode, invert, build masks, anonymize and decode with one plugin set.

use std::collections::BTreeMap;
use std::sync::Arc;

use image::RgbImage;

use crate::backbones::{
    AttributeScorer, FaceParser, FeatureExtractor, IdentityEmbedder, LatentCodec, NoisePredictor,
    PluginKind, PluginManifest, PluginRegistry, ToyAttentionBackbone, ToyCodec, ToyFaceParser,
    ToyPointwiseBackbone, ToyStatsEmbedder, TOY_EMBED_DIM,
};
use crate::conditioning::{extract_embedding, IdentityEmbedding};
use crate::denoiser::{anonymize, AnonymizationConfig, AnonymizeInputs, GuidedStepTrace};
use crate::error::{Error, Result};
use crate::inversion::{invert, InversionRecord};
use crate::masks::{preset_mask, MaskPreset, RegionMask, SegmentationMap};
use crate::schedule::NoiseSchedule;
use crate::tensor::{LatentShape, LatentTensor};

/// One plugin of each kind needed to run the pipeline on images.
#[derive(Clone)]
pub struct Stack {
    pub backbone: Arc<dyn NoisePredictor>,
    pub codec: Arc<dyn LatentCodec>,
    pub embedder: Arc<dyn IdentityEmbedder>,
    pub parser: Arc<dyn FaceParser>,
    pub scorers: Vec<Arc<dyn AttributeScorer>>,
    pub features: Option<Arc<dyn FeatureExtractor>>,
}

impl Stack {
    /// Toy stack for `width`×`height` images with the named toy backbone.
    pub fn toy(backbone: &str, width: u32, height: u32, seed: u64) -> Result<Self> {
        let codec = ToyCodec::new(2)?;
        let shape = codec.latent_shape_for(width, height)?;
        let backbone: Arc<dyn NoisePredictor> = match backbone {
            "toy-pointwise" => Arc::new(ToyPointwiseBackbone::new(seed, shape, TOY_EMBED_DIM)),
            "toy-attention" => Arc::new(ToyAttentionBackbone::new(seed, shape, TOY_EMBED_DIM)),
            other => return Err(Error::Plugin(format!("no toy backbone named `{other}`"))),
        };
        let embedder = Arc::new(ToyStatsEmbedder::new(seed));
        Ok(Self {
            backbone,
            codec: Arc::new(codec),
            embedder: embedder.clone(),
            parser: Arc::new(ToyFaceParser),
            scorers: Vec::new(),
            features: Some(embedder),
        })
    }

    /// Resolves each plugin by name from a registry.
    pub fn from_registry(
        reg: &PluginRegistry,
        backbone: &str,
        codec: &str,
        embedder: &str,
        parser: &str,
        scorers: &[String],
    ) -> Result<Self> {
        let embedder_arc = reg.embedder(embedder)?;
        // Fréchet features come from the bundled statistics extractor when the
        // embedder is the toy one; external stacks attach none by default.
        let features: Option<Arc<dyn FeatureExtractor>> = match reg.manifest(PluginKind::Embedder, embedder) {
            Some(m) if m.launch.to_string() == "builtin:toy-stats" => {
                Some(Arc::new(ToyStatsEmbedder::with_dim(m.seed, embedder_arc.dim())))
            }
            _ => None,
        };
        Ok(Self {
            backbone: reg.backbone(backbone)?,
            codec: reg.codec(codec)?,
            embedder: embedder_arc,
            parser: reg.parser(parser)?,
            scorers: scorers.iter().map(|s| reg.scorer(s)).collect::<Result<_>>()?,
            features,
        })
    }

    pub fn with_scorers(mut self, scorers: Vec<Arc<dyn AttributeScorer>>) -> Self {
        self.scorers = scorers;
        self
    }

    /// Fingerprint of every plugin, keyed by role.
    pub fn fingerprints(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("backbone".into(), self.backbone.fingerprint());
        m.insert("codec".into(), self.codec.fingerprint());
        m.insert("embedder".into(), self.embedder.fingerprint());
        m.insert("parser".into(), self.parser.name().to_string());
        for s in &self.scorers {
            m.insert(format!("scorer.{}", s.kind()), s.name().to_string());
        }
        m
    }

    pub fn embed(&self, image: &RgbImage) -> Result<IdentityEmbedding> {
        extract_embedding(image, self.embedder.as_ref())
    }

    pub fn null_embedding(&self) -> IdentityEmbedding {
        IdentityEmbedding::null(self.backbone.info().embedding_dim)
    }

    /// Encodes and inverts under the null condition.
    pub fn invert_image(&self, image: &RgbImage, sched: &NoiseSchedule, seed: u64) -> Result<InversionRecord> {
        let x0 = self.codec.encode(image)?;
        invert(&x0, self.backbone.as_ref(), sched, &self.null_embedding(), seed)
    }

    pub fn segment(&self, image: &RgbImage) -> Result<SegmentationMap> {
        let seg = self.parser.parse(image)?;
        if seg.width() != image.width() as usize || seg.height() != image.height() as usize {
            return Err(Error::Contract(format!(
                "parser `{}` returned a {}x{} map for a {}x{} image",
                self.parser.name(),
                seg.width(),
                seg.height(),
                image.width(),
                image.height()
            )));
        }
        Ok(seg)
    }

    /// `(user mask for the preset, whole-face mask)` at latent resolution.
    pub fn preset_masks(&self, seg: &SegmentationMap, preset: MaskPreset, latent: &LatentTensor) -> Result<(RegionMask, RegionMask)> {
        let (w, h) = (latent.shape().width, latent.shape().height);
        Ok((
            preset_mask(seg, preset, w, h)?,
            preset_mask(seg, MaskPreset::WholeFace, w, h)?,
        ))
    }

    /// Anonymizes `image` given its inversion. `user_mask` overrides the preset when set.
    pub fn anonymize_image(
        &self,
        image: &RgbImage,
        record: &InversionRecord,
        cfg: &AnonymizationConfig,
        sched: &NoiseSchedule,
        user_mask: Option<&RegionMask>,
        embedding: Option<&IdentityEmbedding>,
        with_trace: bool,
    ) -> Result<Anonymized> {
        let seg = self.segment(image)?;
        let (preset, face) = self.preset_masks(&seg, cfg.mask_preset, record.x0())?;
        let user = user_mask.unwrap_or(&preset);
        let embedding = match embedding {
            Some(e) => e.clone(),
            None if cfg.lambda_id == 0.0 => self.null_embedding(),
            None => self.embed(image)?,
        };
        let out = anonymize(
            &AnonymizeInputs {
                record,
                config: cfg,
                user_mask: user,
                face_mask: &face,
                embedding: &embedding,
                backbone: self.backbone.as_ref(),
                schedule: sched,
            },
            with_trace,
        )?;
        Ok(Anonymized {
            image: self.codec.decode(&out.latent)?,
            latent: out.latent,
            trace: out.trace,
        })
    }
}

/// Environment variable holding the `:`-separated plugin manifest search path.
pub const PLUGIN_PATH_ENV: &str = "NULLFACE_PLUGIN_PATH";

/// Plugin names making up a [`Stack`], resolved against the bundled toy plugins and
/// any manifests on the search path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackSpec {
    pub backbone: String,
    pub codec: String,
    pub embedder: String,
    pub parser: String,
    pub scorers: Vec<String>,
    /// Weight seed of the bundled toy plugins.
    pub plugin_seed: u64,
    pub plugin_path: Option<String>,
}

impl Default for StackSpec {
    fn default() -> Self {
        Self {
            backbone: "toy-pointwise".into(),
            codec: "toy-codec".into(),
            embedder: "toy-stats".into(),
            parser: "toy-parser".into(),
            scorers: Vec::new(),
            plugin_seed: 0,
            plugin_path: None,
        }
    }
}

impl StackSpec {
    /// Search path from [`PLUGIN_PATH_ENV`].
    pub fn with_env_plugin_path(mut self) -> Self {
        self.plugin_path = std::env::var(PLUGIN_PATH_ENV).ok().filter(|p| !p.is_empty());
        self
    }

    /// Builds the stack for `width`×`height` images. Only the requested backbone is
    /// instantiated; bundled toy backbones take the codec's latent shape.
    pub fn build(&self, width: u32, height: u32) -> Result<Stack> {
        let mut reg = PluginRegistry::new();
        // Non-backbone builtins ignore the latent shape.
        for m in PluginManifest::builtins(LatentShape::new(1, 1, 1)?, self.plugin_seed) {
            if m.kind != PluginKind::Backbone {
                reg.register(m)?;
            }
        }
        if let Some(path) = &self.plugin_path {
            reg.load_search_path(path)?;
        }
        let shape = reg.codec(&self.codec)?.latent_shape_for(width, height)?;
        if reg.manifest(PluginKind::Backbone, &self.backbone).is_none() {
            if let Some(m) = PluginManifest::builtins(shape, self.plugin_seed)
                .into_iter()
                .find(|m| m.kind == PluginKind::Backbone && m.name == self.backbone)
            {
                reg.register(m)?;
            }
        }
        let stack = Stack::from_registry(&reg, &self.backbone, &self.codec, &self.embedder, &self.parser, &self.scorers)?;
        let declared = stack.backbone.info().latent_shape;
        if declared != shape {
            return Err(Error::Contract(format!(
                "backbone `{}` expects {declared} latents but codec `{}` produces {shape} for {width}x{height} images",
                self.backbone, self.codec
            )));
        }
        if stack.embedder.dim() != stack.backbone.info().embedding_dim {
            return Err(Error::Contract(format!(
                "embedder `{}` has dimension {} but backbone `{}` expects {}",
                self.embedder,
                stack.embedder.dim(),
                self.backbone,
                stack.backbone.info().embedding_dim
            )));
        }
        Ok(stack)
    }
}

#[derive(Debug, Clone)]
pub struct Anonymized {
    pub image: RgbImage,
    pub latent: LatentTensor,
    pub trace: Option<GuidedStepTrace>,
}

/// Seed of the `index`-th image in a batch run with base seed `seed`.
pub fn derive_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
