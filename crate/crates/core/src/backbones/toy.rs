//! Deterministic toy plugins that run the full pipeline without model weights.

use image::{Rgb, RgbImage};
use nalgebra::DMatrix;

use super::{
    AttributeKind, AttributeScorer, BackboneInfo, FaceParser, FeatureExtractor, IdentityEmbedder,
    LatentCodec, NoisePredictor, Timestep,
};
use crate::conditioning::{
    decoupled_attention, scaled_dot_product_attention, AdapterParams, AttentionContext,
    IdentityEmbedding,
};
use crate::error::{Error, Result};
use crate::masks::{Region, SegmentationMap};
use crate::noise::NoiseSource;
use crate::tensor::{LatentShape, LatentTensor};

pub const TOY_EMBED_DIM: usize = 64;

/// Spatial grid of the pointwise backbone's identity pattern, per axis.
const IDENTITY_BLOCKS: usize = 4;

fn check_condition(info: &BackboneInfo, x: &LatentTensor, cond: &IdentityEmbedding) -> Result<()> {
    x.ensure_shape(info.latent_shape)?;
    if cond.dim() != info.embedding_dim {
        return Err(Error::ShapeMismatch {
            expected: format!("embedding dimension {}", info.embedding_dim),
            found: format!("embedding dimension {}", cond.dim()),
        });
    }
    Ok(())
}

fn channel_gains(noise: &NoiseSource, channels: usize) -> Vec<f64> {
    noise.uniform_vec(0, channels, 0.75, 1.25)
}

// ---------------------------------------------------------------------------
// Pointwise backbone
// ---------------------------------------------------------------------------

/// `ε(x)[c, y, x] = s_t · (a_c · x[c, y, x] + λ_img · g · ⟨w[c, block(y, x)], cond⟩)`
/// with `s_t = sqrt(1 − ᾱ_t)`. Each cell only sees its own latent value, so masks act
/// exactly cell by cell.
#[derive(Debug, Clone)]
pub struct ToyPointwiseBackbone {
    info: BackboneInfo,
    seed: u64,
    gain: f64,
    channel_gain: Vec<f64>,
    /// `[channel][block][dim]`, flattened.
    identity_weights: Vec<f32>,
}

impl ToyPointwiseBackbone {
    pub const DEFAULT_GAIN: f64 = 0.5;

    pub fn new(seed: u64, shape: LatentShape, embedding_dim: usize) -> Self {
        Self::with_gain(seed, shape, embedding_dim, Self::DEFAULT_GAIN)
    }

    pub fn with_gain(seed: u64, shape: LatentShape, embedding_dim: usize, gain: f64) -> Self {
        let noise = NoiseSource::new("toy-pointwise", seed);
        let blocks = IDENTITY_BLOCKS * IDENTITY_BLOCKS;
        Self {
            info: BackboneInfo {
                name: "toy-pointwise".into(),
                version: "1".into(),
                latent_shape: shape,
                embedding_dim,
                deterministic: true,
                tolerance: 0.0,
                max_concurrency: usize::MAX,
            },
            seed,
            gain,
            channel_gain: channel_gains(&noise, shape.channels),
            identity_weights: noise.normal_vec(1, shape.channels * blocks * embedding_dim),
        }
    }

    fn block_of(&self, y: usize, x: usize) -> usize {
        let s = self.info.latent_shape;
        let by = y * IDENTITY_BLOCKS / s.height;
        let bx = x * IDENTITY_BLOCKS / s.width;
        by * IDENTITY_BLOCKS + bx
    }
}

impl NoisePredictor for ToyPointwiseBackbone {
    fn info(&self) -> &BackboneInfo {
        &self.info
    }

    fn fingerprint(&self) -> String {
        format!(
            "toy-pointwise:v1:seed={}:shape={}:dim={}:gain={:?}",
            self.seed, self.info.latent_shape, self.info.embedding_dim, self.gain
        )
    }

    fn predict(
        &self,
        x: &LatentTensor,
        step: Timestep,
        condition: &IdentityEmbedding,
        lambda_img: f32,
    ) -> Result<LatentTensor> {
        check_condition(&self.info, x, condition)?;
        let shape = self.info.latent_shape;
        let dim = self.info.embedding_dim;
        let blocks = IDENTITY_BLOCKS * IDENTITY_BLOCKS;
        let s = (1.0 - step.alpha_bar).sqrt();
        let cond = condition.vector();
        let dots: Vec<f64> = self
            .identity_weights
            .chunks_exact(dim)
            .map(|w| w.iter().zip(cond).map(|(&a, &b)| a as f64 * b as f64).sum())
            .collect();
        debug_assert_eq!(dots.len(), shape.channels * blocks);
        let id_scale = lambda_img as f64 * self.gain;
        let data = x.data();
        let mut out = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            let a = self.channel_gain[c];
            for y in 0..shape.height {
                for xx in 0..shape.width {
                    let v = data[(c * shape.height + y) * shape.width + xx] as f64;
                    let id = dots[c * blocks + self.block_of(y, xx)];
                    out.push(s * (a * v + id_scale * id));
                }
            }
        }
        LatentTensor::from_f64_iter(shape, out.into_iter(), "toy-pointwise", step.t)
    }
}

// ---------------------------------------------------------------------------
// Attention backbone
// ---------------------------------------------------------------------------

const HIDDEN: usize = 16;
const KEY_DIM: usize = 8;
const VALUE_DIM: usize = 8;
const CTX_DIM: usize = 16;
const TEXT_TOKENS: usize = 4;
const IMAGE_TOKENS: usize = 4;

/// Two-layer toy network: a per-cell MLP produces queries, which attend to a fixed
/// "empty prompt" text context and to image tokens projected from the identity
/// embedding through decoupled cross-attention.
#[derive(Debug, Clone)]
pub struct ToyAttentionBackbone {
    info: BackboneInfo,
    seed: u64,
    gain: f64,
    channel_gain: Vec<f64>,
    w_in: DMatrix<f64>,
    b_in: Vec<f64>,
    w_time: Vec<f64>,
    w_query: DMatrix<f64>,
    text_tokens: DMatrix<f64>,
    w_key_text: DMatrix<f64>,
    w_value_text: DMatrix<f64>,
    /// Rows map the embedding to `IMAGE_TOKENS · CTX_DIM` token entries.
    w_image_tokens: DMatrix<f64>,
    w_key_image: DMatrix<f64>,
    w_value_image: DMatrix<f64>,
    w_out: DMatrix<f64>,
}

fn seeded_matrix(noise: &NoiseSource, stream: u64, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    let v = noise.normal_vec(stream, rows * cols);
    DMatrix::from_row_iterator(rows, cols, v.into_iter().map(|x| x as f64 * scale))
}

impl ToyAttentionBackbone {
    pub const DEFAULT_GAIN: f64 = 0.1;

    pub fn new(seed: u64, shape: LatentShape, embedding_dim: usize) -> Self {
        let n = NoiseSource::new("toy-attention", seed);
        let c = shape.channels;
        let inv = |d: usize| 1.0 / (d as f64).sqrt();
        Self {
            info: BackboneInfo {
                name: "toy-attention".into(),
                version: "1".into(),
                latent_shape: shape,
                embedding_dim,
                deterministic: true,
                tolerance: 0.0,
                max_concurrency: usize::MAX,
            },
            seed,
            gain: Self::DEFAULT_GAIN,
            channel_gain: channel_gains(&n, c),
            w_in: seeded_matrix(&n, 1, HIDDEN, c, inv(c)),
            b_in: n.normal_vec(2, HIDDEN).into_iter().map(|v| v as f64 * 0.1).collect(),
            w_time: n.normal_vec(3, HIDDEN).into_iter().map(f64::from).collect(),
            w_query: seeded_matrix(&n, 4, KEY_DIM, HIDDEN, 2.0 * inv(HIDDEN)),
            text_tokens: seeded_matrix(&n, 5, TEXT_TOKENS, CTX_DIM, 1.0),
            w_key_text: seeded_matrix(&n, 6, CTX_DIM, KEY_DIM, inv(CTX_DIM)),
            w_value_text: seeded_matrix(&n, 7, CTX_DIM, VALUE_DIM, inv(CTX_DIM)),
            w_image_tokens: seeded_matrix(&n, 8, IMAGE_TOKENS * CTX_DIM, embedding_dim, 1.0),
            w_key_image: seeded_matrix(&n, 9, CTX_DIM, KEY_DIM, inv(CTX_DIM)),
            w_value_image: seeded_matrix(&n, 10, CTX_DIM, VALUE_DIM, inv(CTX_DIM)),
            w_out: seeded_matrix(&n, 11, c, VALUE_DIM, inv(VALUE_DIM)),
        }
    }

    fn queries(&self, x: &LatentTensor, s: f64) -> DMatrix<f64> {
        let shape = self.info.latent_shape;
        let cells = shape.plane();
        let data = x.data();
        let mut hidden = DMatrix::<f64>::zeros(cells, HIDDEN);
        for cell in 0..cells {
            for h in 0..HIDDEN {
                let mut acc = self.b_in[h] + self.w_time[h] * s;
                for c in 0..shape.channels {
                    acc += self.w_in[(h, c)] * data[c * cells + cell] as f64;
                }
                hidden[(cell, h)] = acc.tanh();
            }
        }
        hidden * self.w_query.transpose()
    }

    fn text_context(&self) -> Result<AttentionContext> {
        AttentionContext::new(
            &self.text_tokens * &self.w_key_text,
            &self.text_tokens * &self.w_value_text,
        )
    }

    fn image_context(&self, cond: &IdentityEmbedding) -> Result<AttentionContext> {
        let v = DMatrix::from_iterator(cond.dim(), 1, cond.vector().iter().map(|&x| x as f64));
        let flat = &self.w_image_tokens * v;
        let tokens = DMatrix::from_row_iterator(IMAGE_TOKENS, CTX_DIM, flat.iter().cloned());
        AttentionContext::new(&tokens * &self.w_key_image, &tokens * &self.w_value_image)
    }

    fn finish(&self, x: &LatentTensor, z: &DMatrix<f64>, s: f64, t: usize) -> Result<LatentTensor> {
        let shape = self.info.latent_shape;
        let cells = shape.plane();
        let projected = z * self.w_out.transpose();
        let data = x.data();
        let values = (0..shape.len()).map(|i| {
            let (c, cell) = (i / cells, i % cells);
            s * (self.channel_gain[c] * data[i] as f64 + self.gain * projected[(cell, c)])
        });
        LatentTensor::from_f64_iter(shape, values, "toy-attention", t)
    }

    /// Same network with the image branch removed entirely.
    pub fn predict_text_only(&self, x: &LatentTensor, step: Timestep) -> Result<LatentTensor> {
        x.ensure_shape(self.info.latent_shape)?;
        let s = (1.0 - step.alpha_bar).sqrt();
        let z = scaled_dot_product_attention(&self.queries(x, s), &self.text_context()?)?;
        self.finish(x, &z, s, step.t)
    }
}

impl NoisePredictor for ToyAttentionBackbone {
    fn info(&self) -> &BackboneInfo {
        &self.info
    }

    fn fingerprint(&self) -> String {
        format!(
            "toy-attention:v1:seed={}:shape={}:dim={}:gain={:?}",
            self.seed, self.info.latent_shape, self.info.embedding_dim, self.gain
        )
    }

    fn predict(
        &self,
        x: &LatentTensor,
        step: Timestep,
        condition: &IdentityEmbedding,
        lambda_img: f32,
    ) -> Result<LatentTensor> {
        check_condition(&self.info, x, condition)?;
        let params = AdapterParams::new(lambda_img)?;
        let s = (1.0 - step.alpha_bar).sqrt();
        let z = decoupled_attention(
            &self.queries(x, s),
            &self.text_context()?,
            &self.image_context(condition)?,
            params,
        )?;
        self.finish(x, &z, s, step.t)
    }
}

// ---------------------------------------------------------------------------
// Codec
// ---------------------------------------------------------------------------

/// Exact pixel-unshuffle codec: each `f×f` RGB block becomes `3·f²` latent channels
/// with values `p / 127.5 − 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyCodec {
    factor: usize,
}

impl ToyCodec {
    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::invalid("codec scale factor must be positive"));
        }
        Ok(Self { factor })
    }

    pub fn for_latent_shape(shape: LatentShape) -> Result<Self> {
        let f = (1..=16)
            .find(|f| 3 * f * f == shape.channels)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "toy codec needs 3·f² latent channels, got {}",
                    shape.channels
                ))
            })?;
        Self::new(f)
    }

    /// Encodes interleaved RGB float pixels in `[0, 255]`.
    pub fn encode_pixels(&self, width: usize, height: usize, pixels: &[f32]) -> Result<LatentTensor> {
        if pixels.len() != width * height * 3 {
            return Err(Error::ShapeMismatch {
                expected: format!("{} RGB values", width * height * 3),
                found: format!("{}", pixels.len()),
            });
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("non-finite pixel value"));
        }
        let shape = self.latent_shape_for(width as u32, height as u32)?;
        let f = self.factor;
        let mut data = vec![0.0f32; shape.len()];
        for y in 0..height {
            for x in 0..width {
                for color in 0..3 {
                    let c = color * f * f + (y % f) * f + (x % f);
                    let idx = (c * shape.height + y / f) * shape.width + x / f;
                    data[idx] = pixels[(y * width + x) * 3 + color] / 127.5 - 1.0;
                }
            }
        }
        LatentTensor::from_vec(shape, data)
    }
}

impl LatentCodec for ToyCodec {
    fn name(&self) -> &str {
        "toy-codec"
    }

    fn fingerprint(&self) -> String {
        format!("toy-codec:v1:f={}", self.factor)
    }

    fn scale_factor(&self) -> usize {
        self.factor
    }

    fn latent_shape_for(&self, width: u32, height: u32) -> Result<LatentShape> {
        let f = self.factor as u32;
        if width == 0 || height == 0 || width % f != 0 || height % f != 0 {
            return Err(Error::ShapeMismatch {
                expected: format!("image sides divisible by {f}"),
                found: format!("{width}x{height}"),
            });
        }
        LatentShape::new(
            3 * self.factor * self.factor,
            (height / f) as usize,
            (width / f) as usize,
        )
    }

    fn encode(&self, image: &RgbImage) -> Result<LatentTensor> {
        let pixels: Vec<f32> = image.as_raw().iter().map(|&p| p as f32).collect();
        self.encode_pixels(image.width() as usize, image.height() as usize, &pixels)
    }

    fn decode(&self, latent: &LatentTensor) -> Result<RgbImage> {
        let shape = latent.shape();
        let f = self.factor;
        if shape.channels != 3 * f * f {
            return Err(Error::ShapeMismatch {
                expected: format!("{} latent channels", 3 * f * f),
                found: shape.to_string(),
            });
        }
        let (w, h) = (shape.width * f, shape.height * f);
        let data = latent.data();
        let mut img = RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let mut px = [0u8; 3];
                for (color, slot) in px.iter_mut().enumerate() {
                    let c = color * f * f + (y % f) * f + (x % f);
                    let v = data[(c * shape.height + y / f) * shape.width + x / f];
                    *slot = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
                }
                img.put_pixel(x as u32, y as u32, Rgb(px));
            }
        }
        Ok(img)
    }
}

// ---------------------------------------------------------------------------
// Embedder
// ---------------------------------------------------------------------------

const STATS_GRID: usize = 4;
const STATS_FEATURES: usize = STATS_GRID * STATS_GRID * 3 * 2;

/// `toy-stats`: seeded projection of per-patch channel means and deviations.
#[derive(Debug, Clone)]
pub struct ToyStatsEmbedder {
    seed: u64,
    dim: usize,
    projection: Vec<f32>,
}

impl ToyStatsEmbedder {
    pub fn new(seed: u64) -> Self {
        Self::with_dim(seed, TOY_EMBED_DIM)
    }

    pub fn with_dim(seed: u64, dim: usize) -> Self {
        let scale = 1.0 / (STATS_FEATURES as f32).sqrt();
        let projection = NoiseSource::new("toy-stats", seed)
            .normal_vec(0, dim * STATS_FEATURES)
            .into_iter()
            .map(|v| v * scale)
            .collect();
        Self {
            seed,
            dim,
            projection,
        }
    }

    /// Per-patch `(mean − 127.5) / 127.5` and `std / 127.5` for each channel.
    pub fn patch_stats(image: &RgbImage) -> Result<Vec<f64>> {
        let (w, h) = (image.width() as usize, image.height() as usize);
        if w < STATS_GRID || h < STATS_GRID {
            return Err(Error::Image(format!(
                "image {w}x{h} smaller than the {STATS_GRID}x{STATS_GRID} statistics grid"
            )));
        }
        let mut out = Vec::with_capacity(STATS_FEATURES);
        for gy in 0..STATS_GRID {
            for gx in 0..STATS_GRID {
                let (y0, y1) = (gy * h / STATS_GRID, (gy + 1) * h / STATS_GRID);
                let (x0, x1) = (gx * w / STATS_GRID, (gx + 1) * w / STATS_GRID);
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                for c in 0..3 {
                    let (mut s, mut s2) = (0.0f64, 0.0f64);
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let v = image.get_pixel(x as u32, y as u32)[c] as f64;
                            s += v;
                            s2 += v * v;
                        }
                    }
                    let mean = s / n;
                    let var = (s2 / n - mean * mean).max(0.0);
                    out.push((mean - 127.5) / 127.5);
                    out.push(var.sqrt() / 127.5);
                }
            }
        }
        Ok(out)
    }
}

fn luma_std(image: &RgbImage) -> f64 {
    let n = (image.width() * image.height()) as f64;
    let lumas: Vec<f64> = image
        .pixels()
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect();
    let mean = lumas.iter().sum::<f64>() / n;
    (lumas.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n).sqrt()
}

impl IdentityEmbedder for ToyStatsEmbedder {
    fn name(&self) -> &str {
        "toy-stats"
    }

    fn fingerprint(&self) -> String {
        format!("toy-stats:v1:seed={}:dim={}", self.seed, self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, image: &RgbImage) -> Result<Vec<f32>> {
        let feats = Self::patch_stats(image)?;
        if luma_std(image) < 1.0 {
            return Err(Error::FaceNotFound("image has no visible structure".into()));
        }
        Ok(self
            .projection
            .chunks_exact(STATS_FEATURES)
            .map(|row| {
                row.iter()
                    .zip(&feats)
                    .map(|(&p, &f)| p as f64 * f)
                    .sum::<f64>() as f32
            })
            .collect())
    }
}

impl FeatureExtractor for ToyStatsEmbedder {
    fn name(&self) -> &str {
        "toy-stats"
    }

    fn features(&self, image: &RgbImage) -> Result<Vec<f64>> {
        Self::patch_stats(image)
    }
}

// ---------------------------------------------------------------------------
// Face parser
// ---------------------------------------------------------------------------

fn in_ellipse(u: f64, v: f64, cu: f64, cv: f64, ru: f64, rv: f64) -> bool {
    ((u - cu) / ru).powi(2) + ((v - cv) / rv).powi(2) <= 1.0
}

fn in_box(u: f64, v: f64, u0: f64, u1: f64, v0: f64, v1: f64) -> bool {
    (u0..=u1).contains(&u) && (v0..=v1).contains(&v)
}

/// Geometry shared by the toy parser and the toy face generator, in image
/// coordinates normalized to `[0, 1]` (pixel centers).
pub(crate) mod layout {
    pub const FACE: (f64, f64, f64, f64) = (0.5, 0.56, 0.30, 0.36);
    pub const HEAD: (f64, f64, f64, f64) = (0.5, 0.46, 0.37, 0.42);
    pub const HAIRLINE: f64 = 0.36;
    pub const EARS: [(f64, f64, f64, f64); 2] = [(0.19, 0.56, 0.05, 0.09), (0.81, 0.56, 0.05, 0.09)];
    pub const EYES: [(f64, f64); 2] = [(0.38, 0.47), (0.62, 0.47)];
    pub const EYE_RADIUS: f64 = 0.06;
    pub const BROWS: [(f64, f64, f64, f64); 2] = [(0.30, 0.46, 0.37, 0.40), (0.54, 0.70, 0.37, 0.40)];
    /// Apex then base corners.
    pub const NOSE: [(f64, f64); 3] = [(0.5, 0.50), (0.43, 0.64), (0.57, 0.64)];
    pub const MOUTH: (f64, f64, f64, f64) = (0.39, 0.61, 0.70, 0.76);
}

fn in_triangle(u: f64, v: f64, tri: [(f64, f64); 3]) -> bool {
    let sign = |(x1, y1): (f64, f64), (x2, y2): (f64, f64)| (u - x2) * (y1 - y2) - (x1 - x2) * (v - y2);
    let d1 = sign(tri[0], tri[1]);
    let d2 = sign(tri[1], tri[2]);
    let d3 = sign(tri[2], tri[0]);
    let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(neg && pos)
}

/// Label of the fixed toy layout at normalized coordinates.
pub(crate) fn layout_label(u: f64, v: f64) -> Region {
    use layout::*;
    let (fu, fv, fru, frv) = FACE;
    if in_ellipse(u, v, fu, fv, fru, frv) {
        if EYES
            .iter()
            .enumerate()
            .any(|(i, &(eu, ev))| i == 0 && in_ellipse(u, v, eu, ev, EYE_RADIUS, EYE_RADIUS))
        {
            return Region::LeftEye;
        }
        if in_ellipse(u, v, EYES[1].0, EYES[1].1, EYE_RADIUS, EYE_RADIUS) {
            return Region::RightEye;
        }
        if BROWS.iter().any(|&(u0, u1, v0, v1)| in_box(u, v, u0, u1, v0, v1)) {
            return Region::Brows;
        }
        if in_triangle(u, v, NOSE) {
            return Region::Nose;
        }
        let (u0, u1, v0, v1) = MOUTH;
        if in_box(u, v, u0, u1, v0, v1) {
            return Region::Mouth;
        }
        return Region::Skin;
    }
    if EARS
        .iter()
        .any(|&(cu, cv, ru, rv)| in_ellipse(u, v, cu, cv, ru, rv))
    {
        return Region::Ears;
    }
    let (hu, hv, hru, hrv) = HEAD;
    if v < HAIRLINE + 0.2 && in_ellipse(u, v, hu, hv, hru, hrv) && v < FACE.1 {
        return Region::Hair;
    }
    Region::Background
}

/// Label map of the fixed toy layout at the given resolution.
pub fn toy_face_layout(width: usize, height: usize) -> Result<SegmentationMap> {
    let mut labels = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let u = (x as f64 + 0.5) / width as f64;
            let v = (y as f64 + 0.5) / height as f64;
            labels.push(layout_label(u, v).code());
        }
    }
    SegmentationMap::new(width, height, labels)
}

/// Returns the fixed geometric layout regardless of image content.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyFaceParser;

impl FaceParser for ToyFaceParser {
    fn name(&self) -> &str {
        "toy-parser"
    }

    fn parse(&self, image: &RgbImage) -> Result<SegmentationMap> {
        toy_face_layout(image.width() as usize, image.height() as usize)
    }
}

// ---------------------------------------------------------------------------
// Attribute scorers
// ---------------------------------------------------------------------------

/// Crude attribute estimators over the toy layout; stand-ins for pretrained models.
#[derive(Debug, Clone, Copy)]
pub struct ToyScorer {
    kind: AttributeKind,
}

impl ToyScorer {
    pub fn new(kind: AttributeKind) -> Self {
        Self { kind }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        let kind = match name {
            "toy-pose" => AttributeKind::Pose,
            "toy-gaze" => AttributeKind::Gaze,
            "toy-expression" => AttributeKind::Expression,
            "toy-quality" => AttributeKind::Quality,
            _ => return None,
        };
        Some(Self::new(kind))
    }
}

fn luma(p: &Rgb<u8>) -> f64 {
    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
}

fn region_pixels<'a>(
    image: &'a RgbImage,
    seg: &'a SegmentationMap,
    pred: impl Fn(u8) -> bool + 'a,
) -> impl Iterator<Item = (usize, usize, &'a Rgb<u8>)> + 'a {
    image.enumerate_pixels().filter_map(move |(x, y, p)| {
        pred(seg.label(x as usize, y as usize)).then_some((x as usize, y as usize, p))
    })
}

impl AttributeScorer for ToyScorer {
    fn name(&self) -> &str {
        match self.kind {
            AttributeKind::Pose => "toy-pose",
            AttributeKind::Gaze => "toy-gaze",
            AttributeKind::Expression => "toy-expression",
            AttributeKind::Quality => "toy-quality",
        }
    }

    fn kind(&self) -> AttributeKind {
        self.kind
    }

    fn score(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let (w, h) = (image.width() as usize, image.height() as usize);
        let seg = toy_face_layout(w, h)?;
        let face = |c: u8| c != Region::Background.code() && c != Region::Hair.code();
        match self.kind {
            AttributeKind::Quality => Ok(vec![luma_std(image)]),
            AttributeKind::Pose => {
                let (mut l, mut r, mut t, mut b) = (0.0, 0.0, 0.0, 0.0);
                for (x, y, p) in region_pixels(image, &seg, face) {
                    let v = luma(p);
                    if x < w / 2 { l += v } else { r += v }
                    if y < h / 2 { t += v } else { b += v }
                }
                Ok(vec![90.0 * (l - r) / (l + r + 1.0), 90.0 * (t - b) / (t + b + 1.0)])
            }
            AttributeKind::Gaze => {
                let mut angles = [0.0f64; 2];
                for (i, &(eu, ev)) in layout::EYES.iter().enumerate() {
                    let code = if i == 0 { Region::LeftEye } else { Region::RightEye }.code();
                    let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
                    for (x, y, p) in region_pixels(image, &seg, move |c| c == code) {
                        let dark = 255.0 - luma(p);
                        sx += dark * (x as f64 + 0.5);
                        sy += dark * (y as f64 + 0.5);
                        sw += dark;
                    }
                    if sw > 0.0 {
                        let r = layout::EYE_RADIUS;
                        angles[0] += 45.0 * ((sx / sw) / w as f64 - eu) / r / 2.0;
                        angles[1] += 45.0 * ((sy / sw) / h as f64 - ev) / r / 2.0;
                    }
                }
                Ok(angles.to_vec())
            }
            AttributeKind::Expression => {
                let mut out = Vec::with_capacity(6);
                for code in [Region::Mouth.code(), Region::Brows.code()] {
                    let mut acc = [0.0f64; 3];
                    let mut n = 0.0;
                    for (_, _, p) in region_pixels(image, &seg, move |c| c == code) {
                        for k in 0..3 {
                            acc[k] += p[k] as f64 / 255.0;
                        }
                        n += 1.0;
                    }
                    out.extend(acc.iter().map(|a| if n > 0.0 { a / n } else { 0.0 }));
                }
                Ok(out)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> LatentShape {
        LatentShape::new(4, 8, 8).unwrap()
    }

    fn step() -> Timestep {
        Timestep {
            t: 5,
            steps: 10,
            alpha_bar: 0.6,
        }
    }

    #[test]
    fn pointwise_ignores_null_embedding() {
        let b = ToyPointwiseBackbone::new(3, shape(), 16);
        let x = NoiseSource::new("t", 0).normal_latent(0, shape());
        let null = IdentityEmbedding::null(16);
        let zero = IdentityEmbedding::from_vector(vec![0.0; 16]).unwrap();
        let a = b.predict(&x, step(), &null, 1.0).unwrap();
        assert_eq!(a, b.predict(&x, step(), &zero, 1.0).unwrap());
        assert_eq!(a, b.predict(&x, step(), &null, 0.0).unwrap());
    }

    #[test]
    fn pointwise_rejects_wrong_dimension() {
        let b = ToyPointwiseBackbone::new(3, shape(), 16);
        let x = LatentTensor::zeros(shape());
        assert!(b
            .predict(&x, step(), &IdentityEmbedding::null(8), 1.0)
            .is_err());
    }

    #[test]
    fn attention_zero_lambda_is_text_only() {
        let b = ToyAttentionBackbone::new(1, shape(), 16);
        let x = NoiseSource::new("t", 1).normal_latent(0, shape());
        let e = IdentityEmbedding::from_raw(&NoiseSource::new("e", 0).normal_vec(0, 16)).unwrap();
        let cond = e.negate_scale(1.0).unwrap();
        assert_eq!(
            b.predict(&x, step(), &cond, 0.0).unwrap(),
            b.predict_text_only(&x, step()).unwrap()
        );
        assert_eq!(
            b.predict(&x, step(), &IdentityEmbedding::null(16), 1.0).unwrap(),
            b.predict_text_only(&x, step()).unwrap()
        );
        assert_ne!(
            b.predict(&x, step(), &cond, 1.0).unwrap(),
            b.predict_text_only(&x, step()).unwrap()
        );
    }

    #[test]
    fn codec_roundtrip_is_exact() {
        let codec = ToyCodec::new(2).unwrap();
        let img = RgbImage::from_fn(6, 4, |x, y| Rgb([(x * 40) as u8, (y * 60) as u8, 255 - (x * y) as u8]));
        let lat = codec.encode(&img).unwrap();
        assert_eq!(lat.shape(), LatentShape::new(12, 2, 3).unwrap());
        assert_eq!(codec.decode(&lat).unwrap(), img);
        assert!(codec.encode_pixels(1, 1, &[f32::NAN, 0.0, 0.0]).is_err());
        assert!(codec.encode(&RgbImage::new(3, 4)).is_err());
        assert_eq!(ToyCodec::for_latent_shape(LatentShape::new(12, 4, 4).unwrap()).unwrap(), codec);
    }

    #[test]
    fn layout_uses_every_code() {
        let seg = toy_face_layout(64, 64).unwrap();
        for r in Region::ALL {
            assert!(seg.count(r) > 0, "{} missing from layout", r.name());
        }
    }

    #[test]
    fn embedder_rejects_blank_images() {
        let e = ToyStatsEmbedder::new(0);
        let blank = RgbImage::from_pixel(16, 16, Rgb([90, 90, 90]));
        assert!(matches!(e.embed(&blank), Err(Error::FaceNotFound(_))));
    }
}
