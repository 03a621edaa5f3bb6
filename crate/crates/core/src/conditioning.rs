//! Identity embeddings, the null condition, and the decoupled cross-attention used
//! to inject an image-derived context next to the text context.

use image::RgbImage;
use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::backbones::IdentityEmbedder;
use crate::error::{Error, Result};

/// An identity vector, or the null condition ∅ (all zeros, `is_null` set).
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityEmbedding {
    vector: Vec<f32>,
    is_null: bool,
}

impl IdentityEmbedding {
    pub fn null(dim: usize) -> Self {
        Self {
            vector: vec![0.0; dim],
            is_null: true,
        }
    }

    /// Unit-normalizes a raw embedder output.
    pub fn from_raw(raw: &[f32]) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Plugin("embedder returned an empty vector".into()));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Plugin("embedder returned non-finite values".into()));
        }
        let norm = raw.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::FaceNotFound(
                "embedder returned a zero vector".into(),
            ));
        }
        Ok(Self {
            vector: raw.iter().map(|&v| (v as f64 / norm) as f32).collect(),
            is_null: false,
        })
    }

    /// Wraps a vector as-is (no normalization). Used for already-scaled conditions.
    pub fn from_vector(vector: Vec<f32>) -> Result<Self> {
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding contains non-finite values"));
        }
        Ok(Self {
            vector,
            is_null: false,
        })
    }

    pub fn vector(&self) -> &[f32] {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn is_null(&self) -> bool {
        self.is_null
    }

    pub fn norm(&self) -> f64 {
        self.vector
            .iter()
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// `−λ_id · e`. `λ_id = 0` yields a zero vector that is not flagged null.
    pub fn negate_scale(&self, lambda_id: f64) -> Result<Self> {
        if self.is_null {
            return Err(Error::invalid("cannot negate the null embedding"));
        }
        if !lambda_id.is_finite() || lambda_id < 0.0 {
            return Err(Error::out_of_range(
                "lambda_id",
                format!("must be finite and >= 0, got {lambda_id}"),
            ));
        }
        Ok(Self {
            vector: self
                .vector
                .iter()
                .map(|&v| (-lambda_id * v as f64) as f32)
                .collect(),
            is_null: false,
        })
    }

    /// `+λ · e`, the sign used by identity-recovery attempts.
    pub fn scale(&self, lambda: f64) -> Result<Self> {
        if self.is_null {
            return Err(Error::invalid("cannot scale the null embedding"));
        }
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::out_of_range(
                "lambda_id",
                format!("must be finite and >= 0, got {lambda}"),
            ));
        }
        Ok(Self {
            vector: self
                .vector
                .iter()
                .map(|&v| (lambda * v as f64) as f32)
                .collect(),
            is_null: false,
        })
    }

    pub fn fingerprint(&self) -> String {
        if self.is_null {
            return format!("null:{}", self.vector.len());
        }
        let mut h = Sha256::new();
        for v in &self.vector {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Runs the embedder and unit-normalizes its output.
pub fn extract_embedding(image: &RgbImage, embedder: &dyn IdentityEmbedder) -> Result<IdentityEmbedding> {
    let raw = embedder.embed(image)?;
    if raw.len() != embedder.dim() {
        return Err(Error::Contract(format!(
            "embedder `{}` declared dimension {} but returned {}",
            embedder.name(),
            embedder.dim(),
            raw.len()
        )));
    }
    IdentityEmbedding::from_raw(&raw)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterParams {
    pub lambda_img: f32,
}

impl AdapterParams {
    pub fn new(lambda_img: f32) -> Result<Self> {
        if !lambda_img.is_finite() || lambda_img < 0.0 {
            return Err(Error::out_of_range(
                "lambda_img",
                format!("must be finite and >= 0, got {lambda_img}"),
            ));
        }
        Ok(Self { lambda_img })
    }
}

impl Default for AdapterParams {
    fn default() -> Self {
        Self { lambda_img: 1.0 }
    }
}

/// Projected keys and values of one context (rows are tokens).
#[derive(Debug, Clone)]
pub struct AttentionContext {
    pub keys: DMatrix<f64>,
    pub values: DMatrix<f64>,
}

impl AttentionContext {
    pub fn new(keys: DMatrix<f64>, values: DMatrix<f64>) -> Result<Self> {
        if keys.nrows() != values.nrows() || keys.nrows() == 0 {
            return Err(Error::ShapeMismatch {
                expected: "equal, non-zero token counts for keys and values".into(),
                found: format!("{} keys, {} values", keys.nrows(), values.nrows()),
            });
        }
        Ok(Self { keys, values })
    }
}

/// `softmax(Q Kᵀ / sqrt(d)) V`, row-wise softmax with max subtraction.
pub fn scaled_dot_product_attention(
    queries: &DMatrix<f64>,
    ctx: &AttentionContext,
) -> Result<DMatrix<f64>> {
    let d = queries.ncols();
    if ctx.keys.ncols() != d {
        return Err(Error::ShapeMismatch {
            expected: format!("key dimension {d}"),
            found: format!("key dimension {}", ctx.keys.ncols()),
        });
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut weights = queries * ctx.keys.transpose() * scale;
    for mut row in weights.row_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for w in row.iter_mut() {
            *w = (*w - max).exp();
            sum += *w;
        }
        for w in row.iter_mut() {
            *w /= sum;
        }
    }
    Ok(weights * &ctx.values)
}

/// `Attention(Q, K_text, V_text) + λ_img · Attention(Q, K_img, V_img)`.
pub fn decoupled_attention(
    queries: &DMatrix<f64>,
    text: &AttentionContext,
    image: &AttentionContext,
    params: AdapterParams,
) -> Result<DMatrix<f64>> {
    let text_out = scaled_dot_product_attention(queries, text)?;
    let image_out = scaled_dot_product_attention(queries, image)?;
    if image_out.ncols() != text_out.ncols() {
        return Err(Error::ShapeMismatch {
            expected: format!("value dimension {}", text_out.ncols()),
            found: format!("value dimension {}", image_out.ncols()),
        });
    }
    Ok(text_out + image_out * params.lambda_img as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_raw_vectors() {
        let e = IdentityEmbedding::from_raw(&[3.0, 4.0]).unwrap();
        assert_eq!(e.vector(), &[0.6, 0.8]);
        assert!(matches!(
            IdentityEmbedding::from_raw(&[0.0, 0.0]),
            Err(Error::FaceNotFound(_))
        ));
        assert!(IdentityEmbedding::from_raw(&[f32::NAN, 1.0]).is_err());
    }

    #[test]
    fn negate_scale_examples() {
        let e = IdentityEmbedding::from_raw(&[3.0, 4.0]).unwrap();
        assert_eq!(e.negate_scale(1.0).unwrap().vector(), &[-0.6, -0.8]);
        assert_eq!(e.negate_scale(0.5).unwrap().vector(), &[-0.3, -0.4]);
        let zero = e.negate_scale(0.0).unwrap();
        assert!(zero.vector().iter().all(|&v| v == 0.0));
        assert!(!zero.is_null());
        assert!(e.negate_scale(-0.1).is_err());
        assert!(IdentityEmbedding::null(2).negate_scale(1.0).is_err());
    }

    #[test]
    fn null_fingerprint_is_stable() {
        assert_eq!(IdentityEmbedding::null(8).fingerprint(), "null:8");
        let zero = IdentityEmbedding::from_vector(vec![0.0; 8]).unwrap();
        assert_ne!(zero.fingerprint(), "null:8");
    }

    fn ctx(keys: &[f64], values: &[f64], rows: usize) -> AttentionContext {
        AttentionContext::new(
            DMatrix::from_row_slice(rows, keys.len() / rows, keys),
            DMatrix::from_row_slice(rows, values.len() / rows, values),
        )
        .unwrap()
    }

    #[test]
    fn zero_lambda_is_text_only() {
        let q = DMatrix::from_row_slice(2, 2, &[0.3, -1.0, 2.0, 0.5]);
        let text = ctx(&[1.0, 0.0, 0.0, 1.0], &[1.0, 2.0, 3.0, 4.0], 2);
        let image = ctx(&[0.5, 0.5], &[9.0, -9.0], 1);
        let out = decoupled_attention(&q, &text, &image, AdapterParams { lambda_img: 0.0 }).unwrap();
        assert_eq!(out, scaled_dot_product_attention(&q, &text).unwrap());
    }

    #[test]
    fn zero_image_values_leave_text_output() {
        let q = DMatrix::from_row_slice(1, 2, &[0.3, -1.0]);
        let text = ctx(&[1.0, 0.0, 0.0, 1.0], &[1.0, 2.0, 3.0, 4.0], 2);
        let image = ctx(&[0.0, 0.0, 0.0, 0.0], &[0.0, 0.0, 0.0, 0.0], 2);
        let out = decoupled_attention(&q, &text, &image, AdapterParams { lambda_img: 3.0 }).unwrap();
        assert_eq!(out, scaled_dot_product_attention(&q, &text).unwrap());
    }

    #[test]
    fn scalar_single_token_attention() {
        // One token per context: softmax over one score is 1, so each branch returns its value.
        let q = DMatrix::from_row_slice(1, 1, &[0.7]);
        let text = ctx(&[0.7], &[0.7], 1);
        let image = ctx(&[-2.0], &[1.5], 1);
        let out = decoupled_attention(&q, &text, &image, AdapterParams { lambda_img: 0.5 }).unwrap();
        assert!((out[(0, 0)] - (0.7 + 0.5 * 1.5)).abs() < 1e-15);
    }

    #[test]
    fn brute_force_two_token_attention() {
        let q = DMatrix::from_row_slice(1, 1, &[1.0]);
        let text = ctx(&[0.0, 1.0], &[2.0, 4.0], 2);
        let out = scaled_dot_product_attention(&q, &text).unwrap();
        let (w0, w1) = (1.0f64.exp().recip(), 1.0);
        let want = (w0 * 2.0 + w1 * 4.0) / (w0 + w1);
        assert!((out[(0, 0)] - want).abs() < 1e-12);
    }

    #[test]
    fn key_dimension_mismatch_is_rejected() {
        let q = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        let text = ctx(&[1.0, 0.0], &[1.0], 1);
        assert!(scaled_dot_product_attention(&q, &text).is_err());
    }
}
