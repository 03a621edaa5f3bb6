//! Latent tensors: dense `(channels, height, width)` grids of finite `f32`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "latent shape must be positive, got {channels}x{height}x{width}"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Parses `CxHxW`.
    pub fn parse(s: &str) -> Result<Self> {
        let dims: Vec<&str> = s.trim().split(['x', 'X']).collect();
        if dims.len() != 3 {
            return Err(Error::invalid(format!("latent shape `{s}` is not CxHxW")));
        }
        let mut out = [0usize; 3];
        for (slot, d) in out.iter_mut().zip(&dims) {
            *slot = d
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("latent shape `{s}` is not CxHxW")))?;
        }
        Self::new(out[0], out[1], out[2])
    }
}

impl fmt::Display for LatentShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Row-major `(c, h, w)` latent. All entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    shape: LatentShape,
    data: Vec<f32>,
}

impl LatentTensor {
    pub fn zeros(shape: LatentShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: LatentShape, value: f32) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: LatentShape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{shape} ({} values)", shape.len()),
                found: format!("{} values", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("latent contains non-finite values"));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor from `f64` values, rounding to `f32`; fails on any non-finite entry.
    pub(crate) fn from_f64_iter(
        shape: LatentShape,
        values: impl Iterator<Item = f64>,
        stage: &'static str,
        step: usize,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.len());
        for v in values {
            let v = v as f32;
            if !v.is_finite() {
                return Err(Error::NonFinite { stage, step });
            }
            data.push(v);
        }
        debug_assert_eq!(data.len(), shape.len());
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> LatentShape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }

    pub fn ensure_shape(&self, expected: LatentShape) -> Result<()> {
        if self.shape != expected {
            return Err(Error::ShapeMismatch {
                expected: expected.to_string(),
                found: self.shape.to_string(),
            });
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &LatentTensor) -> Result<f32> {
        other.ensure_shape(self.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(shape: LatentShape, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != shape.len() * 4 {
            return Err(Error::corrupt(format!(
                "tensor payload holds {} bytes, expected {}",
                bytes.len(),
                shape.len() * 4
            )));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::corrupt("tensor payload contains non-finite values"));
        }
        Ok(Self { shape, data })
    }
}
