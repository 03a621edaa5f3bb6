//! On-disk container for inversion records and sampler traces.
//!
//! A container is a directory holding `meta.json` and `tensors.bin`. The metadata's
//! `arrays` table lists every named array with its byte offset and element count;
//! `tensors.bin` is those arrays concatenated in table order as little-endian `f32`.
//! Inversion records name their arrays `x_<t>`, `z_<t>` and `condition`; traces use
//! `eps_hat_<t>` and `eps_tilde_<t>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conditioning::IdentityEmbedding;
use crate::error::{Error, Result};
use crate::inversion::InversionRecord;
use crate::tensor::{LatentShape, LatentTensor};

pub const CONTAINER_VERSION: u32 = 1;
pub const META_FILE: &str = "meta.json";
pub const TENSORS_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContainerKind {
    Inversion,
    Trace,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    /// Byte offset into `tensors.bin`.
    pub offset: u64,
    /// Number of `f32` elements.
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fingerprints {
    pub schedule: String,
    pub backbone: String,
    pub conditioning: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerMeta {
    pub version: u32,
    pub kind: ContainerKind,
    #[serde(rename = "T")]
    pub steps: usize,
    pub latent_shape: [usize; 3],
    pub dtype: String,
    pub seed: u64,
    #[serde(default)]
    pub lean: bool,
    /// Serialized noise schedule text.
    pub schedule: String,
    pub fingerprints: Fingerprints,
    #[serde(default)]
    pub condition_null: bool,
    /// Free-form run description (traces echo their configuration here).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
}

impl ContainerMeta {
    pub fn shape(&self) -> Result<LatentShape> {
        let [c, h, w] = self.latent_shape;
        LatentShape::new(c, h, w)
    }
}

/// Metadata plus named arrays, in table order.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: ContainerMeta,
    pub arrays: BTreeMap<String, Vec<f32>>,
}

impl Container {
    /// Builds the offset table from `arrays` in the given order.
    pub fn new(mut meta: ContainerMeta, arrays: Vec<(String, Vec<f32>)>) -> Result<Self> {
        let mut table = Vec::with_capacity(arrays.len());
        let mut map = BTreeMap::new();
        let mut offset = 0u64;
        for (name, data) in arrays {
            table.push(ArrayEntry {
                name: name.clone(),
                offset,
                len: data.len() as u64,
            });
            offset += 4 * data.len() as u64;
            if map.insert(name.clone(), data).is_some() {
                return Err(Error::invalid(format!("duplicate array name `{name}`")));
            }
        }
        meta.arrays = table;
        Ok(Self { meta, arrays: map })
    }

    pub fn meta_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.meta)? + "\n")
    }

    pub fn tensor_bytes(&self) -> Vec<u8> {
        let total: u64 = self.meta.arrays.iter().map(|a| a.len * 4).sum();
        let mut out = Vec::with_capacity(total as usize);
        for entry in &self.meta.arrays {
            for v in &self.arrays[&entry.name] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses and validates both files' contents.
    pub fn from_bytes(meta_json: &[u8], tensors: &[u8]) -> Result<Self> {
        let meta: ContainerMeta = serde_json::from_slice(meta_json)
            .map_err(|e| Error::corrupt(format!("invalid {META_FILE}: {e}")))?;
        if meta.version != CONTAINER_VERSION {
            return Err(Error::Version {
                expected: CONTAINER_VERSION,
                found: meta.version,
            });
        }
        if meta.dtype != "f32le" {
            return Err(Error::corrupt(format!("unsupported dtype `{}`", meta.dtype)));
        }
        meta.shape()?;
        let mut arrays = BTreeMap::new();
        let mut expected_offset = 0u64;
        for entry in &meta.arrays {
            if entry.offset != expected_offset {
                return Err(Error::corrupt(format!(
                    "array `{}` starts at byte {} but the table implies {expected_offset}",
                    entry.name, entry.offset
                )));
            }
            let bytes = entry
                .len
                .checked_mul(4)
                .ok_or_else(|| Error::corrupt("array length overflows"))?;
            let end = expected_offset
                .checked_add(bytes)
                .ok_or_else(|| Error::corrupt("array offset overflows"))?;
            if end > tensors.len() as u64 {
                return Err(Error::corrupt(format!(
                    "{TENSORS_FILE} truncated: array `{}` needs bytes {expected_offset}..{end}, file has {}",
                    entry.name,
                    tensors.len()
                )));
            }
            let data: Vec<f32> = tensors[expected_offset as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::corrupt(format!("array `{}` holds non-finite values", entry.name)));
            }
            if arrays.insert(entry.name.clone(), data).is_some() {
                return Err(Error::corrupt(format!("duplicate array `{}`", entry.name)));
            }
            expected_offset = end;
        }
        if expected_offset != tensors.len() as u64 {
            return Err(Error::corrupt(format!(
                "{TENSORS_FILE} has {} bytes but the array table covers {expected_offset}",
                tensors.len()
            )));
        }
        Ok(Self { meta, arrays })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta_path = dir.join(META_FILE);
        let bin_path = dir.join(TENSORS_FILE);
        fs::write(&bin_path, self.tensor_bytes()).map_err(|e| Error::io(&bin_path, e))?;
        fs::write(&meta_path, self.meta_json()?).map_err(|e| Error::io(&meta_path, e))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let bin_path = dir.join(TENSORS_FILE);
        let meta = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let bin = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        Self::from_bytes(&meta, &bin)
    }

    fn take_latent(&mut self, name: &str, shape: LatentShape) -> Result<LatentTensor> {
        let data = self
            .arrays
            .remove(name)
            .ok_or_else(|| Error::corrupt(format!("missing array `{name}`")))?;
        LatentTensor::from_vec(shape, data).map_err(|e| match e {
            Error::ShapeMismatch { expected, found } => {
                Error::corrupt(format!("array `{name}`: expected {expected}, found {found}"))
            }
            other => other,
        })
    }
}

fn record_container(rec: &InversionRecord) -> Result<Container> {
    let shape = rec.shape();
    let meta = ContainerMeta {
        version: CONTAINER_VERSION,
        kind: ContainerKind::Inversion,
        steps: rec.steps(),
        latent_shape: [shape.channels, shape.height, shape.width],
        dtype: "f32le".into(),
        seed: rec.seed(),
        lean: rec.is_lean(),
        schedule: rec.schedule_text().to_string(),
        fingerprints: Fingerprints {
            schedule: rec.schedule_fingerprint().to_string(),
            backbone: rec.backbone_fingerprint().to_string(),
            conditioning: rec.conditioning_fingerprint(),
        },
        condition_null: rec.condition().is_null(),
        extra: serde_json::Value::Null,
        arrays: Vec::new(),
    };
    let mut arrays = Vec::new();
    for t in 0..=rec.steps() {
        if let Some(x) = rec.latent(t) {
            arrays.push((format!("x_{t}"), x.data().to_vec()));
        }
    }
    for t in 1..=rec.steps() {
        arrays.push((format!("z_{t}"), rec.noise_map(t).data().to_vec()));
    }
    arrays.push(("condition".into(), rec.condition().vector().to_vec()));
    Container::new(meta, arrays)
}

fn record_from_container(mut c: Container) -> Result<InversionRecord> {
    if c.meta.kind != ContainerKind::Inversion {
        return Err(Error::corrupt("container holds a trace, not an inversion record"));
    }
    let shape = c.meta.shape()?;
    let steps = c.meta.steps;
    if steps == 0 {
        return Err(Error::corrupt("record has T = 0"));
    }
    let mut latents = Vec::with_capacity(steps + 1);
    for t in 0..=steps {
        let name = format!("x_{t}");
        let required = t == 0 || t == steps || !c.meta.lean;
        if required || c.arrays.contains_key(&name) {
            latents.push(Some(c.take_latent(&name, shape)?));
        } else {
            latents.push(None);
        }
    }
    let mut noise_maps = Vec::with_capacity(steps);
    for t in 1..=steps {
        noise_maps.push(c.take_latent(&format!("z_{t}"), shape)?);
    }
    let cond_vec = c
        .arrays
        .remove("condition")
        .ok_or_else(|| Error::corrupt("missing array `condition`"))?;
    if let Some(extra) = c.arrays.keys().next() {
        return Err(Error::corrupt(format!("unexpected array `{extra}`")));
    }
    let condition = if c.meta.condition_null {
        if cond_vec.iter().any(|&v| v != 0.0) {
            return Err(Error::corrupt("null condition stored with non-zero entries"));
        }
        IdentityEmbedding::null(cond_vec.len())
    } else {
        IdentityEmbedding::from_vector(cond_vec)?
    };
    let fp = condition.fingerprint();
    if fp != c.meta.fingerprints.conditioning {
        return Err(Error::FingerprintMismatch {
            what: "conditioning",
            expected: c.meta.fingerprints.conditioning.clone(),
            found: fp,
        });
    }
    let rec = InversionRecord {
        seed: c.meta.seed,
        shape,
        latents,
        noise_maps,
        condition,
        schedule_text: c.meta.schedule,
        schedule_fingerprint: c.meta.fingerprints.schedule,
        backbone_fingerprint: c.meta.fingerprints.backbone,
    };
    rec.validate()?;
    Ok(rec)
}

/// Writes `<dir>/meta.json` and `<dir>/tensors.bin`.
pub fn save_record(rec: &InversionRecord, dir: &Path) -> Result<()> {
    record_container(rec)?.write(dir)
}

/// Reads and re-validates a record: array shapes, schedule text against its
/// fingerprint, `z_1` convention, and the conditioning fingerprint.
pub fn load_record(dir: &Path) -> Result<InversionRecord> {
    record_from_container(Container::read(dir)?)
}

/// In-memory form of [`load_record`].
pub fn record_from_bytes(meta_json: &[u8], tensors: &[u8]) -> Result<InversionRecord> {
    record_from_container(Container::from_bytes(meta_json, tensors)?)
}

/// Serialized form of [`save_record`]: `(meta.json, tensors.bin)`.
pub fn record_to_bytes(rec: &InversionRecord) -> Result<(String, Vec<u8>)> {
    let c = record_container(rec)?;
    Ok((c.meta_json()?, c.tensor_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::ToyPointwiseBackbone;
    use crate::inversion::invert;
    use crate::noise::NoiseSource;
    use crate::schedule::NoiseSchedule;

    fn record() -> InversionRecord {
        let shape = LatentShape::new(2, 4, 4).unwrap();
        let sched = NoiseSchedule::default_for_steps(6).unwrap();
        let b = ToyPointwiseBackbone::new(0, shape, 8);
        let x0 = NoiseSource::new("x0", 0).normal_latent(0, shape);
        invert(&x0, &b, &sched, &IdentityEmbedding::null(8), 5).unwrap()
    }

    #[test]
    fn bytes_roundtrip_full_and_lean() {
        let rec = record();
        let (meta, bin) = record_to_bytes(&rec).unwrap();
        assert_eq!(record_from_bytes(meta.as_bytes(), &bin).unwrap(), rec);
        let lean = rec.into_lean();
        let (meta, bin) = record_to_bytes(&lean).unwrap();
        assert_eq!(record_from_bytes(meta.as_bytes(), &bin).unwrap(), lean);
    }

    #[test]
    fn truncation_and_trailing_bytes_are_corrupt() {
        let (meta, bin) = record_to_bytes(&record()).unwrap();
        assert!(matches!(
            record_from_bytes(meta.as_bytes(), &bin[..bin.len() - 1]),
            Err(Error::Corrupt(_))
        ));
        let mut longer = bin.clone();
        longer.push(0);
        assert!(matches!(record_from_bytes(meta.as_bytes(), &longer), Err(Error::Corrupt(_))));
    }

    #[test]
    fn version_and_unknown_fields_are_rejected() {
        let (meta, bin) = record_to_bytes(&record()).unwrap();
        let v2 = meta.replacen("\"version\": 1", "\"version\": 2", 1);
        assert!(matches!(
            record_from_bytes(v2.as_bytes(), &bin),
            Err(Error::Version { found: 2, .. })
        ));
        let extra = meta.replacen('{', "{\"colour\": 1,", 1);
        assert!(matches!(record_from_bytes(extra.as_bytes(), &bin), Err(Error::Corrupt(_))));
    }
}
