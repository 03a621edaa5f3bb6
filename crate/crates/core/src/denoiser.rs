//! The anonymizing sampler: identity guidance withheld for the first `T_skip` steps,
//! dual-path guidance, mask compositing, and DDPM steps with the stored noise maps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbones::NoisePredictor;
use crate::conditioning::IdentityEmbedding;
use crate::container::{Container, ContainerKind, ContainerMeta, Fingerprints, CONTAINER_VERSION};
use crate::error::{Error, Result};
use crate::inversion::{check_prediction, predict_checked, timestep, InversionRecord, INVERSION_LAMBDA_IMG};
use crate::masks::{MaskPreset, RegionMask};
use crate::schedule::NoiseSchedule;
use crate::tensor::LatentTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnonymizationConfig {
    /// Total process steps `T`.
    pub steps: usize,
    /// Steps at the top of the process run without identity guidance.
    pub t_skip: usize,
    pub lambda_id: f64,
    pub lambda_cfg: f64,
    pub lambda_img: f32,
    pub mask_preset: MaskPreset,
    /// Process steps completed before the user mask replaces the whole-face mask.
    pub mask_start: usize,
    pub seed: u64,
}

impl Default for AnonymizationConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            t_skip: 70,
            lambda_id: 1.0,
            lambda_cfg: 10.0,
            lambda_img: 1.0,
            mask_preset: MaskPreset::KeepEyesMouth,
            mask_start: 80,
            seed: 0,
        }
    }
}

impl AnonymizationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::out_of_range("steps", "T must be at least 1"));
        }
        if self.t_skip > self.steps {
            return Err(Error::out_of_range(
                "t_skip",
                format!("{} exceeds steps {}", self.t_skip, self.steps),
            ));
        }
        if self.mask_start > self.steps {
            return Err(Error::out_of_range(
                "mask_start",
                format!("{} exceeds steps {}", self.mask_start, self.steps),
            ));
        }
        if !self.lambda_id.is_finite() || self.lambda_id < 0.0 {
            return Err(Error::out_of_range(
                "lambda_id",
                format!("must be finite and >= 0, got {}", self.lambda_id),
            ));
        }
        if !self.lambda_cfg.is_finite() {
            return Err(Error::out_of_range("lambda_cfg", "must be finite"));
        }
        if !self.lambda_img.is_finite() || self.lambda_img < 0.0 {
            return Err(Error::out_of_range(
                "lambda_img",
                format!("must be finite and >= 0, got {}", self.lambda_img),
            ));
        }
        Ok(())
    }

    /// First schedule step that receives identity guidance.
    pub fn first_guided_step(&self) -> usize {
        self.steps - self.t_skip
    }
}

/// Whether the user mask (rather than the whole-face mask) applies at schedule step `t`:
/// after `mask_start` of the `steps` process iterations, i.e. for `t ≤ steps − mask_start`.
pub fn user_mask_active(t: usize, steps: usize, mask_start: usize) -> bool {
    t + mask_start <= steps
}

fn combine(a: &LatentTensor, b: &LatentTensor, t: usize, stage: &'static str, f: impl Fn(usize, f64, f64) -> f64) -> Result<LatentTensor> {
    b.ensure_shape(a.shape())?;
    LatentTensor::from_f64_iter(
        a.shape(),
        a.data()
            .iter()
            .zip(b.data())
            .enumerate()
            .map(|(i, (&x, &y))| f(i, x as f64, y as f64)),
        stage,
        t,
    )
}

/// `λ_cfg·eps_cond + (1 − λ_cfg)·eps_uncond`.
pub fn guidance_combine(eps_cond: &LatentTensor, eps_uncond: &LatentTensor, lambda_cfg: f64) -> Result<LatentTensor> {
    combine(eps_cond, eps_uncond, 0, "guidance", |_, c, u| lambda_cfg * c + (1.0 - lambda_cfg) * u)
}

/// `M·eps_hat + (1 − M)·eps_uncond`, with `M` broadcast over channels.
pub fn mask_combine(eps_hat: &LatentTensor, eps_uncond: &LatentTensor, mask: &RegionMask) -> Result<LatentTensor> {
    let shape = eps_hat.shape();
    if mask.width() != shape.width || mask.height() != shape.height {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{} mask", shape.width, shape.height),
            found: format!("{}x{} mask", mask.width(), mask.height()),
        });
    }
    let m = mask.values();
    let plane = shape.plane();
    combine(eps_hat, eps_uncond, 0, "mask", |i, h, u| {
        let w = m[i % plane] as f64;
        w * h + (1.0 - w) * u
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidedStep {
    pub t: usize,
    pub eps_cond: LatentTensor,
    pub eps_uncond: LatentTensor,
    pub eps_hat: LatentTensor,
    pub eps_tilde: LatentTensor,
    pub user_mask_active: bool,
}

/// Per-step guidance internals, in sampling order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GuidedStepTrace {
    pub steps: Vec<GuidedStep>,
}

impl GuidedStepTrace {
    pub fn to_container(&self, rec: &InversionRecord, cfg: &AnonymizationConfig) -> Result<Container> {
        let shape = rec.shape();
        let meta = ContainerMeta {
            version: CONTAINER_VERSION,
            kind: ContainerKind::Trace,
            steps: rec.steps(),
            latent_shape: [shape.channels, shape.height, shape.width],
            dtype: "f32le".into(),
            seed: rec.seed(),
            lean: false,
            schedule: rec.schedule_text().to_string(),
            fingerprints: Fingerprints {
                schedule: rec.schedule_fingerprint().to_string(),
                backbone: rec.backbone_fingerprint().to_string(),
                conditioning: rec.conditioning_fingerprint(),
            },
            condition_null: rec.condition().is_null(),
            extra: serde_json::json!({
                "config": cfg,
                "user_mask_active": self.steps.iter().map(|s| (s.t, s.user_mask_active)).collect::<Vec<_>>(),
            }),
            arrays: Vec::new(),
        };
        let mut arrays = Vec::with_capacity(self.steps.len() * 2);
        for s in &self.steps {
            arrays.push((format!("eps_hat_{}", s.t), s.eps_hat.data().to_vec()));
            arrays.push((format!("eps_tilde_{}", s.t), s.eps_tilde.data().to_vec()));
        }
        Container::new(meta, arrays)
    }

    pub fn save(&self, rec: &InversionRecord, cfg: &AnonymizationConfig, dir: &Path) -> Result<()> {
        self.to_container(rec, cfg)?.write(dir)
    }
}

/// Inputs shared by both sampler variants.
pub struct AnonymizeInputs<'a> {
    pub record: &'a InversionRecord,
    pub config: &'a AnonymizationConfig,
    pub user_mask: &'a RegionMask,
    pub face_mask: &'a RegionMask,
    pub embedding: &'a IdentityEmbedding,
    pub backbone: &'a dyn NoisePredictor,
    pub schedule: &'a NoiseSchedule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnonymizeOutput {
    pub latent: LatentTensor,
    pub trace: Option<GuidedStepTrace>,
}

struct Prepared {
    cond: IdentityEmbedding,
    null: IdentityEmbedding,
}

fn prepare(inp: &AnonymizeInputs<'_>) -> Result<Prepared> {
    let cfg = inp.config;
    cfg.validate()?;
    if cfg.steps != inp.schedule.steps() {
        return Err(Error::out_of_range(
            "steps",
            format!("config has T={} but the schedule has T={}", cfg.steps, inp.schedule.steps()),
        ));
    }
    inp.record.check_compatible(inp.backbone, inp.schedule)?;
    let dim = inp.backbone.info().embedding_dim;
    if inp.embedding.dim() != dim {
        return Err(Error::ShapeMismatch {
            expected: format!("embedding dimension {dim}"),
            found: format!("embedding dimension {}", inp.embedding.dim()),
        });
    }
    let cond = if inp.embedding.is_null() {
        if cfg.lambda_id != 0.0 {
            return Err(Error::invalid("a non-null identity embedding is required when lambda_id > 0"));
        }
        IdentityEmbedding::from_vector(vec![0.0; dim])?
    } else {
        inp.embedding.negate_scale(cfg.lambda_id)?
    };
    Ok(Prepared {
        cond,
        null: IdentityEmbedding::null(dim),
    })
}

fn guided_step(
    inp: &AnonymizeInputs<'_>,
    p: &Prepared,
    x: &LatentTensor,
    t: usize,
    trace: &mut Option<GuidedStepTrace>,
) -> Result<LatentTensor> {
    let cfg = inp.config;
    let (eps_cond, eps_uncond) = if cfg.lambda_img == INVERSION_LAMBDA_IMG {
        let (c, u) = inp
            .backbone
            .predict_pair(x, timestep(inp.schedule, t), &p.cond, &p.null, cfg.lambda_img)?;
        check_prediction(&c, x.shape(), t)?;
        check_prediction(&u, x.shape(), t)?;
        (c, u)
    } else {
        (
            predict_checked(inp.backbone, x, inp.schedule, t, &p.cond, cfg.lambda_img)?,
            predict_checked(inp.backbone, x, inp.schedule, t, &p.null, INVERSION_LAMBDA_IMG)?,
        )
    };
    let eps_hat = guidance_combine(&eps_cond, &eps_uncond, cfg.lambda_cfg)
        .map_err(|e| name_step(e, t))?;
    let active = user_mask_active(t, cfg.steps, cfg.mask_start);
    let mask = if active { inp.user_mask } else { inp.face_mask };
    let eps_tilde = mask_combine(&eps_hat, &eps_uncond, mask).map_err(|e| name_step(e, t))?;
    let next = inp.schedule.step(x, &eps_tilde, t, inp.record.noise_map(t))?;
    if let Some(tr) = trace {
        tr.steps.push(GuidedStep {
            t,
            eps_cond,
            eps_uncond,
            eps_hat,
            eps_tilde,
            user_mask_active: active,
        });
    }
    Ok(next)
}

fn name_step(e: Error, t: usize) -> Error {
    match e {
        Error::NonFinite { stage, .. } => Error::NonFinite { stage, step: t },
        other => other,
    }
}

/// Starts from the stored `x_{T−T_skip}` and runs the guided sampler down to `x_0`.
pub fn anonymize(inp: &AnonymizeInputs<'_>, with_trace: bool) -> Result<AnonymizeOutput> {
    let p = prepare(inp)?;
    let first = inp.config.first_guided_step();
    let mut x = inp.record.latent_at(first, inp.backbone, inp.schedule)?;
    let mut trace = with_trace.then(GuidedStepTrace::default);
    for t in (1..=first).rev() {
        x = guided_step(inp, &p, &x, t, &mut trace)?;
    }
    Ok(AnonymizeOutput { latent: x, trace })
}

/// Starts from `x_T`, replaying the first `T_skip` steps unconditionally with the
/// stored noise maps, then continues exactly as [`anonymize`].
pub fn anonymize_from_top(inp: &AnonymizeInputs<'_>, with_trace: bool) -> Result<AnonymizeOutput> {
    let p = prepare(inp)?;
    let first = inp.config.first_guided_step();
    let mut x = inp.record.x_top().clone();
    let mut trace = with_trace.then(GuidedStepTrace::default);
    for t in (1..=inp.config.steps).rev() {
        x = if t > first {
            inp.record.replay_step(&x, t, inp.backbone, inp.schedule)?
        } else {
            guided_step(inp, &p, &x, t, &mut trace)?
        };
    }
    Ok(AnonymizeOutput { latent: x, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::LatentShape;

    fn t(v: &[f32]) -> LatentTensor {
        LatentTensor::from_vec(LatentShape::new(1, 1, v.len()).unwrap(), v.to_vec()).unwrap()
    }

    #[test]
    fn guidance_examples() {
        assert_eq!(guidance_combine(&t(&[1.0]), &t(&[0.5]), 10.0).unwrap().data(), &[5.5]);
        let c = t(&[0.3, -2.0]);
        let u = t(&[1.7, 0.1]);
        assert_eq!(guidance_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(guidance_combine(&c, &u, 0.0).unwrap(), u);
        assert!(guidance_combine(&c, &t(&[1.0]), 1.0).is_err());
    }

    #[test]
    fn mask_examples() {
        let h = t(&[4.0, 4.0]);
        let u = t(&[0.0, 2.0]);
        let quarter = RegionMask::from_values(2, 1, vec![0.25, 0.25]).unwrap();
        assert_eq!(mask_combine(&h, &u, &quarter).unwrap().data(), &[1.0, 2.5]);
        let ones = RegionMask::filled(2, 1, 1.0).unwrap();
        assert_eq!(mask_combine(&h, &u, &ones).unwrap(), h);
        let zeros = RegionMask::filled(2, 1, 0.0).unwrap();
        assert_eq!(mask_combine(&h, &u, &zeros).unwrap(), u);
        assert!(mask_combine(&h, &u, &RegionMask::filled(1, 2, 1.0).unwrap()).is_err());
    }

    #[test]
    fn mask_activation_boundary() {
        // mask_start = 80 of T = 100: the user mask covers t = 20..1.
        assert!(user_mask_active(20, 100, 80));
        assert!(!user_mask_active(21, 100, 80));
        assert!(user_mask_active(100, 100, 0));
        assert!(!user_mask_active(1, 100, 100));
    }

    #[test]
    fn config_ranges() {
        assert!(AnonymizationConfig::default().validate().is_ok());
        let bad = AnonymizationConfig {
            t_skip: 120,
            ..AnonymizationConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::OutOfRange { what: "t_skip", .. })));
        let neg = AnonymizationConfig {
            lambda_id: -1.0,
            ..AnonymizationConfig::default()
        };
        assert!(neg.validate().is_err());
    }
}
