//! Edit-friendly DDPM inversion: noisy latents built from independent draws, and the
//! per-step noise maps that make the stochastic sampler replay them exactly.

use crate::backbones::{NoisePredictor, Timestep};
use crate::conditioning::IdentityEmbedding;
use crate::error::{Error, Result};
use crate::noise::NoiseSource;
use crate::schedule::NoiseSchedule;
use crate::tensor::{LatentShape, LatentTensor};

/// Noise domain for the forward draws; stream `t` holds the noise of `x_t`.
pub const FORWARD_NOISE_DOMAIN: &str = "inversion/forward";

/// Adapter scale used for every inversion-condition call.
pub const INVERSION_LAMBDA_IMG: f32 = 1.0;

const FINAL_STEP_MAX_ITERS: usize = 200;
const FINAL_STEP_TOLERANCE: f64 = 1e-9;

pub(crate) fn timestep(sched: &NoiseSchedule, t: usize) -> Timestep {
    Timestep {
        t,
        steps: sched.steps(),
        alpha_bar: sched.alpha_bar(t),
    }
}

/// Everything needed to replay the sampler from `x_T` back to `x_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionRecord {
    pub(crate) seed: u64,
    pub(crate) shape: LatentShape,
    /// `x_0..=x_T`; lean records keep only `x_0` and `x_T`.
    pub(crate) latents: Vec<Option<LatentTensor>>,
    /// `z_1..=z_T` at index `t − 1`.
    pub(crate) noise_maps: Vec<LatentTensor>,
    pub(crate) condition: IdentityEmbedding,
    pub(crate) schedule_text: String,
    pub(crate) schedule_fingerprint: String,
    pub(crate) backbone_fingerprint: String,
}

impl InversionRecord {
    pub fn steps(&self) -> usize {
        self.noise_maps.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn shape(&self) -> LatentShape {
        self.shape
    }

    pub fn x0(&self) -> &LatentTensor {
        self.latents[0].as_ref().expect("x_0 is always stored")
    }

    pub fn x_top(&self) -> &LatentTensor {
        self.latents[self.steps()].as_ref().expect("x_T is always stored")
    }

    /// Stored `x_t`, if this record keeps intermediates.
    pub fn latent(&self, t: usize) -> Option<&LatentTensor> {
        self.latents.get(t).and_then(Option::as_ref)
    }

    /// `z_t` for `t = 1..=T`.
    pub fn noise_map(&self, t: usize) -> &LatentTensor {
        &self.noise_maps[t - 1]
    }

    pub fn condition(&self) -> &IdentityEmbedding {
        &self.condition
    }

    pub fn conditioning_fingerprint(&self) -> String {
        self.condition.fingerprint()
    }

    pub fn schedule_text(&self) -> &str {
        &self.schedule_text
    }

    pub fn schedule_fingerprint(&self) -> &str {
        &self.schedule_fingerprint
    }

    pub fn backbone_fingerprint(&self) -> &str {
        &self.backbone_fingerprint
    }

    pub fn is_lean(&self) -> bool {
        self.latents[1..self.steps()].iter().any(Option::is_none)
    }

    /// Drops `x_1..x_{T−1}`.
    pub fn into_lean(mut self) -> Self {
        let top = self.steps();
        for x in &mut self.latents[1..top] {
            *x = None;
        }
        self
    }

    /// The schedule this record was produced with.
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_text(&self.schedule_text)
    }

    /// Refuses to proceed when the record was produced by a different backbone or schedule.
    pub fn check_compatible(&self, backbone: &dyn NoisePredictor, sched: &NoiseSchedule) -> Result<()> {
        let s = sched.fingerprint();
        if s != self.schedule_fingerprint {
            return Err(Error::FingerprintMismatch {
                what: "schedule",
                expected: self.schedule_fingerprint.clone(),
                found: s,
            });
        }
        let b = backbone.fingerprint();
        if b != self.backbone_fingerprint {
            return Err(Error::FingerprintMismatch {
                what: "backbone",
                expected: self.backbone_fingerprint.clone(),
                found: b,
            });
        }
        backbone_accepts(backbone, self.shape, &self.condition)
    }

    /// `x_t`, replaying the inversion condition from `x_T` when the record is lean.
    pub fn latent_at(&self, t: usize, backbone: &dyn NoisePredictor, sched: &NoiseSchedule) -> Result<LatentTensor> {
        if t > self.steps() {
            return Err(Error::out_of_range("step", format!("t={t} beyond T={}", self.steps())));
        }
        if let Some(x) = self.latent(t) {
            return Ok(x.clone());
        }
        let mut x = self.x_top().clone();
        for s in (t + 1..=self.steps()).rev() {
            x = self.replay_step(&x, s, backbone, sched)?;
        }
        Ok(x)
    }

    /// `x_{t−1} = μ_t(x_t, ε(x_t, c_inv)) + σ_t·z_t`.
    pub(crate) fn replay_step(
        &self,
        x: &LatentTensor,
        t: usize,
        backbone: &dyn NoisePredictor,
        sched: &NoiseSchedule,
    ) -> Result<LatentTensor> {
        let eps = predict_checked(backbone, x, sched, t, &self.condition, INVERSION_LAMBDA_IMG)?;
        sched.step(x, &eps, t, self.noise_map(t))
    }

    /// Validates internal consistency; used after deserialization.
    pub(crate) fn validate(&self) -> Result<()> {
        let steps = self.noise_maps.len();
        if steps == 0 || self.latents.len() != steps + 1 {
            return Err(Error::corrupt("record latent/noise-map counts disagree"));
        }
        if self.latents[0].is_none() || self.latents[steps].is_none() {
            return Err(Error::corrupt("record lacks x_0 or x_T"));
        }
        for x in self.latents.iter().flatten().chain(&self.noise_maps) {
            x.ensure_shape(self.shape)?;
        }
        let sched = self.schedule()?;
        if sched.steps() != steps {
            return Err(Error::corrupt(format!(
                "record holds {steps} steps but its schedule has T={}",
                sched.steps()
            )));
        }
        let fp = sched.fingerprint();
        if fp != self.schedule_fingerprint {
            return Err(Error::FingerprintMismatch {
                what: "schedule",
                expected: self.schedule_fingerprint.clone(),
                found: fp,
            });
        }
        if sched.sigma(1) == 0.0 && self.noise_maps[0].data().iter().any(|&v| v != 0.0) {
            return Err(Error::corrupt("z_1 must be zero when sigma_1 = 0"));
        }
        Ok(())
    }
}

fn backbone_accepts(backbone: &dyn NoisePredictor, shape: LatentShape, cond: &IdentityEmbedding) -> Result<()> {
    let info = backbone.info();
    if info.latent_shape != shape {
        return Err(Error::ShapeMismatch {
            expected: format!("backbone latent shape {}", info.latent_shape),
            found: shape.to_string(),
        });
    }
    if info.embedding_dim != cond.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("embedding dimension {}", info.embedding_dim),
            found: format!("embedding dimension {}", cond.dim()),
        });
    }
    Ok(())
}

/// Backbone call that turns shape or finiteness violations into errors naming the step.
pub(crate) fn predict_checked(
    backbone: &dyn NoisePredictor,
    x: &LatentTensor,
    sched: &NoiseSchedule,
    t: usize,
    cond: &IdentityEmbedding,
    lambda_img: f32,
) -> Result<LatentTensor> {
    let out = backbone.predict(x, timestep(sched, t), cond, lambda_img)?;
    check_prediction(&out, x.shape(), t)?;
    Ok(out)
}

pub(crate) fn check_prediction(out: &LatentTensor, shape: LatentShape, t: usize) -> Result<()> {
    if out.shape() != shape {
        return Err(Error::Contract(format!(
            "backbone returned shape {} for input {shape} at t={t}",
            out.shape()
        )));
    }
    if !out.is_all_finite() {
        return Err(Error::NonFinite {
            stage: "backbone output",
            step: t,
        });
    }
    Ok(())
}

/// Solves `x_1 = sqrt(α_1)·x_0 + sqrt(β_1)·ε(x_1, c)` by fixed-point iteration, so the
/// deterministic last step (`σ_1 = 0`) lands on `x_0`. Returns the best iterate.
fn solve_final_latent(
    x0: &LatentTensor,
    start: LatentTensor,
    backbone: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    cond: &IdentityEmbedding,
) -> Result<LatentTensor> {
    let a = sched.alpha(1).sqrt();
    let b = sched.beta(1) / (1.0 - sched.alpha_bar(1)).sqrt();
    let mut x = start;
    let mut best: Option<(f64, LatentTensor)> = None;
    for _ in 0..FINAL_STEP_MAX_ITERS {
        let eps = predict_checked(backbone, &x, sched, 1, cond, INVERSION_LAMBDA_IMG)?;
        let next = LatentTensor::from_f64_iter(
            x.shape(),
            x0.data()
                .iter()
                .zip(eps.data())
                .map(|(&x0, &e)| a * x0 as f64 + b * e as f64),
            "final-step solve",
            1,
        )?;
        let change = next.max_abs_diff(&x)? as f64;
        let improved = best.as_ref().is_none_or(|(c, _)| change < *c);
        if improved {
            best = Some((change, next.clone()));
        }
        x = next;
        if change <= FINAL_STEP_TOLERANCE {
            return Ok(x);
        }
    }
    let (change, x) = best.expect("at least one iteration ran");
    log::warn!("final-step fixed point did not converge (last change {change:e}); reconstruction will not be exact");
    Ok(x)
}

/// Inverts `x0` under `condition`. Forward latents are independent draws:
/// `x_t = sqrt(ᾱ_t)·x_0 + sqrt(1−ᾱ_t)·ε_t` with `ε_t` from stream `t` of the seeded
/// source; `z_t = (x_{t−1} − μ_t(x_t, c)) / σ_t` for `t ≥ 2`. When `σ_1 = 0`, `z_1 = 0`
/// and `x_1` is chosen so that `μ_1(x_1, c) = x_0`.
pub fn invert(
    x0: &LatentTensor,
    backbone: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    condition: &IdentityEmbedding,
    seed: u64,
) -> Result<InversionRecord> {
    let shape = x0.shape();
    backbone_accepts(backbone, shape, condition)?;
    let steps = sched.steps();
    let noise = NoiseSource::new(FORWARD_NOISE_DOMAIN, seed);
    let mut latents = Vec::with_capacity(steps + 1);
    latents.push(x0.clone());
    for t in 1..=steps {
        latents.push(sched.add_noise(x0, t, &noise.normal_latent(t as u64, shape))?);
    }
    let exact_last = sched.sigma(1) == 0.0;
    if exact_last {
        let start = latents[1].clone();
        latents[1] = solve_final_latent(x0, start, backbone, sched, condition)?;
    }

    let mut noise_maps = vec![LatentTensor::zeros(shape); steps];
    let lowest = if exact_last { 2 } else { 1 };
    for t in (lowest..=steps).rev() {
        let eps = predict_checked(backbone, &latents[t], sched, t, condition, INVERSION_LAMBDA_IMG)?;
        let mean = sched.posterior_mean_f64(&latents[t], &eps, t)?;
        let sigma = sched.sigma(t);
        noise_maps[t - 1] = LatentTensor::from_f64_iter(
            shape,
            latents[t - 1]
                .data()
                .iter()
                .zip(mean)
                .map(|(&prev, m)| (prev as f64 - m) / sigma),
            "noise map",
            t,
        )?;
    }

    Ok(InversionRecord {
        seed,
        shape,
        latents: latents.into_iter().map(Some).collect(),
        noise_maps,
        condition: condition.clone(),
        schedule_text: sched.to_text(),
        schedule_fingerprint: sched.fingerprint(),
        backbone_fingerprint: backbone.fingerprint(),
    })
}

/// Per-step outcome of a replay.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundtripReport {
    /// `max |x_0^replayed − x_0|`.
    pub max_abs_error: f32,
    /// `max |x_{t−1}^replayed − x_{t−1}|` at index `t − 1`; `None` where the record is lean.
    pub per_step: Vec<Option<f32>>,
}

/// Replays the sampler from `x_T` with the stored noise maps under the inversion
/// condition and reports the drift from every stored latent.
pub fn verify_roundtrip_with(
    rec: &InversionRecord,
    backbone: &dyn NoisePredictor,
    sched: &NoiseSchedule,
) -> Result<RoundtripReport> {
    rec.check_compatible(backbone, sched)?;
    let mut x = rec.x_top().clone();
    let mut per_step = vec![None; rec.steps()];
    for t in (1..=rec.steps()).rev() {
        x = rec.replay_step(&x, t, backbone, sched)?;
        if let Some(stored) = rec.latent(t - 1) {
            per_step[t - 1] = Some(x.max_abs_diff(stored)?);
        }
    }
    Ok(RoundtripReport {
        max_abs_error: x.max_abs_diff(rec.x0())?,
        per_step,
    })
}

/// `max |x_0^replayed − x_0|`.
pub fn verify_roundtrip(rec: &InversionRecord, backbone: &dyn NoisePredictor, sched: &NoiseSchedule) -> Result<f32> {
    Ok(verify_roundtrip_with(rec, backbone, sched)?.max_abs_error)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{BackboneInfo, ToyPointwiseBackbone};
    use crate::schedule::{make_linear_schedule, VarianceVariant};

    fn shape() -> LatentShape {
        LatentShape::new(4, 8, 8).unwrap()
    }

    struct Zero(BackboneInfo);

    impl NoisePredictor for Zero {
        fn info(&self) -> &BackboneInfo {
            &self.0
        }
        fn fingerprint(&self) -> String {
            "zero".into()
        }
        fn predict(&self, x: &LatentTensor, _: Timestep, _: &IdentityEmbedding, _: f32) -> Result<LatentTensor> {
            Ok(LatentTensor::zeros(x.shape()))
        }
    }

    fn zero_backbone() -> Zero {
        Zero(BackboneInfo {
            name: "zero".into(),
            version: "1".into(),
            latent_shape: shape(),
            embedding_dim: 8,
            deterministic: true,
            tolerance: 0.0,
            max_concurrency: usize::MAX,
        })
    }

    #[test]
    fn zero_backbone_noise_maps_match_closed_form() {
        let sched = make_linear_schedule(5, 0.05, 0.3).unwrap();
        let b = zero_backbone();
        let x0 = NoiseSource::new("x0", 1).normal_latent(0, shape());
        let rec = invert(&x0, &b, &sched, &IdentityEmbedding::null(8), 3).unwrap();
        for t in 2..=5 {
            let inv = 1.0 / sched.alpha(t).sqrt();
            let sigma = sched.sigma(t);
            let xt = rec.latent(t).unwrap().data();
            let prev = rec.latent(t - 1).unwrap().data();
            for (i, &z) in rec.noise_map(t).data().iter().enumerate() {
                let want = (prev[i] as f64 - xt[i] as f64 * inv) / sigma;
                assert!((z as f64 - want).abs() <= 1e-6 * want.abs().max(1.0));
            }
        }
        assert!(rec.noise_map(1).data().iter().all(|&v| v == 0.0));
        // With a zero predictor, x_1 = sqrt(α_1)·x_0 exactly solves the last step.
        assert!(verify_roundtrip(&rec, &b, &sched).unwrap() <= 1e-6);
    }

    #[test]
    fn inversion_is_deterministic_and_lean_replays() {
        let sched = NoiseSchedule::default_for_steps(20).unwrap();
        let b = ToyPointwiseBackbone::new(0, shape(), 8);
        let x0 = NoiseSource::new("x0", 2).normal_latent(0, shape());
        let null = IdentityEmbedding::null(8);
        let a = invert(&x0, &b, &sched, &null, 9).unwrap();
        assert_eq!(a, invert(&x0, &b, &sched, &null, 9).unwrap());
        assert!(verify_roundtrip(&a, &b, &sched).unwrap() <= 1e-4);
        let lean = a.clone().into_lean();
        assert!(lean.is_lean());
        assert!(verify_roundtrip(&lean, &b, &sched).unwrap() <= 1e-4);
        let x7 = lean.latent_at(7, &b, &sched).unwrap();
        assert!(x7.max_abs_diff(a.latent(7).unwrap()).unwrap() <= 1e-4);
    }

    #[test]
    fn beta_variant_uses_a_real_first_noise_map() {
        let sched = NoiseSchedule::linear(10, 0.01, 0.2, VarianceVariant::Beta).unwrap();
        let b = ToyPointwiseBackbone::new(0, shape(), 8);
        let x0 = NoiseSource::new("x0", 4).normal_latent(0, shape());
        let rec = invert(&x0, &b, &sched, &IdentityEmbedding::null(8), 1).unwrap();
        assert!(rec.noise_map(1).data().iter().any(|&v| v != 0.0));
        assert!(verify_roundtrip(&rec, &b, &sched).unwrap() <= 1e-4);
    }

    #[test]
    fn mismatched_schedule_is_refused() {
        let sched = NoiseSchedule::default_for_steps(10).unwrap();
        let other = NoiseSchedule::default_for_steps(11).unwrap();
        let b = ToyPointwiseBackbone::new(0, shape(), 8);
        let x0 = LatentTensor::filled(shape(), 0.3);
        let rec = invert(&x0, &b, &sched, &IdentityEmbedding::null(8), 0).unwrap();
        assert!(matches!(
            verify_roundtrip(&rec, &b, &other),
            Err(Error::FingerprintMismatch { what: "schedule", .. })
        ));
        let b2 = ToyPointwiseBackbone::new(1, shape(), 8);
        assert!(matches!(
            verify_roundtrip(&rec, &b2, &sched),
            Err(Error::FingerprintMismatch { what: "backbone", .. })
        ));
    }
}
