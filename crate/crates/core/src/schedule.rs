//! Discrete DDPM noise schedule and the posterior algebra shared by inversion and
//! the anonymizing sampler.
//!
//! Steps are indexed `t = 1..=T`; `alpha_bar(0) = 1` by convention, which makes the
//! posterior standard deviation of the final step zero.

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kv::KvRecord;
use crate::tensor::LatentTensor;

pub const SCHEDULE_FORMAT_VERSION: u32 = 1;

/// Largest β the default schedule will produce when scaled to few steps.
pub const MAX_BETA: f64 = 0.999;

/// Largest `T` accepted from a stored schedule record.
pub const MAX_RECORD_STEPS: usize = 1_000_000;

/// Which standard deviation the stochastic step uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VarianceVariant {
    /// `σ_t² = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`
    #[default]
    Posterior,
    /// `σ_t² = β_t`
    Beta,
}

impl fmt::Display for VarianceVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VarianceVariant::Posterior => "posterior",
            VarianceVariant::Beta => "beta",
        })
    }
}

impl FromStr for VarianceVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "posterior" => Ok(VarianceVariant::Posterior),
            "beta" => Ok(VarianceVariant::Beta),
            other => Err(Error::invalid(format!("unknown variance variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    variant: VarianceVariant,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    /// Index 0 holds ᾱ_0 = 1.
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

/// Linear β schedule, endpoints inclusive.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(steps, beta_start, beta_end, VarianceVariant::Posterior)
}

impl NoiseSchedule {
    pub fn linear(
        steps: usize,
        beta_start: f64,
        beta_end: f64,
        variant: VarianceVariant,
    ) -> Result<Self> {
        if steps == 0 {
            return Err(Error::out_of_range("steps", "T must be at least 1"));
        }
        if !beta_start.is_finite() || !beta_end.is_finite() {
            return Err(Error::out_of_range("beta", "betas must be finite"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::out_of_range(
                "beta",
                format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"),
            ));
        }
        if steps == 1 && beta_start != beta_end {
            return Err(Error::out_of_range(
                "beta",
                "a single-step schedule needs beta_start == beta_end",
            ));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if i + 1 == steps {
                    beta_end
                } else {
                    beta_start + (beta_end - beta_start) * (i as f64) / ((steps - 1) as f64)
                }
            })
            .collect();
        Self::from_betas(beta_start, beta_end, variant, betas)
    }

    /// The default linear schedule: `1e-4 .. 0.02` over 1000 steps, with both
    /// endpoints scaled by `1000 / T` (capped at [`MAX_BETA`]).
    pub fn default_for_steps(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::out_of_range("steps", "T must be at least 1"));
        }
        let scale = 1000.0 / steps as f64;
        let end = (0.02 * scale).min(MAX_BETA);
        let start = if steps == 1 {
            end
        } else {
            (1e-4 * scale).min(end)
        };
        Self::linear(steps, start, end, VarianceVariant::Posterior)
    }

    fn from_betas(
        beta_start: f64,
        beta_end: f64,
        variant: VarianceVariant,
        betas: Vec<f64>,
    ) -> Result<Self> {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        if acc <= 0.0 {
            return Err(Error::out_of_range("beta", "cumulative alpha underflows to zero"));
        }
        let sigmas = (1..=betas.len())
            .map(|t| match variant {
                VarianceVariant::Posterior => {
                    ((1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t]) * betas[t - 1]).sqrt()
                }
                VarianceVariant::Beta => betas[t - 1].sqrt(),
            })
            .collect();
        Ok(Self {
            steps: betas.len(),
            beta_start,
            beta_end,
            variant,
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn variant(&self) -> VarianceVariant {
        self.variant
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::out_of_range(
                "step",
                format!("t={t} outside 1..={}", self.steps),
            ));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// ᾱ_t for `t = 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// `sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·eps`
    pub fn add_noise(&self, x0: &LatentTensor, t: usize, eps: &LatentTensor) -> Result<LatentTensor> {
        self.check_step(t)?;
        eps.ensure_shape(x0.shape())?;
        let a = self.alpha_bar(t).sqrt();
        let b = (1.0 - self.alpha_bar(t)).sqrt();
        LatentTensor::from_f64_iter(
            x0.shape(),
            x0.data()
                .iter()
                .zip(eps.data())
                .map(|(&x, &e)| a * x as f64 + b * e as f64),
            "add_noise",
            t,
        )
    }

    /// `(x_t − β_t / sqrt(1 − ᾱ_t) · eps) / sqrt(α_t)`, kept in `f64`.
    pub(crate) fn posterior_mean_f64(
        &self,
        x_t: &LatentTensor,
        eps_pred: &LatentTensor,
        t: usize,
    ) -> Result<Vec<f64>> {
        self.check_step(t)?;
        eps_pred.ensure_shape(x_t.shape())?;
        let k = self.beta(t) / (1.0 - self.alpha_bar(t)).sqrt();
        let inv_sqrt_alpha = 1.0 / self.alpha(t).sqrt();
        let out: Vec<f64> = x_t
            .data()
            .iter()
            .zip(eps_pred.data())
            .map(|(&x, &e)| (x as f64 - k * e as f64) * inv_sqrt_alpha)
            .collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                stage: "posterior_mean",
                step: t,
            });
        }
        Ok(out)
    }

    pub fn posterior_mean(
        &self,
        x_t: &LatentTensor,
        eps_pred: &LatentTensor,
        t: usize,
    ) -> Result<LatentTensor> {
        let mean = self.posterior_mean_f64(x_t, eps_pred, t)?;
        LatentTensor::from_f64_iter(x_t.shape(), mean.into_iter(), "posterior_mean", t)
    }

    /// One stochastic step with an explicit noise map: `μ_t(x_t, eps) + σ_t·z`.
    pub fn step(
        &self,
        x_t: &LatentTensor,
        eps_pred: &LatentTensor,
        t: usize,
        z: &LatentTensor,
    ) -> Result<LatentTensor> {
        z.ensure_shape(x_t.shape())?;
        let mean = self.posterior_mean_f64(x_t, eps_pred, t)?;
        let sigma = self.sigma(t);
        LatentTensor::from_f64_iter(
            x_t.shape(),
            mean.into_iter()
                .zip(z.data())
                .map(|(m, &z)| m + sigma * z as f64),
            "step",
            t,
        )
    }

    pub fn to_record(&self) -> KvRecord {
        let mut kv = KvRecord::new();
        kv.set("version", SCHEDULE_FORMAT_VERSION);
        kv.set("T", self.steps);
        kv.set("beta_start", format!("{:?}", self.beta_start));
        kv.set("beta_end", format!("{:?}", self.beta_end));
        kv.set("variant", self.variant);
        kv
    }

    pub fn to_text(&self) -> String {
        self.to_record()
            .to_text_ordered(&["version", "T", "beta_start", "beta_end", "variant"])
    }

    pub fn from_record(kv: &KvRecord) -> Result<Self> {
        let version: u32 = kv.require_parsed("version")?;
        if version != SCHEDULE_FORMAT_VERSION {
            return Err(Error::Version {
                expected: SCHEDULE_FORMAT_VERSION,
                found: version,
            });
        }
        for key in kv.keys() {
            if !matches!(key, "version" | "T" | "beta_start" | "beta_end" | "variant") {
                return Err(Error::corrupt(format!("unknown schedule field `{key}`")));
            }
        }
        let steps: usize = kv.require_parsed("T")?;
        if steps > MAX_RECORD_STEPS {
            return Err(Error::corrupt(format!("schedule T = {steps} exceeds {MAX_RECORD_STEPS}")));
        }
        let start: f64 = kv.require_parsed("beta_start")?;
        let end: f64 = kv.require_parsed("beta_end")?;
        let variant: VarianceVariant = kv.require("variant")?.parse()?;
        Self::linear(steps, start, end, variant)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_record(&KvRecord::parse(text)?)
    }

    /// Hex SHA-256 of the serialized text record.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}
