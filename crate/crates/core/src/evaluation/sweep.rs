//! Parameter grids, dataset evaluation, and the invert + anonymize + measure sweep.

use std::sync::atomic::{AtomicBool, Ordering};

use image::RgbImage;

use super::metrics::{attribute_distance, frechet_distance, identity_distance, re_id_rate};
use super::report::{AggregateRow, AttributeDistances, CellReport, ImageRow, MetricsReport};
use crate::backbones::AttributeKind;
use crate::conditioning::IdentityEmbedding;
use crate::denoiser::AnonymizationConfig;
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::inversion::InversionRecord;
use crate::kv::KvRecord;
use crate::masks::MaskPreset;
use crate::pipeline::{derive_seed, Stack};
use crate::schedule::NoiseSchedule;
use crate::toyset::DatasetImage;

/// Values per swept parameter; empty axes take the base configuration's value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GridSpec {
    pub lambda_id: Vec<f64>,
    pub lambda_cfg: Vec<f64>,
    pub lambda_img: Vec<f32>,
    pub t_skip: Vec<usize>,
    pub mask_preset: Vec<MaskPreset>,
    pub mask_start: Vec<usize>,
}

const GRID_KEYS: [&str; 6] = ["lambda_id", "lambda_cfg", "lambda_img", "t_skip", "mask_preset", "mask_start"];

fn parse_list<T: std::str::FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    let values: Vec<T> = raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::invalid(format!("grid axis `{key}`: invalid value `{s}`")))
        })
        .collect::<Result<_>>()?;
    if values.is_empty() {
        return Err(Error::invalid(format!("grid axis `{key}` has no values")));
    }
    Ok(values)
}

impl GridSpec {
    /// Parses `key = v1, v2, ...` lines.
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KvRecord::parse(text)?;
        let mut g = Self::default();
        for (k, v) in kv.iter() {
            g.set_axis(k, v)?;
        }
        Ok(g)
    }

    /// Sets one axis from `key` and a comma-separated value list.
    pub fn set_axis(&mut self, key: &str, values: &str) -> Result<()> {
        match key {
            "lambda_id" => self.lambda_id = parse_list(key, values)?,
            "lambda_cfg" => self.lambda_cfg = parse_list(key, values)?,
            "lambda_img" => self.lambda_img = parse_list(key, values)?,
            "t_skip" => self.t_skip = parse_list(key, values)?,
            "mask_preset" => self.mask_preset = parse_list(key, values)?,
            "mask_start" => self.mask_start = parse_list(key, values)?,
            other => {
                return Err(Error::invalid(format!(
                    "unknown grid axis `{other}` (expected one of {})",
                    GRID_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Cartesian product over the axes, outermost first in the order
    /// `lambda_id, lambda_cfg, lambda_img, t_skip, mask_preset, mask_start`.
    pub fn cells(&self, base: &AnonymizationConfig) -> Result<Vec<AnonymizationConfig>> {
        fn or<T: Clone>(v: &[T], d: T) -> Vec<T> {
            if v.is_empty() {
                vec![d]
            } else {
                v.to_vec()
            }
        }
        let mut out = Vec::new();
        for &lambda_id in &or(&self.lambda_id, base.lambda_id) {
            for &lambda_cfg in &or(&self.lambda_cfg, base.lambda_cfg) {
                for &lambda_img in &or(&self.lambda_img, base.lambda_img) {
                    for &t_skip in &or(&self.t_skip, base.t_skip) {
                        for &mask_preset in &or(&self.mask_preset, base.mask_preset) {
                            for &mask_start in &or(&self.mask_start, base.mask_start) {
                                let cfg = AnonymizationConfig {
                                    lambda_id,
                                    lambda_cfg,
                                    lambda_img,
                                    t_skip,
                                    mask_preset,
                                    mask_start,
                                    ..base.clone()
                                };
                                cfg.validate()?;
                                out.push(cfg);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Measurements of one original image, reused by every cell.
struct Reference {
    embedding: IdentityEmbedding,
    features: Option<Vec<f64>>,
    scores: Vec<(AttributeKind, Vec<f64>)>,
}

fn reference(stack: &Stack, image: &RgbImage) -> Result<Reference> {
    Ok(Reference {
        embedding: stack.embed(image)?,
        features: stack.features.as_ref().map(|f| f.features(image)).transpose()?,
        scores: stack
            .scorers
            .iter()
            .map(|s| Ok((s.kind(), s.score(image)?)))
            .collect::<Result<_>>()?,
    })
}

fn attribute_row(refs: &Reference, probe: &Reference) -> Result<AttributeDistances> {
    let mut out = AttributeDistances::default();
    for ((kind, a), (_, b)) in refs.scores.iter().zip(&probe.scores) {
        let d = Some(attribute_distance(*kind, a, b)?);
        match kind {
            AttributeKind::Pose => out.pose = d,
            AttributeKind::Gaze => out.gaze = d,
            AttributeKind::Expression => out.expression = d,
            AttributeKind::Quality => out.quality = d,
        }
    }
    Ok(out)
}

/// Rows and aggregate for processed images paired with their originals.
fn measure_cell(
    cell: usize,
    config: Option<AnonymizationConfig>,
    ids: &[String],
    originals: &[Reference],
    processed: &[Reference],
) -> Result<CellReport> {
    let gallery: Vec<IdentityEmbedding> = originals.iter().map(|r| r.embedding.clone()).collect();
    let probes: Vec<IdentityEmbedding> = processed.iter().map(|r| r.embedding.clone()).collect();
    let reid = re_id_rate(&gallery, &probes)?;
    let mut rows = Vec::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        rows.push(ImageRow {
            cell,
            image: id.clone(),
            identity_distance: identity_distance(&gallery[i], &probes[i])?,
            reidentified: reid.hit(i),
            attributes: attribute_row(&originals[i], &processed[i])?,
        });
    }
    let frechet = match (
        originals.iter().map(|r| r.features.clone()).collect::<Option<Vec<_>>>(),
        processed.iter().map(|r| r.features.clone()).collect::<Option<Vec<_>>>(),
    ) {
        (Some(a), Some(b)) if a.len() >= 2 => Some(frechet_distance(&a, &b)?),
        _ => None,
    };
    let refs: Vec<&ImageRow> = rows.iter().collect();
    let aggregate = AggregateRow::from_rows(cell, &refs, frechet);
    Ok(CellReport {
        cell,
        config,
        rows,
        aggregate,
    })
}

fn check_dataset(dataset: &[DatasetImage]) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    if dataset.len() < 2 {
        return Err(Error::invalid("dataset needs at least 2 identities"));
    }
    Ok(())
}

/// Scores `anonymized` against `originals`, paired by id.
pub fn evaluate_pairs(
    originals: &[DatasetImage],
    anonymized: &[DatasetImage],
    stack: &Stack,
    engine: &Engine,
) -> Result<CellReport> {
    check_dataset(originals)?;
    let mut paired = Vec::with_capacity(originals.len());
    for o in originals {
        let a = anonymized
            .iter()
            .find(|a| a.id == o.id)
            .ok_or_else(|| Error::invalid(format!("no anonymized image for `{}`", o.id)))?;
        paired.push((o, a));
    }
    if anonymized.len() != originals.len() {
        return Err(Error::invalid(format!(
            "{} originals but {} anonymized images",
            originals.len(),
            anonymized.len()
        )));
    }
    let refs: Vec<(Reference, Reference)> = engine
        .map(&paired, |_, (o, a)| Ok((reference(stack, &o.image)?, reference(stack, &a.image)?)))
        .into_iter()
        .collect::<Result<_>>()?;
    let (orig, proc): (Vec<_>, Vec<_>) = refs.into_iter().unzip();
    let ids: Vec<String> = originals.iter().map(|o| o.id.clone()).collect();
    measure_cell(0, None, &ids, &orig, &proc)
}

/// Inversions of a dataset under one schedule, computed once and shared by cells.
pub struct InversionCache {
    pub records: Vec<InversionRecord>,
}

impl InversionCache {
    /// Image `i` is inverted with seed `derive_seed(seed, i)`.
    pub fn build(dataset: &[DatasetImage], stack: &Stack, sched: &NoiseSchedule, seed: u64, engine: &Engine) -> Result<Self> {
        let records = engine
            .map(dataset, |i, d| stack.invert_image(&d.image, sched, derive_seed(seed, i)))
            .into_iter()
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }
}

/// Sweep inputs.
pub struct Sweep<'a> {
    pub dataset: &'a [DatasetImage],
    pub cells: &'a [AnonymizationConfig],
    pub stack: &'a Stack,
    pub engine: &'a Engine,
    /// Checked between cells; completed cells are kept.
    pub cancel: Option<&'a AtomicBool>,
}

/// Runs every cell: anonymize each image from the shared inversion cache, decode,
/// and measure against the originals. A failing cell is reported with its error and
/// no image rows; later cells still run. `sink` sees each finished cell in order.
pub fn run_sweep(sweep: &Sweep<'_>, mut sink: impl FnMut(&CellReport) -> Result<()>) -> Result<MetricsReport> {
    check_dataset(sweep.dataset)?;
    let first = sweep.cells.first().ok_or_else(|| Error::invalid("parameter grid is empty"))?;
    if let Some(c) = sweep.cells.iter().find(|c| c.steps != first.steps || c.seed != first.seed) {
        return Err(Error::invalid(format!(
            "all grid cells must share steps and seed (found T={} seed={} and T={} seed={})",
            first.steps, first.seed, c.steps, c.seed
        )));
    }
    let sched = NoiseSchedule::default_for_steps(first.steps)?;
    let stack = sweep.stack;
    let engine = sweep.engine;
    let originals: Vec<Reference> = engine
        .map(sweep.dataset, |_, d| reference(stack, &d.image))
        .into_iter()
        .collect::<Result<_>>()?;
    let cache = InversionCache::build(sweep.dataset, stack, &sched, first.seed, engine)?;
    let ids: Vec<String> = sweep.dataset.iter().map(|d| d.id.clone()).collect();
    let indices: Vec<usize> = (0..sweep.dataset.len()).collect();

    let mut report = MetricsReport::default();
    for (cell, cfg) in sweep.cells.iter().enumerate() {
        if sweep.cancel.is_some_and(|c| c.load(Ordering::SeqCst)) {
            break;
        }
        let processed: Result<Vec<Reference>> = engine
            .map(&indices, |_, &i| {
                let d = &sweep.dataset[i];
                let emb = (cfg.lambda_id != 0.0).then_some(&originals[i].embedding);
                let out = stack.anonymize_image(&d.image, &cache.records[i], cfg, &sched, None, emb, false)?;
                reference(stack, &out.image)
            })
            .into_iter()
            .collect();
        let result = processed.and_then(|p| measure_cell(cell, Some(cfg.clone()), &ids, &originals, &p));
        let cell_report = result.unwrap_or_else(|e| {
            log::warn!("grid cell {cell} failed: {e}");
            CellReport {
                cell,
                config: Some(cfg.clone()),
                rows: Vec::new(),
                aggregate: AggregateRow::failed(cell, e.to_string()),
            }
        });
        sink(&cell_report)?;
        report.cells.push(cell_report);
    }
    Ok(report)
}
