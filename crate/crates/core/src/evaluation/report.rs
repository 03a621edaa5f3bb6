//! Per-image and aggregate metric rows, and their CSV form.
//!
//! Column order (stable): `scope, cell, steps, t_skip, lambda_id, lambda_cfg, lambda_img,
//! mask_preset, mask_start, seed, image, identity_distance, reidentified, reid_percent,
//! pose_distance, gaze_distance, expression_distance, quality_distance, frechet_distance,
//! n_images, error`. `scope` is `image` or `aggregate`. Absent values are empty fields.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::denoiser::AnonymizationConfig;
use crate::error::{Error, Result};
use crate::masks::MaskPreset;

pub const CSV_COLUMNS: [&str; 21] = [
    "scope",
    "cell",
    "steps",
    "t_skip",
    "lambda_id",
    "lambda_cfg",
    "lambda_img",
    "mask_preset",
    "mask_start",
    "seed",
    "image",
    "identity_distance",
    "reidentified",
    "reid_percent",
    "pose_distance",
    "gaze_distance",
    "expression_distance",
    "quality_distance",
    "frechet_distance",
    "n_images",
    "error",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttributeDistances {
    pub pose: Option<f64>,
    pub gaze: Option<f64>,
    pub expression: Option<f64>,
    pub quality: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRow {
    pub cell: usize,
    pub image: String,
    pub identity_distance: f64,
    pub reidentified: bool,
    pub attributes: AttributeDistances,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub cell: usize,
    pub n_images: usize,
    pub reid_percent: Option<f64>,
    pub mean_identity_distance: Option<f64>,
    pub attributes: AttributeDistances,
    pub frechet_distance: Option<f64>,
    pub error: Option<String>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v?;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

impl AggregateRow {
    /// Aggregates over `rows` (all belonging to `cell`), in row order.
    pub fn from_rows(cell: usize, rows: &[&ImageRow], frechet_distance: Option<f64>) -> Self {
        let n = rows.len();
        let hits = rows.iter().filter(|r| r.reidentified).count();
        Self {
            cell,
            n_images: n,
            reid_percent: (n > 0).then(|| 100.0 * hits as f64 / n as f64),
            mean_identity_distance: mean(rows.iter().map(|r| Some(r.identity_distance))),
            attributes: AttributeDistances {
                pose: mean(rows.iter().map(|r| r.attributes.pose)),
                gaze: mean(rows.iter().map(|r| r.attributes.gaze)),
                expression: mean(rows.iter().map(|r| r.attributes.expression)),
                quality: mean(rows.iter().map(|r| r.attributes.quality)),
            },
            frechet_distance,
            error: None,
        }
    }

    pub fn failed(cell: usize, error: String) -> Self {
        Self {
            cell,
            n_images: 0,
            reid_percent: None,
            mean_identity_distance: None,
            attributes: AttributeDistances::default(),
            frechet_distance: None,
            error: Some(error),
        }
    }
}

/// Rows of one grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellReport {
    pub cell: usize,
    /// `None` when the rows do not come from a sampler run (plain evaluation).
    pub config: Option<AnonymizationConfig>,
    pub rows: Vec<ImageRow>,
    pub aggregate: AggregateRow,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub cells: Vec<CellReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct CsvRow {
    scope: String,
    cell: usize,
    steps: Option<usize>,
    t_skip: Option<usize>,
    lambda_id: Option<f64>,
    lambda_cfg: Option<f64>,
    lambda_img: Option<f32>,
    mask_preset: Option<String>,
    mask_start: Option<usize>,
    seed: Option<u64>,
    image: Option<String>,
    identity_distance: Option<f64>,
    reidentified: Option<bool>,
    reid_percent: Option<f64>,
    pose_distance: Option<f64>,
    gaze_distance: Option<f64>,
    expression_distance: Option<f64>,
    quality_distance: Option<f64>,
    frechet_distance: Option<f64>,
    n_images: Option<usize>,
    error: Option<String>,
}

impl CsvRow {
    fn with_config(mut self, cfg: Option<&AnonymizationConfig>) -> Self {
        if let Some(c) = cfg {
            self.steps = Some(c.steps);
            self.t_skip = Some(c.t_skip);
            self.lambda_id = Some(c.lambda_id);
            self.lambda_cfg = Some(c.lambda_cfg);
            self.lambda_img = Some(c.lambda_img);
            self.mask_preset = Some(c.mask_preset.name().to_string());
            self.mask_start = Some(c.mask_start);
            self.seed = Some(c.seed);
        }
        self
    }

    fn config(&self) -> Result<Option<AnonymizationConfig>> {
        let Some(steps) = self.steps else {
            return Ok(None);
        };
        let missing = |k: &str| Error::corrupt(format!("row for cell {} lacks `{k}`", self.cell));
        Ok(Some(AnonymizationConfig {
            steps,
            t_skip: self.t_skip.ok_or_else(|| missing("t_skip"))?,
            lambda_id: self.lambda_id.ok_or_else(|| missing("lambda_id"))?,
            lambda_cfg: self.lambda_cfg.ok_or_else(|| missing("lambda_cfg"))?,
            lambda_img: self.lambda_img.ok_or_else(|| missing("lambda_img"))?,
            mask_preset: self
                .mask_preset
                .as_deref()
                .ok_or_else(|| missing("mask_preset"))?
                .parse::<MaskPreset>()?,
            mask_start: self.mask_start.ok_or_else(|| missing("mask_start"))?,
            seed: self.seed.ok_or_else(|| missing("seed"))?,
        }))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::corrupt(format!("report CSV: {e}"))
}

/// Streams cells to a CSV sink, flushing after each cell so partial output stays valid.
pub struct ReportWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> ReportWriter<W> {
    pub fn new(sink: W) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(sink);
        inner.write_record(CSV_COLUMNS).map_err(csv_err)?;
        inner.flush().map_err(|e| Error::io("report", e))?;
        Ok(Self { inner })
    }

    pub fn write_cell(&mut self, cell: &CellReport) -> Result<()> {
        let cfg = cell.config.as_ref();
        for r in &cell.rows {
            let row = CsvRow {
                scope: "image".into(),
                cell: r.cell,
                image: Some(r.image.clone()),
                identity_distance: Some(r.identity_distance),
                reidentified: Some(r.reidentified),
                pose_distance: r.attributes.pose,
                gaze_distance: r.attributes.gaze,
                expression_distance: r.attributes.expression,
                quality_distance: r.attributes.quality,
                ..CsvRow::default()
            }
            .with_config(cfg);
            self.inner.serialize(row).map_err(csv_err)?;
        }
        let a = &cell.aggregate;
        let row = CsvRow {
            scope: "aggregate".into(),
            cell: a.cell,
            identity_distance: a.mean_identity_distance,
            reid_percent: a.reid_percent,
            pose_distance: a.attributes.pose,
            gaze_distance: a.attributes.gaze,
            expression_distance: a.attributes.expression,
            quality_distance: a.attributes.quality,
            frechet_distance: a.frechet_distance,
            n_images: Some(a.n_images),
            error: a.error.clone(),
            ..CsvRow::default()
        }
        .with_config(cfg);
        self.inner.serialize(row).map_err(csv_err)?;
        self.inner.flush().map_err(|e| Error::io("report", e))
    }

    pub fn into_inner(self) -> Result<W> {
        self.inner
            .into_inner()
            .map_err(|e| Error::corrupt(format!("report CSV: {e}")))
    }
}

impl MetricsReport {
    pub fn aggregate_rows(&self) -> impl Iterator<Item = &AggregateRow> {
        self.cells.iter().map(|c| &c.aggregate)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = ReportWriter::new(Vec::new())?;
        for c in &self.cells {
            w.write_cell(c)?;
        }
        String::from_utf8(w.into_inner()?).map_err(|e| Error::corrupt(e.to_string()))
    }

    /// Parses a report; rows must be grouped by cell with the aggregate row last.
    pub fn from_csv(input: impl Read) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let headers = reader.headers().map_err(csv_err)?.clone();
        if headers.iter().ne(CSV_COLUMNS) {
            return Err(Error::corrupt("report CSV header does not match the expected columns"));
        }
        let mut cells = Vec::new();
        let mut pending: Vec<ImageRow> = Vec::new();
        for rec in reader.deserialize::<CsvRow>() {
            let row = rec.map_err(csv_err)?;
            let attributes = AttributeDistances {
                pose: row.pose_distance,
                gaze: row.gaze_distance,
                expression: row.expression_distance,
                quality: row.quality_distance,
            };
            match row.scope.as_str() {
                "image" => {
                    if pending.first().is_some_and(|p| p.cell != row.cell) {
                        return Err(Error::corrupt(format!("cell {} has no aggregate row", pending[0].cell)));
                    }
                    pending.push(ImageRow {
                        cell: row.cell,
                        image: row.image.clone().ok_or_else(|| Error::corrupt("image row without `image`"))?,
                        identity_distance: row
                            .identity_distance
                            .ok_or_else(|| Error::corrupt("image row without `identity_distance`"))?,
                        reidentified: row
                            .reidentified
                            .ok_or_else(|| Error::corrupt("image row without `reidentified`"))?,
                        attributes,
                    });
                }
                "aggregate" => {
                    if pending.iter().any(|p| p.cell != row.cell) {
                        return Err(Error::corrupt(format!("aggregate for cell {} follows rows of another cell", row.cell)));
                    }
                    cells.push(CellReport {
                        cell: row.cell,
                        config: row.config()?,
                        rows: std::mem::take(&mut pending),
                        aggregate: AggregateRow {
                            cell: row.cell,
                            n_images: row.n_images.unwrap_or(0),
                            reid_percent: row.reid_percent,
                            mean_identity_distance: row.identity_distance,
                            attributes,
                            frechet_distance: row.frechet_distance,
                            error: row.error,
                        },
                    });
                }
                other => return Err(Error::corrupt(format!("unknown scope `{other}`"))),
            }
        }
        if !pending.is_empty() {
            return Err(Error::corrupt("trailing image rows without an aggregate row"));
        }
        Ok(Self { cells })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MetricsReport {
        let rows = vec![
            ImageRow {
                cell: 0,
                image: "a".into(),
                identity_distance: 0.1,
                reidentified: true,
                attributes: AttributeDistances {
                    quality: Some(0.5),
                    ..Default::default()
                },
            },
            ImageRow {
                cell: 0,
                image: "b".into(),
                identity_distance: 0.7,
                reidentified: false,
                attributes: AttributeDistances {
                    quality: Some(1.25),
                    ..Default::default()
                },
            },
        ];
        let refs: Vec<&ImageRow> = rows.iter().collect();
        let aggregate = AggregateRow::from_rows(0, &refs, Some(3.5));
        MetricsReport {
            cells: vec![
                CellReport {
                    cell: 0,
                    config: Some(AnonymizationConfig::default()),
                    rows,
                    aggregate,
                },
                CellReport {
                    cell: 1,
                    config: None,
                    rows: vec![],
                    aggregate: AggregateRow::failed(1, "plugin error: boom".into()),
                },
            ],
        }
    }

    #[test]
    fn csv_roundtrip() {
        let r = sample();
        let text = r.to_csv().unwrap();
        assert!(text.starts_with("scope,cell,steps,t_skip"));
        assert_eq!(MetricsReport::from_csv(text.as_bytes()).unwrap(), r);
    }

    #[test]
    fn aggregate_recomputes() {
        let r = sample();
        let a = &r.cells[0].aggregate;
        assert_eq!(a.reid_percent, Some(50.0));
        assert_eq!(a.mean_identity_distance, Some((0.1 + 0.7) / 2.0));
        assert_eq!(a.attributes.quality, Some(0.875));
        assert_eq!(a.attributes.pose, None);
    }
}
