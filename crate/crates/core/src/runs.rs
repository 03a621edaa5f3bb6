//! Resolved command runs and the manifests written next to their outputs.
//!
//! Every command is described by a flat parameter map (`key -> value`). A run
//! resolves the map (applying defaults), executes, and writes a [`RunManifest`]
//! holding the fully resolved map, so `execute(command, manifest.params)` repeats
//! the run exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::AtomicBool;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::backbones::AttributeKind;
use crate::container::{load_record, save_record};
use crate::denoiser::AnonymizationConfig;
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::evaluation::{attack_recover, evaluate_pairs, identity_distance, run_sweep, AttackEmbedding, GridSpec, MetricsReport, ReportWriter, Sweep};
use crate::inversion::InversionRecord;
use crate::masks::{decode_segmentation, load_mask_file, mask_from_regions, save_mask_file, MaskPreset, PaletteSidecar, RegionMask, RegionSet, SegmentationMap};
use crate::pipeline::{Stack, StackSpec};
use crate::schedule::NoiseSchedule;
use crate::toyset::{load_dataset, load_rgb};

pub type Params = BTreeMap<String, String>;

pub const TOOL_NAME: &str = "nullface";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_SUFFIX: &str = ".run.json";

/// Commands that produce a manifest.
pub const COMMANDS: [&str; 6] = ["invert", "anonymize", "mask", "eval", "sweep", "attack"];

const PLUGIN_KEYS: [&str; 5] = ["backend", "codec", "embedder", "parser", "plugin_seed"];
const CONFIG_KEYS: [&str; 8] = ["steps", "t_skip", "lambda_id", "cfg", "lambda_img", "mask_preset", "mask_start", "seed"];
const GRID_PREFIX: &str = "grid.";

/// Parameter keys accepted by `command`. Sweep also accepts `grid.<axis>`.
pub fn known_keys(command: &str) -> Result<Vec<&'static str>> {
    let own: &[&str] = match command {
        "invert" => &["image", "steps", "seed", "lean", "out"],
        "anonymize" => &[
            "record", "image", "steps", "t_skip", "lambda_id", "cfg", "lambda_img", "mask_preset", "mask",
            "mask_start", "seed", "embedding_image", "trace", "out",
        ],
        "mask" => &["image", "segmentation", "palette", "preset", "anonymize", "keep", "resolution", "out"],
        "eval" => &["originals", "anonymized", "metrics", "scorers", "report"],
        "sweep" => &["dataset", "grid", "metrics", "scorers", "report"],
        "attack" => &["original", "anonymized", "attack_embedding", "out"],
        other => return Err(Error::invalid(format!("unknown command `{other}`"))),
    };
    let mut keys: Vec<&str> = own.to_vec();
    keys.extend(PLUGIN_KEYS);
    if matches!(command, "sweep" | "attack") {
        keys.extend(CONFIG_KEYS);
    }
    keys.sort_unstable();
    keys.dedup();
    Ok(keys)
}

/// Rejects keys `command` does not accept.
pub fn check_keys(command: &str, params: &Params) -> Result<()> {
    let known = known_keys(command)?;
    for k in params.keys() {
        let grid_axis = command == "sweep" && k.starts_with(GRID_PREFIX);
        if !grid_axis && !known.contains(&k.as_str()) {
            return Err(Error::invalid(format!("`{k}` is not a parameter of `{command}`")));
        }
    }
    Ok(())
}

fn opt<T: FromStr>(p: &Params, key: &str) -> Result<Option<T>> {
    match p.get(key) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| Error::invalid(format!("invalid value `{v}` for `{key}`"))),
    }
}

fn opt_path(p: &Params, key: &str) -> Option<PathBuf> {
    p.get(key).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn req_path(p: &Params, key: &str) -> Result<PathBuf> {
    opt_path(p, key).ok_or_else(|| Error::invalid(format!("missing required parameter `{key}`")))
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn plugins_from(p: &Params) -> Result<StackSpec> {
    let d = StackSpec::default();
    Ok(StackSpec {
        backbone: opt(p, "backend")?.unwrap_or(d.backbone),
        codec: opt(p, "codec")?.unwrap_or(d.codec),
        embedder: opt(p, "embedder")?.unwrap_or(d.embedder),
        parser: opt(p, "parser")?.unwrap_or(d.parser),
        scorers: Vec::new(),
        plugin_seed: opt(p, "plugin_seed")?.unwrap_or(d.plugin_seed),
        plugin_path: None,
    })
}

fn plugins_into(s: &StackSpec, p: &mut Params) {
    p.insert("backend".into(), s.backbone.clone());
    p.insert("codec".into(), s.codec.clone());
    p.insert("embedder".into(), s.embedder.clone());
    p.insert("parser".into(), s.parser.clone());
    p.insert("plugin_seed".into(), s.plugin_seed.to_string());
}

fn config_from(p: &Params, base: AnonymizationConfig) -> Result<AnonymizationConfig> {
    let cfg = AnonymizationConfig {
        steps: opt(p, "steps")?.unwrap_or(base.steps),
        t_skip: opt(p, "t_skip")?.unwrap_or(base.t_skip),
        lambda_id: opt(p, "lambda_id")?.unwrap_or(base.lambda_id),
        lambda_cfg: opt(p, "cfg")?.unwrap_or(base.lambda_cfg),
        lambda_img: opt(p, "lambda_img")?.unwrap_or(base.lambda_img),
        mask_preset: opt(p, "mask_preset")?.unwrap_or(base.mask_preset),
        mask_start: opt(p, "mask_start")?.unwrap_or(base.mask_start),
        seed: opt(p, "seed")?.unwrap_or(base.seed),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn config_into(c: &AnonymizationConfig, p: &mut Params) {
    p.insert("steps".into(), c.steps.to_string());
    p.insert("t_skip".into(), c.t_skip.to_string());
    p.insert("lambda_id".into(), c.lambda_id.to_string());
    p.insert("cfg".into(), c.lambda_cfg.to_string());
    p.insert("lambda_img".into(), c.lambda_img.to_string());
    p.insert("mask_preset".into(), c.mask_preset.to_string());
    p.insert("mask_start".into(), c.mask_start.to_string());
    p.insert("seed".into(), c.seed.to_string());
}

/// Written as `<output>.run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub params: Params,
    /// Plugin fingerprints by role.
    pub fingerprints: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    /// Command-specific summary (identity distances, report location, ...).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub results: serde_json::Value,
}

impl RunManifest {
    fn new(command: &str, params: Params, stack: Option<&Stack>) -> Self {
        Self {
            tool: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
            command: command.into(),
            params,
            fingerprints: stack.map(Stack::fingerprints).unwrap_or_default(),
            outputs: Vec::new(),
            results: serde_json::Value::Null,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text).map_err(|e| Error::corrupt(format!("invalid run manifest: {e}")))?;
        if m.tool != TOOL_NAME {
            return Err(Error::corrupt(format!("run manifest was written by `{}`", m.tool)));
        }
        if !COMMANDS.contains(&m.command.as_str()) {
            return Err(Error::corrupt(format!("run manifest names unknown command `{}`", m.command)));
        }
        check_keys(&m.command, &m.params).map_err(|e| Error::corrupt(format!("run manifest: {e}")))?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn path_for(output: &Path) -> PathBuf {
        let mut s = output.as_os_str().to_owned();
        s.push(MANIFEST_SUFFIX);
        PathBuf::from(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Writes the manifest next to `output`.
    pub fn save_next_to(&self, output: &Path) -> Result<PathBuf> {
        let path = Self::path_for(output);
        fs::write(&path, self.to_json()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Environment shared by all runs.
pub struct RunContext<'a> {
    pub plugin_path: Option<String>,
    pub engine: &'a Engine,
    /// Checked between sweep cells.
    pub cancel: Option<&'a AtomicBool>,
}

/// Runs `command` with `params` and returns its (already written) manifest.
pub fn execute(command: &str, params: &Params, ctx: &RunContext<'_>) -> Result<RunManifest> {
    check_keys(command, params)?;
    match command {
        "invert" => InvertRun::from_params(params)?.execute(ctx),
        "anonymize" => AnonymizeRun::from_params(params)?.execute(ctx),
        "mask" => MaskRun::from_params(params)?.execute(ctx),
        "eval" => EvalRun::from_params(params)?.execute(ctx),
        "sweep" => SweepRun::from_params(params)?.execute(ctx),
        "attack" => AttackRun::from_params(params)?.execute(ctx),
        other => Err(Error::invalid(format!("unknown command `{other}`"))),
    }
}

fn build_stack(spec: &StackSpec, ctx: &RunContext<'_>, image: &RgbImage) -> Result<Stack> {
    let spec = StackSpec {
        plugin_path: ctx.plugin_path.clone(),
        ..spec.clone()
    };
    spec.build(image.width(), image.height())
}

/// Writes `image` as PNG.
pub fn save_png(image: &RgbImage, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    image.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertRun {
    pub image: PathBuf,
    pub steps: usize,
    pub seed: u64,
    pub lean: bool,
    pub plugins: StackSpec,
    /// Record directory.
    pub out: PathBuf,
}

impl InvertRun {
    pub fn from_params(p: &Params) -> Result<Self> {
        let steps = opt(p, "steps")?.unwrap_or(100);
        if steps == 0 {
            return Err(Error::out_of_range("steps", "T must be at least 1"));
        }
        Ok(Self {
            image: req_path(p, "image")?,
            steps,
            seed: opt(p, "seed")?.unwrap_or(0),
            lean: opt(p, "lean")?.unwrap_or(false),
            plugins: plugins_from(p)?,
            out: req_path(p, "out")?,
        })
    }

    pub fn to_params(&self) -> Params {
        let mut p = Params::new();
        p.insert("image".into(), path_str(&self.image));
        p.insert("steps".into(), self.steps.to_string());
        p.insert("seed".into(), self.seed.to_string());
        p.insert("lean".into(), self.lean.to_string());
        p.insert("out".into(), path_str(&self.out));
        plugins_into(&self.plugins, &mut p);
        p
    }

    pub fn execute(&self, ctx: &RunContext<'_>) -> Result<RunManifest> {
        let image = load_rgb(&self.image)?;
        let stack = build_stack(&self.plugins, ctx, &image)?;
        Ok(self.run_with(&image, &stack)?.1)
    }

    /// Inverts an already loaded image with a prepared stack and writes the record
    /// and its manifest.
    pub fn run_with(&self, image: &RgbImage, stack: &Stack) -> Result<(InversionRecord, RunManifest)> {
        let sched = NoiseSchedule::default_for_steps(self.steps)?;
        let mut rec = stack.invert_image(image, &sched, self.seed)?;
        if self.lean {
            rec = rec.into_lean();
        }
        save_record(&rec, &self.out)?;
        let mut m = RunManifest::new("invert", self.to_params(), Some(stack));
        m.outputs.push(path_str(&self.out));
        m.save_next_to(&self.out)?;
        Ok((rec, m))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnonymizeRun {
    pub record: PathBuf,
    /// Source image; must encode to the record's `x_0`.
    pub image: PathBuf,
    pub config: AnonymizationConfig,
    /// Mask file at latent resolution overriding the preset.
    pub mask: Option<PathBuf>,
    /// Image whose identity is pushed away from; defaults to `image`.
    pub embedding_image: Option<PathBuf>,
    /// Directory for the per-step trace container.
    pub trace: Option<PathBuf>,
    pub plugins: StackSpec,
    pub out: PathBuf,
}

impl AnonymizeRun {
    /// Missing `image`, `steps`, `seed` and plugin names are taken from the record and
    /// the manifest written next to it by `invert`.
    pub fn from_params(p: &Params) -> Result<Self> {
        let record = req_path(p, "record")?;
        let inv = match RunManifest::load(&RunManifest::path_for(&record)) {
            Ok(m) if m.command == "invert" => Some(m.params),
            Ok(_) => None,
            Err(Error::Io { .. }) => None,
            Err(e) => return Err(e),
        };
        let mut merged = Params::new();
        if let Some(inv) = &inv {
            for k in PLUGIN_KEYS.iter().chain(&["image", "steps", "seed"]) {
                if let Some(v) = inv.get(*k) {
                    merged.insert(k.to_string(), v.clone());
                }
            }
        }
        merged.extend(p.iter().map(|(k, v)| (k.clone(), v.clone())));
        let image = opt_path(&merged, "image").ok_or_else(|| {
            Error::invalid("missing required parameter `image` (no invert manifest next to the record)")
        })?;
        Ok(Self {
            record,
            image,
            config: config_from(&merged, AnonymizationConfig::default())?,
            mask: opt_path(&merged, "mask"),
            embedding_image: opt_path(&merged, "embedding_image"),
            trace: opt_path(&merged, "trace"),
            plugins: plugins_from(&merged)?,
            out: req_path(&merged, "out")?,
        })
    }

    pub fn to_params(&self) -> Params {
        let mut p = Params::new();
        p.insert("record".into(), path_str(&self.record));
        p.insert("image".into(), path_str(&self.image));
        config_into(&self.config, &mut p);
        for (k, v) in [("mask", &self.mask), ("embedding_image", &self.embedding_image), ("trace", &self.trace)] {
            if let Some(v) = v {
                p.insert(k.into(), path_str(v));
            }
        }
        p.insert("out".into(), path_str(&self.out));
        plugins_into(&self.plugins, &mut p);
        p
    }

    pub fn execute(&self, ctx: &RunContext<'_>) -> Result<RunManifest> {
        let rec = load_record(&self.record)?;
        let image = load_rgb(&self.image)?;
        let stack = build_stack(&self.plugins, ctx, &image)?;
        let (anon, distance) = self.run_with(&rec, &image, &stack)?;
        self.write_outputs(&anon, distance, &stack)
    }

    /// Saves the output image and its manifest.
    pub fn write_outputs(&self, anonymized: &RgbImage, distance: Option<f64>, stack: &Stack) -> Result<RunManifest> {
        create_parent(&self.out)?;
        save_png(anonymized, &self.out)?;
        let mut m = RunManifest::new("anonymize", self.to_params(), Some(stack));
        m.outputs.push(path_str(&self.out));
        if let Some(t) = &self.trace {
            m.outputs.push(path_str(t));
        }
        m.results = serde_json::json!({ "identity_distance": distance });
        m.save_next_to(&self.out)?;
        Ok(m)
    }

    /// Anonymizes `image` from an already loaded record. Returns the output image and
    /// its identity distance to `image` (absent when the embedder finds no face).
    pub fn run_with(&self, rec: &InversionRecord, image: &RgbImage, stack: &Stack) -> Result<(RgbImage, Option<f64>)> {
        let cfg = &self.config;
        if cfg.steps != rec.steps() {
            return Err(Error::out_of_range(
                "steps",
                format!("{} does not match the record's T={}", cfg.steps, rec.steps()),
            ));
        }
        if cfg.seed != rec.seed() {
            return Err(Error::out_of_range(
                "seed",
                format!("{} does not match the record's inversion seed {}", cfg.seed, rec.seed()),
            ));
        }
        let x0 = stack.codec.encode(image)?;
        if x0 != *rec.x0() {
            return Err(Error::FingerprintMismatch {
                what: "image",
                expected: "the image the record was inverted from".into(),
                found: path_str(&self.image),
            });
        }
        let sched = rec.schedule()?;
        let user_mask = match &self.mask {
            Some(path) => {
                let s = rec.shape();
                Some(load_mask_file(path, Some((s.width, s.height)))?)
            }
            None => None,
        };
        let embedding = match &self.embedding_image {
            Some(path) => Some(stack.embed(&load_rgb(path)?)?),
            None => None,
        };
        let out = stack.anonymize_image(
            image,
            rec,
            cfg,
            &sched,
            user_mask.as_ref(),
            embedding.as_ref(),
            self.trace.is_some(),
        )?;
        if let (Some(dir), Some(trace)) = (&self.trace, &out.trace) {
            trace.save(rec, cfg, dir)?;
        }
        Ok((out.image.clone(), distance_or_none(stack, image, &out.image)?))
    }
}

/// Identity distance, or `None` when either image has no detectable face.
pub fn distance_or_none(stack: &Stack, a: &RgbImage, b: &RgbImage) -> Result<Option<f64>> {
    let embed = |img: &RgbImage| match stack.embed(img) {
        Ok(e) => Ok(Some(e)),
        Err(Error::FaceNotFound(_)) => Ok(None),
        Err(e) => Err(e),
    };
    match (embed(a)?, embed(b)?) {
        (Some(x), Some(y)) => identity_distance(&x, &y).map(Some),
        _ => Ok(None),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskResolution {
    Latent,
    Image,
}

impl FromStr for MaskResolution {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent" => Ok(Self::Latent),
            "image" => Ok(Self::Image),
            other => Err(Error::invalid(format!("unknown mask resolution `{other}` (expected latent or image)"))),
        }
    }
}

impl std::fmt::Display for MaskResolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Latent => "latent",
            Self::Image => "image",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskRun {
    pub image: PathBuf,
    /// Label PNG used instead of the parser plugin.
    pub segmentation: Option<PathBuf>,
    pub palette: Option<PathBuf>,
    /// Regions to anonymize and keep; either from a preset or given explicitly.
    pub preset: Option<MaskPreset>,
    pub anonymize: RegionSet,
    pub keep: RegionSet,
    pub resolution: MaskResolution,
    pub plugins: StackSpec,
    pub out: PathBuf,
}

impl MaskRun {
    pub fn from_params(p: &Params) -> Result<Self> {
        let preset: Option<MaskPreset> = opt(p, "preset")?;
        let anonymize: Option<RegionSet> = opt(p, "anonymize")?;
        let keep: Option<RegionSet> = opt(p, "keep")?;
        let (preset, anonymize, keep) = match (preset, anonymize) {
            (Some(_), Some(_)) => return Err(Error::invalid("give either `preset` or `anonymize`, not both")),
            (Some(pr), None) => {
                if keep.is_some() {
                    return Err(Error::invalid("`keep` cannot be combined with `preset`"));
                }
                (Some(pr), pr.anonymized(), pr.kept())
            }
            (None, Some(a)) => (None, a, keep.unwrap_or_default()),
            (None, None) => {
                let pr = MaskPreset::WholeFace;
                (Some(pr), pr.anonymized(), pr.kept())
            }
        };
        Ok(Self {
            image: req_path(p, "image")?,
            segmentation: opt_path(p, "segmentation"),
            palette: opt_path(p, "palette"),
            preset,
            anonymize,
            keep,
            resolution: opt(p, "resolution")?.unwrap_or(MaskResolution::Latent),
            plugins: plugins_from(p)?,
            out: req_path(p, "out")?,
        })
    }

    pub fn to_params(&self) -> Params {
        let mut p = Params::new();
        p.insert("image".into(), path_str(&self.image));
        if let Some(s) = &self.segmentation {
            p.insert("segmentation".into(), path_str(s));
        }
        if let Some(s) = &self.palette {
            p.insert("palette".into(), path_str(s));
        }
        match self.preset {
            Some(pr) => {
                p.insert("preset".into(), pr.to_string());
            }
            None => {
                p.insert("anonymize".into(), self.anonymize.to_string());
                p.insert("keep".into(), self.keep.to_string());
            }
        }
        p.insert("resolution".into(), self.resolution.to_string());
        p.insert("out".into(), path_str(&self.out));
        plugins_into(&self.plugins, &mut p);
        p
    }

    pub fn build(&self, image: &RgbImage, stack: &Stack) -> Result<RegionMask> {
        let seg = match &self.segmentation {
            Some(path) => {
                let sidecar = match &self.palette {
                    Some(sp) => Some(PaletteSidecar::parse(&fs::read_to_string(sp).map_err(|e| Error::io(sp, e))?)?),
                    None => None,
                };
                let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
                let seg = decode_segmentation(&bytes, sidecar.as_ref())?;
                check_seg_size(&seg, image)?;
                seg
            }
            None => stack.segment(image)?,
        };
        let (w, h) = match self.resolution {
            MaskResolution::Image => (seg.width(), seg.height()),
            MaskResolution::Latent => {
                let s = stack.codec.latent_shape_for(image.width(), image.height())?;
                (s.width, s.height)
            }
        };
        mask_from_regions(&seg, self.anonymize, self.keep, w, h)
    }

    pub fn execute(&self, ctx: &RunContext<'_>) -> Result<RunManifest> {
        let image = load_rgb(&self.image)?;
        let stack = build_stack(&self.plugins, ctx, &image)?;
        let mask = self.build(&image, &stack)?;
        create_parent(&self.out)?;
        save_mask_file(&mask, &self.out)?;
        let mut m = RunManifest::new("mask", self.to_params(), Some(&stack));
        m.outputs.push(path_str(&self.out));
        m.results = serde_json::json!({
            "mean": mask.mean(),
            "warning": mask.warning(),
        });
        m.save_next_to(&self.out)?;
        Ok(m)
    }
}

fn check_seg_size(seg: &SegmentationMap, image: &RgbImage) -> Result<()> {
    if seg.width() != image.width() as usize || seg.height() != image.height() as usize {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{} segmentation", image.width(), image.height()),
            found: format!("{}x{}", seg.width(), seg.height()),
        });
    }
    Ok(())
}

/// Metrics that can be switched on for `eval` and `sweep`. Re-ID and identity
/// distance are always reported.
pub const METRICS: [&str; 7] = ["reid", "id-dist", "frechet", "pose", "gaze", "expression", "quality"];
const DEFAULT_METRICS: &str = "reid,id-dist,frechet";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricSet {
    pub frechet: bool,
    pub attributes: Vec<AttributeKind>,
}

impl MetricSet {
    pub fn parse(list: &str) -> Result<Self> {
        let mut frechet = false;
        let mut attributes = Vec::new();
        for m in list.split(',').map(str::trim).filter(|m| !m.is_empty()) {
            match m {
                "reid" | "id-dist" => {}
                "frechet" => frechet = true,
                other => {
                    let kind = AttributeKind::ALL
                        .into_iter()
                        .find(|k| k.to_string() == other)
                        .ok_or_else(|| {
                            Error::invalid(format!("unknown metric `{other}` (expected one of {})", METRICS.join(", ")))
                        })?;
                    if !attributes.contains(&kind) {
                        attributes.push(kind);
                    }
                }
            }
        }
        Ok(Self { frechet, attributes })
    }

    fn to_param(&self) -> String {
        let mut v = vec!["reid".to_string(), "id-dist".to_string()];
        if self.frechet {
            v.push("frechet".into());
        }
        v.extend(self.attributes.iter().map(|k| k.to_string()));
        v.join(",")
    }
}

fn scorers_for(p: &Params, metrics: &MetricSet) -> Result<Vec<String>> {
    match p.get("scorers") {
        Some(list) => Ok(list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()),
        None => Ok(metrics.attributes.iter().map(|k| format!("toy-{k}")).collect()),
    }
}

/// Attaches scorers and drops features the metric selection does not ask for.
fn configure_stack(mut stack: Stack, metrics: &MetricSet) -> Result<Stack> {
    if !metrics.frechet {
        stack.features = None;
    } else if stack.features.is_none() {
        return Err(Error::Plugin(
            "the `frechet` metric needs a feature extractor; the selected embedder provides none".into(),
        ));
    }
    for kind in &metrics.attributes {
        if !stack.scorers.iter().any(|s| s.kind() == *kind) {
            return Err(Error::Plugin(format!("metric `{kind}` has no matching scorer plugin")));
        }
    }
    stack.scorers.retain(|s| metrics.attributes.contains(&s.kind()));
    Ok(stack)
}

fn write_report(report: &MetricsReport, path: &Path) -> Result<()> {
    create_parent(path)?;
    fs::write(path, report.to_csv()?).map_err(|e| Error::io(path, e))
}

fn aggregate_json(report: &MetricsReport) -> serde_json::Value {
    serde_json::Value::Array(
        report
            .aggregate_rows()
            .map(|a| {
                serde_json::json!({
                    "cell": a.cell,
                    "n_images": a.n_images,
                    "reid_percent": a.reid_percent,
                    "mean_identity_distance": a.mean_identity_distance,
                    "frechet_distance": a.frechet_distance,
                    "error": a.error,
                })
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRun {
    pub originals: PathBuf,
    pub anonymized: PathBuf,
    pub metrics: MetricSet,
    pub plugins: StackSpec,
    pub report: PathBuf,
}

impl EvalRun {
    pub fn from_params(p: &Params) -> Result<Self> {
        let metrics = MetricSet::parse(p.get("metrics").map_or(DEFAULT_METRICS, String::as_str))?;
        let mut plugins = plugins_from(p)?;
        plugins.scorers = scorers_for(p, &metrics)?;
        Ok(Self {
            originals: req_path(p, "originals")?,
            anonymized: req_path(p, "anonymized")?,
            metrics,
            plugins,
            report: req_path(p, "report")?,
        })
    }

    pub fn to_params(&self) -> Params {
        let mut p = Params::new();
        p.insert("originals".into(), path_str(&self.originals));
        p.insert("anonymized".into(), path_str(&self.anonymized));
        p.insert("metrics".into(), self.metrics.to_param());
        p.insert("scorers".into(), self.plugins.scorers.join(","));
        p.insert("report".into(), path_str(&self.report));
        plugins_into(&self.plugins, &mut p);
        p
    }

    pub fn execute(&self, ctx: &RunContext<'_>) -> Result<RunManifest> {
        let originals = load_dataset(&self.originals)?;
        let anonymized = load_dataset(&self.anonymized)?;
        let first = originals.first().ok_or_else(|| Error::invalid("dataset is empty"))?;
        let stack = configure_stack(build_stack(&self.plugins, ctx, &first.image)?, &self.metrics)?;
        let cell = evaluate_pairs(&originals, &anonymized, &stack, ctx.engine)?;
        let report = MetricsReport { cells: vec![cell] };
        write_report(&report, &self.report)?;
        let mut m = RunManifest::new("eval", self.to_params(), Some(&stack));
        m.outputs.push(path_str(&self.report));
        m.results = aggregate_json(&report);
        m.save_next_to(&self.report)?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun {
    pub dataset: PathBuf,
    pub grid: GridSpec,
    pub base: AnonymizationConfig,
    pub metrics: MetricSet,
    pub plugins: StackSpec,
    pub report: PathBuf,
}

impl SweepRun {
    /// Grid axes come from the `grid` file and from `grid.<axis>` keys (keys win).
    pub fn from_params(p: &Params) -> Result<Self> {
        let mut axes = Params::new();
        if let Some(path) = opt_path(p, "grid") {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let kv = crate::kv::KvRecord::parse(&text)?;
            for (k, v) in kv.iter() {
                axes.insert(k.to_string(), v.to_string());
            }
        }
        for (k, v) in p {
            if let Some(axis) = k.strip_prefix(GRID_PREFIX) {
                axes.insert(axis.to_string(), v.clone());
            }
        }
        let mut grid = GridSpec::default();
        for (k, v) in &axes {
            grid.set_axis(k, v)?;
        }
        let metrics = MetricSet::parse(p.get("metrics").map_or(DEFAULT_METRICS, String::as_str))?;
        let mut plugins = plugins_from(p)?;
        plugins.scorers = scorers_for(p, &metrics)?;
        Ok(Self {
            dataset: req_path(p, "dataset")?,
            grid,
            base: config_from(p, AnonymizationConfig::default())?,
            metrics,
            plugins,
            report: req_path(p, "report")?,
        })
    }

    /// Axes are written inline as `grid.<axis>`, so the manifest does not depend on the grid file.
    pub fn to_params(&self) -> Params {
        let mut p = Params::new();
        p.insert("dataset".into(), path_str(&self.dataset));
        config_into(&self.base, &mut p);
        let join = |v: Vec<String>| v.join(",");
        let g = &self.grid;
        let axes = [
            ("lambda_id", join(g.lambda_id.iter().map(|v| v.to_string()).collect())),
            ("lambda_cfg", join(g.lambda_cfg.iter().map(|v| v.to_string()).collect())),
            ("lambda_img", join(g.lambda_img.iter().map(|v| v.to_string()).collect())),
            ("t_skip", join(g.t_skip.iter().map(|v| v.to_string()).collect())),
            ("mask_preset", join(g.mask_preset.iter().map(|v| v.to_string()).collect())),
            ("mask_start", join(g.mask_start.iter().map(|v| v.to_string()).collect())),
        ];
        for (axis, values) in axes {
            if !values.is_empty() {
                p.insert(format!("{GRID_PREFIX}{axis}"), values);
            }
        }
        p.insert("metrics".into(), self.metrics.to_param());
        p.insert("scorers".into(), self.plugins.scorers.join(","));
        p.insert("report".into(), path_str(&self.report));
        plugins_into(&self.plugins, &mut p);
        p
    }

    /// Cells are streamed to the report as they finish, so an interrupted sweep
    /// leaves a valid partial CSV.
    pub fn execute(&self, ctx: &RunContext<'_>) -> Result<RunManifest> {
        let dataset = load_dataset(&self.dataset)?;
        let cells = self.grid.cells(&self.base)?;
        let first = dataset.first().ok_or_else(|| Error::invalid("dataset is empty"))?;
        let stack = configure_stack(build_stack(&self.plugins, ctx, &first.image)?, &self.metrics)?;
        create_parent(&self.report)?;
        let file = fs::File::create(&self.report).map_err(|e| Error::io(&self.report, e))?;
        let mut writer = ReportWriter::new(file)?;
        let report = run_sweep(
            &Sweep {
                dataset: &dataset,
                cells: &cells,
                stack: &stack,
                engine: ctx.engine,
                cancel: ctx.cancel,
            },
            |cell| writer.write_cell(cell),
        )?;
        writer.into_inner()?;
        let mut m = RunManifest::new("sweep", self.to_params(), Some(&stack));
        m.outputs.push(path_str(&self.report));
        m.results = serde_json::json!({
            "cells_planned": cells.len(),
            "cells_completed": report.cells.len(),
            "aggregates": aggregate_json(&report),
        });
        m.save_next_to(&self.report)?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackRun {
    pub original: PathBuf,
    pub anonymized: PathBuf,
    /// The attacker's guess of the anonymization settings.
    pub config: AnonymizationConfig,
    pub embedding: AttackEmbedding,
    pub plugins: StackSpec,
    pub out: PathBuf,
}

impl AttackRun {
    pub fn from_params(p: &Params) -> Result<Self> {
        Ok(Self {
            original: req_path(p, "original")?,
            anonymized: req_path(p, "anonymized")?,
            config: config_from(p, AnonymizationConfig::default())?,
            embedding: opt(p, "attack_embedding")?.unwrap_or_default(),
            plugins: plugins_from(p)?,
            out: req_path(p, "out")?,
        })
    }

    pub fn to_params(&self) -> Params {
        let mut p = Params::new();
        p.insert("original".into(), path_str(&self.original));
        p.insert("anonymized".into(), path_str(&self.anonymized));
        config_into(&self.config, &mut p);
        p.insert("attack_embedding".into(), self.embedding.to_string());
        p.insert("out".into(), path_str(&self.out));
        plugins_into(&self.plugins, &mut p);
        p
    }

    pub fn execute(&self, ctx: &RunContext<'_>) -> Result<RunManifest> {
        let original = load_rgb(&self.original)?;
        let anonymized = load_rgb(&self.anonymized)?;
        let stack = build_stack(&self.plugins, ctx, &original)?;
        let outcome = attack_recover(&original, &anonymized, &self.config, self.embedding, &stack)?;
        create_parent(&self.out)?;
        save_png(&outcome.attacked, &self.out)?;
        let mut m = RunManifest::new("attack", self.to_params(), Some(&stack));
        m.outputs.push(path_str(&self.out));
        m.results = serde_json::json!({
            "anonymized_distance": outcome.anonymized_distance,
            "attacked_distance": outcome.attacked_distance,
        });
        m.save_next_to(&self.out)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip_and_rejections() {
        let mut params = Params::new();
        params.insert("image".into(), "a.png".into());
        params.insert("out".into(), "a.inv".into());
        let run = InvertRun::from_params(&params).unwrap();
        let m = RunManifest::new("invert", run.to_params(), None);
        let back = RunManifest::parse(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(InvertRun::from_params(&back.params).unwrap(), run);

        let bad = m.to_json().unwrap().replace("\"invert\"", "\"explode\"");
        assert!(RunManifest::parse(&bad).is_err());
        let extra = m.to_json().unwrap().replacen("{", "{\"bogus\": 1,", 1);
        assert!(RunManifest::parse(&extra).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut params = Params::new();
        params.insert("image".into(), "a.png".into());
        params.insert("lambda_id".into(), "1".into());
        assert!(check_keys("invert", &params).is_err());
        assert!(check_keys("sweep", &Params::from([("grid.lambda_cfg".to_string(), "1".to_string())])).is_ok());
    }

    #[test]
    fn metric_selection() {
        let m = MetricSet::parse("reid,id-dist,pose,quality").unwrap();
        assert!(!m.frechet);
        assert_eq!(m.attributes, vec![AttributeKind::Pose, AttributeKind::Quality]);
        assert!(MetricSet::parse("fid").is_err());
    }
}
