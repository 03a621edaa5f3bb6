//! Plugin manifests, registration with a contract probe, and concurrency wrappers.
//!
//! Manifest format is a flat key/value record:
//!
//! ```text
//! name = toy-attention
//! version = 1
//! kind = backbone
//! latent_shape = 12x32x32
//! embedding_dim = 64
//! determinism = exact
//! max_concurrency = 4
//! launch = builtin:toy-attention
//! seed = 0
//! ```
//!
//! `determinism` is `exact` or `tolerance:<max-abs>`. `launch` is `builtin:<name>` or
//! `exec:<program> [args...]` (JSON lines over stdin/stdout, see `serve_backbone`).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Condvar, Mutex};

use image::{Rgb, RgbImage};

use super::process::{ProcessBackbone, ProcessEmbedder};
use super::toy::{
    ToyAttentionBackbone, ToyCodec, ToyFaceParser, ToyPointwiseBackbone, ToyScorer,
    ToyStatsEmbedder, TOY_EMBED_DIM,
};
use super::{
    AttributeScorer, BackboneInfo, FaceParser, IdentityEmbedder, LatentCodec, NoisePredictor,
    Timestep,
};
use crate::conditioning::IdentityEmbedding;
use crate::error::{Error, Result};
use crate::kv::KvRecord;
use crate::noise::NoiseSource;
use crate::tensor::{LatentShape, LatentTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PluginKind {
    Backbone,
    Codec,
    Embedder,
    Parser,
    Scorer,
}

impl fmt::Display for PluginKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PluginKind::Backbone => "backbone",
            PluginKind::Codec => "codec",
            PluginKind::Embedder => "embedder",
            PluginKind::Parser => "parser",
            PluginKind::Scorer => "scorer",
        })
    }
}

impl FromStr for PluginKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "backbone" => PluginKind::Backbone,
            "codec" => PluginKind::Codec,
            "embedder" => PluginKind::Embedder,
            "parser" => PluginKind::Parser,
            "scorer" => PluginKind::Scorer,
            other => return Err(Error::corrupt(format!("unknown plugin kind `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Launch {
    Builtin(String),
    /// Program followed by arguments, split on whitespace.
    Exec(Vec<String>),
}

impl fmt::Display for Launch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Launch::Builtin(name) => write!(f, "builtin:{name}"),
            Launch::Exec(argv) => write!(f, "exec:{}", argv.join(" ")),
        }
    }
}

impl FromStr for Launch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(name) = s.strip_prefix("builtin:") {
            let name = name.trim();
            if name.is_empty() {
                return Err(Error::corrupt("empty builtin plugin name"));
            }
            return Ok(Launch::Builtin(name.to_string()));
        }
        if let Some(cmd) = s.strip_prefix("exec:") {
            let argv: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
            if argv.is_empty() {
                return Err(Error::corrupt("empty exec command"));
            }
            return Ok(Launch::Exec(argv));
        }
        Err(Error::corrupt(format!(
            "launch must start with `builtin:` or `exec:`, got `{s}`"
        )))
    }
}

const MANIFEST_KEYS: [&str; 10] = [
    "name",
    "version",
    "kind",
    "latent_shape",
    "embedding_dim",
    "determinism",
    "max_concurrency",
    "launch",
    "seed",
    "description",
];

#[derive(Debug, Clone, PartialEq)]
pub struct PluginManifest {
    pub name: String,
    pub version: String,
    pub kind: PluginKind,
    pub latent_shape: Option<LatentShape>,
    pub embedding_dim: Option<usize>,
    /// Max-abs difference allowed between identical calls; 0 means bit-exact.
    pub tolerance: f32,
    pub max_concurrency: Option<usize>,
    pub launch: Launch,
    /// Weight seed for builtin toy plugins.
    pub seed: u64,
    pub description: Option<String>,
}

impl PluginManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KvRecord::parse(text)?;
        if let Some(k) = kv.keys().find(|k| !MANIFEST_KEYS.contains(k)) {
            return Err(Error::corrupt(format!("unknown manifest key `{k}`")));
        }
        let name = kv.require("name")?.to_string();
        if name.is_empty() {
            return Err(Error::corrupt("manifest name is empty"));
        }
        let kind: PluginKind = kv.require("kind")?.parse()?;
        let latent_shape = kv.get("latent_shape").map(LatentShape::parse).transpose()?;
        let embedding_dim = kv
            .get("embedding_dim")
            .map(|_| kv.require_parsed::<usize>("embedding_dim"))
            .transpose()?;
        if embedding_dim == Some(0) {
            return Err(Error::corrupt("embedding_dim must be positive"));
        }
        let tolerance = match kv.get("determinism").unwrap_or("exact") {
            "exact" => 0.0,
            other => match other.strip_prefix("tolerance:").map(|t| t.trim().parse::<f32>()) {
                Some(Ok(t)) if t.is_finite() && t >= 0.0 => t,
                _ => {
                    return Err(Error::corrupt(format!(
                        "determinism must be `exact` or `tolerance:<value>`, got `{other}`"
                    )))
                }
            },
        };
        let max_concurrency = kv
            .get("max_concurrency")
            .map(|_| kv.require_parsed::<usize>("max_concurrency"))
            .transpose()?;
        if max_concurrency == Some(0) {
            return Err(Error::corrupt("max_concurrency must be positive"));
        }
        if kind == PluginKind::Backbone && (latent_shape.is_none() || embedding_dim.is_none()) {
            return Err(Error::corrupt(
                "backbone manifests must declare latent_shape and embedding_dim",
            ));
        }
        if kind == PluginKind::Embedder && embedding_dim.is_none() {
            return Err(Error::corrupt("embedder manifests must declare embedding_dim"));
        }
        Ok(Self {
            name,
            version: kv.require("version")?.to_string(),
            kind,
            latent_shape,
            embedding_dim,
            tolerance,
            max_concurrency,
            launch: kv.require("launch")?.parse()?,
            seed: kv.get_parsed("seed")?.unwrap_or(0),
            description: kv.get("description").map(str::to_string),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut kv = KvRecord::new();
        kv.set("name", &self.name);
        kv.set("version", &self.version);
        kv.set("kind", self.kind);
        if let Some(s) = self.latent_shape {
            kv.set("latent_shape", s);
        }
        if let Some(d) = self.embedding_dim {
            kv.set("embedding_dim", d);
        }
        if self.tolerance == 0.0 {
            kv.set("determinism", "exact");
        } else {
            kv.set("determinism", format!("tolerance:{:?}", self.tolerance));
        }
        if let Some(m) = self.max_concurrency {
            kv.set("max_concurrency", m);
        }
        kv.set("launch", &self.launch);
        kv.set("seed", self.seed);
        if let Some(d) = &self.description {
            kv.set("description", d);
        }
        kv.to_text_ordered(&MANIFEST_KEYS)
    }

    /// Manifests of the bundled toy plugins at the given backbone latent shape.
    pub fn builtins(latent_shape: LatentShape, seed: u64) -> Vec<PluginManifest> {
        let make = |name: &str, kind: PluginKind| PluginManifest {
            name: name.to_string(),
            version: "1".into(),
            kind,
            latent_shape: (kind == PluginKind::Backbone).then_some(latent_shape),
            embedding_dim: matches!(kind, PluginKind::Backbone | PluginKind::Embedder)
                .then_some(TOY_EMBED_DIM),
            tolerance: 0.0,
            max_concurrency: None,
            launch: Launch::Builtin(name.to_string()),
            seed,
            description: None,
        };
        vec![
            make("toy-pointwise", PluginKind::Backbone),
            make("toy-attention", PluginKind::Backbone),
            make("toy-codec", PluginKind::Codec),
            make("toy-stats", PluginKind::Embedder),
            make("toy-parser", PluginKind::Parser),
            make("toy-pose", PluginKind::Scorer),
            make("toy-gaze", PluginKind::Scorer),
            make("toy-expression", PluginKind::Scorer),
            make("toy-quality", PluginKind::Scorer),
        ]
    }
}

#[derive(Clone)]
pub enum PluginHandle {
    Backbone(Arc<dyn NoisePredictor>),
    Codec(Arc<dyn LatentCodec>),
    Embedder(Arc<dyn IdentityEmbedder>),
    Parser(Arc<dyn FaceParser>),
    Scorer(Arc<dyn AttributeScorer>),
}

impl fmt::Debug for PluginHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PluginHandle({})", self.kind())
    }
}

impl PluginHandle {
    pub fn kind(&self) -> PluginKind {
        match self {
            PluginHandle::Backbone(_) => PluginKind::Backbone,
            PluginHandle::Codec(_) => PluginKind::Codec,
            PluginHandle::Embedder(_) => PluginKind::Embedder,
            PluginHandle::Parser(_) => PluginKind::Parser,
            PluginHandle::Scorer(_) => PluginKind::Scorer,
        }
    }

    pub fn fingerprint(&self) -> String {
        match self {
            PluginHandle::Backbone(b) => b.fingerprint(),
            PluginHandle::Codec(c) => c.fingerprint(),
            PluginHandle::Embedder(e) => e.fingerprint(),
            PluginHandle::Parser(p) => p.name().to_string(),
            PluginHandle::Scorer(s) => s.name().to_string(),
        }
    }
}

fn instantiate_builtin(m: &PluginManifest, name: &str) -> Result<PluginHandle> {
    let unknown = || Error::Plugin(format!("no builtin {} named `{name}`", m.kind));
    Ok(match m.kind {
        PluginKind::Backbone => {
            let shape = m.latent_shape.expect("validated at parse");
            let dim = m.embedding_dim.expect("validated at parse");
            match name {
                "toy-pointwise" => {
                    PluginHandle::Backbone(Arc::new(ToyPointwiseBackbone::new(m.seed, shape, dim)))
                }
                "toy-attention" => {
                    PluginHandle::Backbone(Arc::new(ToyAttentionBackbone::new(m.seed, shape, dim)))
                }
                _ => return Err(unknown()),
            }
        }
        PluginKind::Codec => match name {
            "toy-codec" => {
                let codec = match m.latent_shape {
                    Some(s) => ToyCodec::for_latent_shape(s)?,
                    None => ToyCodec::new(2)?,
                };
                PluginHandle::Codec(Arc::new(codec))
            }
            _ => return Err(unknown()),
        },
        PluginKind::Embedder => match name {
            "toy-stats" => PluginHandle::Embedder(Arc::new(ToyStatsEmbedder::with_dim(
                m.seed,
                m.embedding_dim.unwrap_or(TOY_EMBED_DIM),
            ))),
            _ => return Err(unknown()),
        },
        PluginKind::Parser => match name {
            "toy-parser" => PluginHandle::Parser(Arc::new(ToyFaceParser)),
            _ => return Err(unknown()),
        },
        PluginKind::Scorer => {
            PluginHandle::Scorer(Arc::new(ToyScorer::by_name(name).ok_or_else(unknown)?))
        }
    })
}

/// Instantiates the plugin a manifest describes, checks its declared shapes and runs
/// the contract probe. Backbones with a declared concurrency limit come back wrapped
/// in [`ConcurrencyLimited`]; non-reentrant embedders in [`Serialized`].
pub fn register_external_backend(manifest: &PluginManifest) -> Result<PluginHandle> {
    let handle = match &manifest.launch {
        Launch::Builtin(name) => instantiate_builtin(manifest, name)?,
        Launch::Exec(argv) => match manifest.kind {
            PluginKind::Backbone => PluginHandle::Backbone(Arc::new(ProcessBackbone::spawn(
                argv,
                manifest.latent_shape.expect("validated at parse"),
                manifest.embedding_dim.expect("validated at parse"),
                manifest.tolerance,
            )?)),
            PluginKind::Embedder => PluginHandle::Embedder(Arc::new(ProcessEmbedder::spawn(
                argv,
                manifest.embedding_dim.expect("validated at parse"),
            )?)),
            other => {
                return Err(Error::Plugin(format!(
                    "exec launch is not supported for {other} plugins"
                )))
            }
        },
    };
    attach(manifest, handle)
}

/// Checks an existing plugin object against a manifest and applies the same probe
/// and wrappers as [`register_external_backend`].
pub fn attach(manifest: &PluginManifest, handle: PluginHandle) -> Result<PluginHandle> {
    if handle.kind() != manifest.kind {
        return Err(Error::Contract(format!(
            "manifest `{}` declares kind {} but the plugin is a {}",
            manifest.name,
            manifest.kind,
            handle.kind()
        )));
    }
    match handle {
        PluginHandle::Backbone(b) => {
            let info = b.info();
            if Some(info.latent_shape) != manifest.latent_shape {
                return Err(Error::Contract(format!(
                    "manifest `{}` declares latent shape {} but the backbone accepts {}",
                    manifest.name,
                    manifest.latent_shape.map(|s| s.to_string()).unwrap_or_default(),
                    info.latent_shape
                )));
            }
            if Some(info.embedding_dim) != manifest.embedding_dim {
                return Err(Error::Contract(format!(
                    "manifest `{}` declares embedding dimension {} but the backbone uses {}",
                    manifest.name,
                    manifest.embedding_dim.unwrap_or_default(),
                    info.embedding_dim
                )));
            }
            probe_backbone(b.as_ref(), manifest.tolerance)?;
            let limit = manifest.max_concurrency.unwrap_or(info.max_concurrency);
            if limit < usize::MAX {
                Ok(PluginHandle::Backbone(Arc::new(ConcurrencyLimited::new(b, limit))))
            } else {
                Ok(PluginHandle::Backbone(b))
            }
        }
        PluginHandle::Embedder(e) => {
            if Some(e.dim()) != manifest.embedding_dim {
                return Err(Error::Contract(format!(
                    "manifest `{}` declares embedding dimension {} but the embedder returns {}",
                    manifest.name,
                    manifest.embedding_dim.unwrap_or_default(),
                    e.dim()
                )));
            }
            probe_embedder(e.as_ref())?;
            if e.reentrant() && manifest.max_concurrency != Some(1) {
                Ok(PluginHandle::Embedder(e))
            } else {
                Ok(PluginHandle::Embedder(Arc::new(Serialized::new(e))))
            }
        }
        other => Ok(other),
    }
}

/// Smoke test run at registration: shape preservation, finite outputs, and two
/// identical calls agreeing within `tolerance` (bit-equal when 0).
pub fn probe_backbone(backbone: &dyn NoisePredictor, tolerance: f32) -> Result<()> {
    let info = backbone.info();
    let name = &info.name;
    let noise = NoiseSource::new("plugin-probe", 0);
    let x = noise.normal_latent(0, info.latent_shape);
    let cond = IdentityEmbedding::from_raw(&noise.normal_vec(1, info.embedding_dim))?;
    let null = IdentityEmbedding::null(info.embedding_dim);
    let step = Timestep {
        t: 1,
        steps: 2,
        alpha_bar: 0.5,
    };
    let call = |c: &IdentityEmbedding| -> Result<LatentTensor> {
        let out = backbone
            .predict(&x, step, c, 1.0)
            .map_err(|e| Error::Contract(format!("probe call to `{name}` failed: {e}")))?;
        if out.shape() != info.latent_shape {
            return Err(Error::Contract(format!(
                "`{name}` returned shape {} for input {}",
                out.shape(),
                info.latent_shape
            )));
        }
        if !out.is_all_finite() {
            return Err(Error::Contract(format!("`{name}` returned non-finite values")));
        }
        Ok(out)
    };
    let first = call(&cond)?;
    let second = call(&cond)?;
    call(&null)?;
    let diff = first.max_abs_diff(&second)?;
    if diff > tolerance {
        return Err(Error::Contract(format!(
            "`{name}` is not deterministic: two identical calls differ by {diff:e} \
             (declared tolerance {tolerance:e})"
        )));
    }
    Ok(())
}

fn probe_image() -> RgbImage {
    let v = NoiseSource::new("plugin-probe/image", 0).uniform_vec(0, 64 * 64 * 3, 0.0, 255.0);
    RgbImage::from_fn(64, 64, |x, y| {
        let i = ((y * 64 + x) * 3) as usize;
        Rgb([v[i] as u8, v[i + 1] as u8, v[i + 2] as u8])
    })
}

fn probe_embedder(embedder: &dyn IdentityEmbedder) -> Result<()> {
    let name = embedder.name();
    let img = probe_image();
    let a = embedder
        .embed(&img)
        .map_err(|e| Error::Contract(format!("probe call to `{name}` failed: {e}")))?;
    let b = embedder
        .embed(&img)
        .map_err(|e| Error::Contract(format!("probe call to `{name}` failed: {e}")))?;
    if a.len() != embedder.dim() {
        return Err(Error::Contract(format!(
            "`{name}` declared dimension {} but returned {}",
            embedder.dim(),
            a.len()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract(format!("`{name}` returned non-finite values")));
    }
    if a != b {
        return Err(Error::Contract(format!("`{name}` is not deterministic")));
    }
    Ok(())
}

/// Caps concurrent `predict` calls at the plugin's declared limit; extra callers block.
pub struct ConcurrencyLimited {
    inner: Arc<dyn NoisePredictor>,
    info: BackboneInfo,
    in_flight: Mutex<usize>,
    released: Condvar,
}

impl ConcurrencyLimited {
    pub fn new(inner: Arc<dyn NoisePredictor>, limit: usize) -> Self {
        let mut info = inner.info().clone();
        info.max_concurrency = limit.max(1);
        Self {
            inner,
            info,
            in_flight: Mutex::new(0),
            released: Condvar::new(),
        }
    }

    fn with_slot<T>(&self, f: impl FnOnce() -> T) -> T {
        let mut n = self.in_flight.lock().unwrap_or_else(|p| p.into_inner());
        while *n >= self.info.max_concurrency {
            n = self.released.wait(n).unwrap_or_else(|p| p.into_inner());
        }
        *n += 1;
        drop(n);
        let out = f();
        *self.in_flight.lock().unwrap_or_else(|p| p.into_inner()) -= 1;
        self.released.notify_one();
        out
    }
}

impl NoisePredictor for ConcurrencyLimited {
    fn info(&self) -> &BackboneInfo {
        &self.info
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn predict(
        &self,
        x: &LatentTensor,
        step: Timestep,
        condition: &IdentityEmbedding,
        lambda_img: f32,
    ) -> Result<LatentTensor> {
        self.with_slot(|| self.inner.predict(x, step, condition, lambda_img))
    }

    fn predict_pair(
        &self,
        x: &LatentTensor,
        step: Timestep,
        condition: &IdentityEmbedding,
        null: &IdentityEmbedding,
        lambda_img: f32,
    ) -> Result<(LatentTensor, LatentTensor)> {
        self.with_slot(|| self.inner.predict_pair(x, step, condition, null, lambda_img))
    }
}

/// Serializes calls into a non-reentrant embedder.
pub struct Serialized {
    inner: Arc<dyn IdentityEmbedder>,
    lock: Mutex<()>,
}

impl Serialized {
    pub fn new(inner: Arc<dyn IdentityEmbedder>) -> Self {
        Self {
            inner,
            lock: Mutex::new(()),
        }
    }
}

impl IdentityEmbedder for Serialized {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed(&self, image: &RgbImage) -> Result<Vec<f32>> {
        let _guard = self.lock.lock().unwrap_or_else(|p| p.into_inner());
        self.inner.embed(image)
    }
}

/// Named plugins by kind.
#[derive(Debug, Default, Clone)]
pub struct PluginRegistry {
    entries: BTreeMap<(PluginKind, String), (PluginManifest, PluginHandle)>,
}

impl PluginRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry holding every bundled toy plugin; backbones use `latent_shape`.
    pub fn with_builtins(latent_shape: LatentShape, seed: u64) -> Result<Self> {
        let mut reg = Self::new();
        for m in PluginManifest::builtins(latent_shape, seed) {
            reg.register(m)?;
        }
        Ok(reg)
    }

    /// Registers (or replaces) a plugin under its manifest name.
    pub fn register(&mut self, manifest: PluginManifest) -> Result<()> {
        let handle = register_external_backend(&manifest)?;
        self.entries
            .insert((manifest.kind, manifest.name.clone()), (manifest, handle));
        Ok(())
    }

    /// Loads every `*.manifest` file in each directory of a `:`-separated search path.
    /// Missing directories are skipped.
    pub fn load_search_path(&mut self, search_path: &str) -> Result<usize> {
        let mut count = 0;
        for dir in search_path.split(':').filter(|d| !d.is_empty()) {
            let dir = Path::new(dir);
            let Ok(read) = std::fs::read_dir(dir) else {
                continue;
            };
            let mut paths: Vec<_> = read
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "manifest"))
                .collect();
            paths.sort();
            for p in paths {
                self.register(PluginManifest::load(&p)?)?;
                count += 1;
            }
        }
        Ok(count)
    }

    fn lookup(&self, kind: PluginKind, name: &str) -> Result<&PluginHandle> {
        self.entries
            .get(&(kind, name.to_string()))
            .map(|(_, h)| h)
            .ok_or_else(|| {
                let known = self.names(kind).join(", ");
                Error::Plugin(format!("no {kind} plugin named `{name}` (known: {known})"))
            })
    }

    pub fn manifest(&self, kind: PluginKind, name: &str) -> Option<&PluginManifest> {
        self.entries.get(&(kind, name.to_string())).map(|(m, _)| m)
    }

    pub fn names(&self, kind: PluginKind) -> Vec<String> {
        self.entries
            .keys()
            .filter(|(k, _)| *k == kind)
            .map(|(_, n)| n.clone())
            .collect()
    }

    pub fn backbone(&self, name: &str) -> Result<Arc<dyn NoisePredictor>> {
        match self.lookup(PluginKind::Backbone, name)? {
            PluginHandle::Backbone(b) => Ok(b.clone()),
            _ => unreachable!("registry keys carry the kind"),
        }
    }

    pub fn codec(&self, name: &str) -> Result<Arc<dyn LatentCodec>> {
        match self.lookup(PluginKind::Codec, name)? {
            PluginHandle::Codec(c) => Ok(c.clone()),
            _ => unreachable!("registry keys carry the kind"),
        }
    }

    pub fn embedder(&self, name: &str) -> Result<Arc<dyn IdentityEmbedder>> {
        match self.lookup(PluginKind::Embedder, name)? {
            PluginHandle::Embedder(e) => Ok(e.clone()),
            _ => unreachable!("registry keys carry the kind"),
        }
    }

    pub fn parser(&self, name: &str) -> Result<Arc<dyn FaceParser>> {
        match self.lookup(PluginKind::Parser, name)? {
            PluginHandle::Parser(p) => Ok(p.clone()),
            _ => unreachable!("registry keys carry the kind"),
        }
    }

    pub fn scorer(&self, name: &str) -> Result<Arc<dyn AttributeScorer>> {
        match self.lookup(PluginKind::Scorer, name)? {
            PluginHandle::Scorer(s) => Ok(s.clone()),
            _ => unreachable!("registry keys carry the kind"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ATTENTION: &str = "\
name = toy-attention
version = 1
kind = backbone
latent_shape = 4x8x8
embedding_dim = 16
determinism = exact
launch = builtin:toy-attention
seed = 7
";

    #[test]
    fn manifest_roundtrip() {
        let m = PluginManifest::parse(ATTENTION).unwrap();
        assert_eq!(m.kind, PluginKind::Backbone);
        assert_eq!(m.latent_shape, Some(LatentShape::new(4, 8, 8).unwrap()));
        assert_eq!(PluginManifest::parse(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn manifest_rejects_unknown_keys_and_bad_values() {
        assert!(PluginManifest::parse(&format!("{ATTENTION}colour = red\n")).is_err());
        assert!(PluginManifest::parse(&ATTENTION.replace("exact", "sometimes")).is_err());
        assert!(PluginManifest::parse(&ATTENTION.replace("builtin:", "dlopen:")).is_err());
        assert!(PluginManifest::parse(&ATTENTION.replace("embedding_dim = 16\n", "")).is_err());
    }

    #[test]
    fn builtin_registration_matches_direct_use() {
        let m = PluginManifest::parse(ATTENTION).unwrap();
        let PluginHandle::Backbone(b) = register_external_backend(&m).unwrap() else {
            panic!("expected a backbone");
        };
        let direct = ToyAttentionBackbone::new(7, LatentShape::new(4, 8, 8).unwrap(), 16);
        assert_eq!(b.fingerprint(), direct.fingerprint());
        let x = NoiseSource::new("x", 0).normal_latent(0, direct.info().latent_shape);
        let e = IdentityEmbedding::from_raw(&NoiseSource::new("e", 0).normal_vec(0, 16)).unwrap();
        let step = Timestep {
            t: 3,
            steps: 10,
            alpha_bar: 0.7,
        };
        assert_eq!(
            b.predict(&x, step, &e, 1.0).unwrap(),
            direct.predict(&x, step, &e, 1.0).unwrap()
        );
    }

    #[test]
    fn wrong_embedding_dim_is_rejected() {
        let m = PluginManifest::parse(ATTENTION).unwrap();
        let direct: Arc<dyn NoisePredictor> = Arc::new(ToyAttentionBackbone::new(
            7,
            LatentShape::new(4, 8, 8).unwrap(),
            32,
        ));
        let err = attach(&m, PluginHandle::Backbone(direct)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
    }

    #[test]
    fn unknown_builtin_is_a_plugin_error() {
        let m = PluginManifest::parse(&ATTENTION.replace("builtin:toy-attention", "builtin:sd15")).unwrap();
        assert!(matches!(register_external_backend(&m), Err(Error::Plugin(_))));
    }

    #[test]
    fn registry_serves_builtins() {
        let reg = PluginRegistry::with_builtins(LatentShape::new(12, 4, 4).unwrap(), 0).unwrap();
        assert!(reg.backbone("toy-pointwise").is_ok());
        assert!(reg.embedder("toy-stats").is_ok());
        assert_eq!(reg.codec("toy-codec").unwrap().scale_factor(), 2);
        assert!(reg.scorer("toy-gaze").is_ok());
        assert!(matches!(reg.backbone("nope"), Err(Error::Plugin(_))));
    }
}
