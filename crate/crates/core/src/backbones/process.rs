//! Out-of-process plugins speaking JSON lines over stdin/stdout.
//!
//! Each request is one JSON object on one line with an `op` field; each reply is one
//! line. Tensors and pixel buffers travel as base64 of little-endian `f32` / raw `u8`.
//!
//! ```text
//! {"op":"info"}
//!   -> {"name":..,"version":..,"fingerprint":..,"latent_shape":"4x8x8","embedding_dim":16}
//! {"op":"predict","t":..,"steps":..,"alpha_bar":..,"x":"<b64>","condition":[..],"is_null":false,"lambda_img":1.0}
//!   -> {"eps":"<b64>"}
//! {"op":"embed","width":..,"height":..,"rgb":"<b64>"}
//!   -> {"vector":[..]}
//! ```
//!
//! Any reply may instead be `{"error":"message"}`.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{BackboneInfo, IdentityEmbedder, NoisePredictor, Timestep};
use crate::conditioning::IdentityEmbedding;
use crate::error::{Error, Result};
use crate::tensor::{LatentShape, LatentTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Info,
    Predict {
        t: usize,
        steps: usize,
        alpha_bar: f64,
        x: String,
        condition: Vec<f32>,
        is_null: bool,
        lambda_img: f32,
    },
    Embed {
        width: u32,
        height: u32,
        rgb: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Response {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_shape: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<Vec<f32>>,
}

impl Response {
    fn error(msg: impl Into<String>) -> Self {
        Self {
            error: Some(msg.into()),
            ..Self::default()
        }
    }
}

/// Parses one request line.
pub fn parse_request(line: &str) -> Result<Request> {
    Ok(serde_json::from_str(line)?)
}

/// Parses one reply line; `{"error":..}` replies become plugin errors.
pub fn parse_response(line: &str) -> Result<Response> {
    let r: Response = serde_json::from_str(line)?;
    match r.error {
        Some(e) => Err(Error::Plugin(e)),
        None => Ok(r),
    }
}

pub fn encode_tensor(t: &LatentTensor) -> String {
    B64.encode(t.to_le_bytes())
}

pub fn decode_tensor(b64: &str, shape: LatentShape) -> Result<LatentTensor> {
    let bytes = B64
        .decode(b64)
        .map_err(|e| Error::corrupt(format!("bad base64 tensor: {e}")))?;
    LatentTensor::from_le_bytes(shape, &bytes)
}

struct Pipe {
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// A spawned child process; calls are serialized over its single pipe pair.
struct PluginProcess {
    program: String,
    child: Mutex<Child>,
    pipe: Mutex<Pipe>,
}

impl PluginProcess {
    fn spawn(argv: &[String]) -> Result<Self> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| Error::Plugin("empty exec command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Plugin(format!("cannot launch `{program}`: {e}")))?;
        let stdin = child.stdin.take().expect("stdin is piped");
        let stdout = BufReader::new(child.stdout.take().expect("stdout is piped"));
        Ok(Self {
            program: program.clone(),
            child: Mutex::new(child),
            pipe: Mutex::new(Pipe { stdin, stdout }),
        })
    }

    fn call(&self, req: &Request) -> Result<Response> {
        let mut pipe = self.pipe.lock().unwrap_or_else(|p| p.into_inner());
        let broken = |e: std::io::Error| Error::Plugin(format!("pipe to `{}` failed: {e}", self.program));
        let mut line = serde_json::to_string(req)?;
        line.push('\n');
        pipe.stdin.write_all(line.as_bytes()).map_err(broken)?;
        pipe.stdin.flush().map_err(broken)?;
        let mut reply = String::new();
        if pipe.stdout.read_line(&mut reply).map_err(broken)? == 0 {
            return Err(Error::Plugin(format!("`{}` closed its output", self.program)));
        }
        parse_response(&reply)
    }

    fn info(&self) -> Result<Response> {
        self.call(&Request::Info)
    }
}

impl Drop for PluginProcess {
    fn drop(&mut self) {
        let mut child = self.child.lock().unwrap_or_else(|p| p.into_inner());
        let _ = child.kill();
        let _ = child.wait();
    }
}

/// Noise predictor running in a child process.
pub struct ProcessBackbone {
    process: PluginProcess,
    info: BackboneInfo,
    fingerprint: String,
}

impl ProcessBackbone {
    /// Launches the plugin and checks its self-description against the manifest.
    pub fn spawn(argv: &[String], latent_shape: LatentShape, embedding_dim: usize, tolerance: f32) -> Result<Self> {
        let process = PluginProcess::spawn(argv)?;
        let info = process.info()?;
        let declared = info
            .latent_shape
            .as_deref()
            .map(LatentShape::parse)
            .transpose()?;
        if declared != Some(latent_shape) {
            return Err(Error::Contract(format!(
                "plugin reports latent shape {:?}, manifest declares {latent_shape}",
                info.latent_shape
            )));
        }
        if info.embedding_dim != Some(embedding_dim) {
            return Err(Error::Contract(format!(
                "plugin reports embedding dimension {:?}, manifest declares {embedding_dim}",
                info.embedding_dim
            )));
        }
        let name = info.name.unwrap_or_else(|| argv[0].clone());
        Ok(Self {
            fingerprint: info.fingerprint.unwrap_or_else(|| format!("exec:{name}")),
            info: BackboneInfo {
                name,
                version: info.version.unwrap_or_default(),
                latent_shape,
                embedding_dim,
                deterministic: tolerance == 0.0,
                tolerance,
                max_concurrency: 1,
            },
            process,
        })
    }
}

impl NoisePredictor for ProcessBackbone {
    fn info(&self) -> &BackboneInfo {
        &self.info
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn predict(
        &self,
        x: &LatentTensor,
        step: Timestep,
        condition: &IdentityEmbedding,
        lambda_img: f32,
    ) -> Result<LatentTensor> {
        x.ensure_shape(self.info.latent_shape)?;
        let reply = self.process.call(&Request::Predict {
            t: step.t,
            steps: step.steps,
            alpha_bar: step.alpha_bar,
            x: encode_tensor(x),
            condition: condition.vector().to_vec(),
            is_null: condition.is_null(),
            lambda_img,
        })?;
        let eps = reply
            .eps
            .ok_or_else(|| Error::Plugin("predict reply has no `eps`".into()))?;
        decode_tensor(&eps, self.info.latent_shape).map_err(|e| match e {
            Error::Corrupt(m) => Error::Contract(format!("plugin output: {m}")),
            other => other,
        })
    }
}

/// Identity embedder running in a child process.
pub struct ProcessEmbedder {
    process: PluginProcess,
    name: String,
    fingerprint: String,
    dim: usize,
}

impl ProcessEmbedder {
    pub fn spawn(argv: &[String], dim: usize) -> Result<Self> {
        let process = PluginProcess::spawn(argv)?;
        let info = process.info()?;
        if info.embedding_dim != Some(dim) {
            return Err(Error::Contract(format!(
                "plugin reports embedding dimension {:?}, manifest declares {dim}",
                info.embedding_dim
            )));
        }
        let name = info.name.unwrap_or_else(|| argv[0].clone());
        Ok(Self {
            fingerprint: info.fingerprint.unwrap_or_else(|| format!("exec:{name}")),
            name,
            dim,
            process,
        })
    }
}

impl IdentityEmbedder for ProcessEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, image: &RgbImage) -> Result<Vec<f32>> {
        let reply = self.process.call(&Request::Embed {
            width: image.width(),
            height: image.height(),
            rgb: B64.encode(image.as_raw()),
        })?;
        reply
            .vector
            .ok_or_else(|| Error::Plugin("embed reply has no `vector`".into()))
    }
}

fn handle(
    req: Request,
    backbone: Option<&dyn NoisePredictor>,
    embedder: Option<&dyn IdentityEmbedder>,
) -> Result<Response> {
    match req {
        Request::Info => {
            let mut r = Response::default();
            if let Some(b) = backbone {
                let info = b.info();
                r.name = Some(info.name.clone());
                r.version = Some(info.version.clone());
                r.fingerprint = Some(b.fingerprint());
                r.latent_shape = Some(info.latent_shape.to_string());
                r.embedding_dim = Some(info.embedding_dim);
            } else if let Some(e) = embedder {
                r.name = Some(e.name().to_string());
                r.fingerprint = Some(e.fingerprint());
                r.embedding_dim = Some(e.dim());
            }
            Ok(r)
        }
        Request::Predict {
            t,
            steps,
            alpha_bar,
            x,
            condition,
            is_null,
            lambda_img,
        } => {
            let b = backbone.ok_or_else(|| Error::Plugin("this host serves no backbone".into()))?;
            let x = decode_tensor(&x, b.info().latent_shape)?;
            let cond = if is_null {
                IdentityEmbedding::null(condition.len())
            } else {
                IdentityEmbedding::from_vector(condition)?
            };
            let eps = b.predict(&x, Timestep { t, steps, alpha_bar }, &cond, lambda_img)?;
            Ok(Response {
                eps: Some(encode_tensor(&eps)),
                ..Response::default()
            })
        }
        Request::Embed { width, height, rgb } => {
            let e = embedder.ok_or_else(|| Error::Plugin("this host serves no embedder".into()))?;
            let raw = B64
                .decode(rgb)
                .map_err(|err| Error::corrupt(format!("bad base64 image: {err}")))?;
            let img = RgbImage::from_raw(width, height, raw)
                .ok_or_else(|| Error::corrupt("pixel buffer does not match dimensions"))?;
            Ok(Response {
                vector: Some(e.embed(&img)?),
                ..Response::default()
            })
        }
    }
}

/// Serves the plugin protocol until end of input. Per-request failures are reported
/// as `{"error":..}` replies; only I/O failures end the loop early.
pub fn serve_plugin(
    input: impl BufRead,
    mut output: impl Write,
    backbone: Option<&dyn NoisePredictor>,
    embedder: Option<&dyn IdentityEmbedder>,
) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match parse_request(&line).and_then(|r| handle(r, backbone, embedder)) {
            Ok(r) => r,
            Err(e) => Response::error(e.to_string()),
        };
        let text = serde_json::to_string(&reply).map_err(std::io::Error::other)?;
        writeln!(output, "{text}")?;
        output.flush()?;
    }
    Ok(())
}
