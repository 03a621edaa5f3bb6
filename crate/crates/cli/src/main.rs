//! `nullface` command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use nullface_core::engine::Engine;
use nullface_core::kv::KvRecord;
use nullface_core::pipeline::PLUGIN_PATH_ENV;
use nullface_core::runs::{self, Params, RunContext, RunManifest};
use nullface_core::toyset::{save_dataset, toy_face_set, TOY_FACE_SIZE};
use nullface_core::{Error, Result};

#[derive(Parser)]
#[command(name = "nullface", version, about = "Face anonymization by diffusion inversion and negated identity guidance")]
struct Cli {
    /// Flat `key = value` file with defaults for the command's flags; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Invert an image into per-step noise maps and save the record directory.
    Invert(InvertArgs),
    /// Re-denoise an inverted image under negated identity guidance.
    Anonymize(AnonymizeArgs),
    /// Build a region mask from a face parse or a label image.
    Mask(MaskArgs),
    /// Score anonymized images against their originals.
    Eval(EvalArgs),
    /// Invert, anonymize and measure a dataset over a parameter grid.
    Sweep(SweepArgs),
    /// Try to restore identity by re-running with the identity term reversed.
    Attack(AttackArgs),
    /// Re-run a command from its run manifest.
    Replay(ReplayArgs),
    /// Write the synthetic toy face set.
    ToySet(ToySetArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Args, Default)]
struct PluginArgs {
    /// Noise-prediction backbone plugin [default: toy-pointwise]
    #[arg(long)]
    backend: Option<String>,
    /// Image/latent codec plugin [default: toy-codec]
    #[arg(long)]
    codec: Option<String>,
    /// Identity embedder plugin [default: toy-stats]
    #[arg(long)]
    embedder: Option<String>,
    /// Face parser plugin [default: toy-parser]
    #[arg(long)]
    parser: Option<String>,
    /// Weight seed of the bundled toy plugins, 0..=2^64-1 [default: 0]
    #[arg(long)]
    plugin_seed: Option<u64>,
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// Number of diffusion steps, >= 1 [default: 100]
    #[arg(long)]
    steps: Option<usize>,
    /// Steps at the top of the process run without identity guidance, 0..=steps [default: 70]
    #[arg(long)]
    t_skip: Option<usize>,
    /// Identity embedding scale, >= 0 [default: 1.0]
    #[arg(long)]
    lambda_id: Option<f64>,
    /// Guidance scale, any finite value [default: 10]
    #[arg(long)]
    cfg: Option<f64>,
    /// Image-prompt scale, >= 0 [default: 1.0]
    #[arg(long)]
    lambda_img: Option<f32>,
    /// Region preset: whole-face, keep-eyes, keep-mouth, keep-eyes-mouth, keep-nose,
    /// keep-nose-mouth, keep-eyes-nose [default: keep-eyes-mouth]
    #[arg(long)]
    mask_preset: Option<String>,
    /// Process steps completed before the user mask replaces the whole-face mask,
    /// 0..=steps [default: 80]
    #[arg(long)]
    mask_start: Option<usize>,
    /// Inversion seed, 0..=2^64-1 [default: 0, or the record's seed]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct InvertArgs {
    /// Input image (8-bit PNG)
    #[arg(long)]
    image: Option<PathBuf>,
    /// Number of diffusion steps, >= 1 [default: 100]
    #[arg(long)]
    steps: Option<usize>,
    /// Inversion seed, 0..=2^64-1 [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Store only the clean latent, the final noisy latent and the noise maps
    #[arg(long)]
    lean: bool,
    /// Record directory to write
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    plugins: PluginArgs,
}

#[derive(Args)]
struct AnonymizeArgs {
    /// Record directory written by `invert`
    #[arg(long)]
    record: Option<PathBuf>,
    /// Source image [default: the image named in the record's run manifest]
    #[arg(long)]
    image: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Mask PNG at latent resolution, overriding --mask-preset
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Image whose identity is pushed away from [default: the source image]
    #[arg(long)]
    embedding_image: Option<PathBuf>,
    /// Directory for the per-step trace container
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Output PNG
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    plugins: PluginArgs,
}

#[derive(Args)]
struct MaskArgs {
    /// Source image (8-bit PNG)
    #[arg(long)]
    image: Option<PathBuf>,
    /// Label PNG used instead of the parser plugin
    #[arg(long)]
    segmentation: Option<PathBuf>,
    /// Color-to-code sidecar for an RGB label PNG
    #[arg(long)]
    palette: Option<PathBuf>,
    /// Region preset (see `anonymize --help`) [default: whole-face]
    #[arg(long)]
    preset: Option<String>,
    /// Regions to anonymize, comma-separated names or codes 0..=8, instead of --preset
    #[arg(long)]
    anonymize: Option<String>,
    /// Regions to keep, comma-separated names or codes 0..=8
    #[arg(long)]
    keep: Option<String>,
    /// Output resolution: latent or image [default: latent]
    #[arg(long)]
    resolution: Option<String>,
    /// Output mask PNG
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    plugins: PluginArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of original PNGs
    #[arg(long)]
    originals: Option<PathBuf>,
    /// Directory of anonymized PNGs with matching file names
    #[arg(long)]
    anonymized: Option<PathBuf>,
    /// Comma-separated metrics: reid, id-dist, frechet, pose, gaze, expression, quality
    /// [default: reid,id-dist,frechet]
    #[arg(long)]
    metrics: Option<String>,
    /// Attribute scorer plugins [default: toy-<metric> per attribute metric]
    #[arg(long)]
    scorers: Option<String>,
    /// Output CSV report
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    plugins: PluginArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// Directory of original PNGs, at least 2
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Grid file: `axis = v1, v2, ...` for lambda_id, lambda_cfg, lambda_img, t_skip,
    /// mask_preset, mask_start
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Inline grid axis `axis=v1,v2,...`; repeatable, overrides the grid file
    #[arg(long = "axis", value_name = "AXIS=VALUES")]
    axes: Vec<String>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated metrics (see `eval --help`) [default: reid,id-dist,frechet]
    #[arg(long)]
    metrics: Option<String>,
    /// Attribute scorer plugins [default: toy-<metric> per attribute metric]
    #[arg(long)]
    scorers: Option<String>,
    /// Output CSV report, written cell by cell
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    plugins: PluginArgs,
}

#[derive(Args)]
struct AttackArgs {
    /// Original image
    #[arg(long)]
    original: Option<PathBuf>,
    /// Anonymized image under attack
    #[arg(long)]
    anonymized: Option<PathBuf>,
    /// The attacker's guessed settings
    #[command(flatten)]
    config: ConfigArgs,
    /// Identity the attacker pushes toward: anonymized or known [default: anonymized]
    #[arg(long)]
    attack_embedding: Option<String>,
    /// Output PNG
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    plugins: PluginArgs,
}

#[derive(Args)]
struct ReplayArgs {
    /// Run manifest (`<output>.run.json`)
    #[arg(long)]
    manifest: PathBuf,
    /// Override one resolved parameter, `key=value`; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ToySetArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Number of faces, >= 1
    #[arg(long, default_value_t = 16)]
    count: usize,
    /// Face family seed, 0..=2^64-1
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image side in pixels, even, >= 8
    #[arg(long, default_value_t = TOY_FACE_SIZE)]
    size: u32,
}

#[derive(Args)]
struct ServeArgs {
    /// Listen address
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    /// Directory holding uploads, records and results
    #[arg(long)]
    run_dir: PathBuf,
    /// Upload size cap in bytes, >= 1
    #[arg(long, default_value_t = nullface_service::DEFAULT_MAX_UPLOAD_BYTES)]
    max_upload_bytes: usize,
}

fn put<T: ToString>(p: &mut Params, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        p.insert(key.into(), v.to_string());
    }
}

fn put_path(p: &mut Params, key: &str, v: &Option<PathBuf>) {
    if let Some(v) = v {
        p.insert(key.into(), v.to_string_lossy().into_owned());
    }
}

impl PluginArgs {
    fn fill(&self, p: &mut Params) {
        put(p, "backend", &self.backend);
        put(p, "codec", &self.codec);
        put(p, "embedder", &self.embedder);
        put(p, "parser", &self.parser);
        put(p, "plugin_seed", &self.plugin_seed);
    }
}

impl ConfigArgs {
    fn fill(&self, p: &mut Params) {
        put(p, "steps", &self.steps);
        put(p, "t_skip", &self.t_skip);
        put(p, "lambda_id", &self.lambda_id);
        put(p, "cfg", &self.cfg);
        put(p, "lambda_img", &self.lambda_img);
        put(p, "mask_preset", &self.mask_preset);
        put(p, "mask_start", &self.mask_start);
        put(p, "seed", &self.seed);
    }
}

fn split_pair(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("expected key=value, got `{s}`")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// `(command, flags given on the command line)`.
fn flag_params(cmd: &Command) -> Result<(&'static str, Params)> {
    let mut p = Params::new();
    let name = match cmd {
        Command::Invert(a) => {
            put_path(&mut p, "image", &a.image);
            put(&mut p, "steps", &a.steps);
            put(&mut p, "seed", &a.seed);
            if a.lean {
                p.insert("lean".into(), "true".into());
            }
            put_path(&mut p, "out", &a.out);
            a.plugins.fill(&mut p);
            "invert"
        }
        Command::Anonymize(a) => {
            put_path(&mut p, "record", &a.record);
            put_path(&mut p, "image", &a.image);
            a.config.fill(&mut p);
            put_path(&mut p, "mask", &a.mask);
            put_path(&mut p, "embedding_image", &a.embedding_image);
            put_path(&mut p, "trace", &a.trace);
            put_path(&mut p, "out", &a.out);
            a.plugins.fill(&mut p);
            "anonymize"
        }
        Command::Mask(a) => {
            put_path(&mut p, "image", &a.image);
            put_path(&mut p, "segmentation", &a.segmentation);
            put_path(&mut p, "palette", &a.palette);
            put(&mut p, "preset", &a.preset);
            put(&mut p, "anonymize", &a.anonymize);
            put(&mut p, "keep", &a.keep);
            put(&mut p, "resolution", &a.resolution);
            put_path(&mut p, "out", &a.out);
            a.plugins.fill(&mut p);
            "mask"
        }
        Command::Eval(a) => {
            put_path(&mut p, "originals", &a.originals);
            put_path(&mut p, "anonymized", &a.anonymized);
            put(&mut p, "metrics", &a.metrics);
            put(&mut p, "scorers", &a.scorers);
            put_path(&mut p, "report", &a.report);
            a.plugins.fill(&mut p);
            "eval"
        }
        Command::Sweep(a) => {
            put_path(&mut p, "dataset", &a.dataset);
            put_path(&mut p, "grid", &a.grid);
            for axis in &a.axes {
                let (k, v) = split_pair(axis)?;
                p.insert(format!("grid.{k}"), v);
            }
            a.config.fill(&mut p);
            put(&mut p, "metrics", &a.metrics);
            put(&mut p, "scorers", &a.scorers);
            put_path(&mut p, "report", &a.report);
            a.plugins.fill(&mut p);
            "sweep"
        }
        Command::Attack(a) => {
            put_path(&mut p, "original", &a.original);
            put_path(&mut p, "anonymized", &a.anonymized);
            a.config.fill(&mut p);
            put(&mut p, "attack_embedding", &a.attack_embedding);
            put_path(&mut p, "out", &a.out);
            a.plugins.fill(&mut p);
            "attack"
        }
        Command::Replay(_) | Command::ToySet(_) | Command::Serve(_) => unreachable!("handled separately"),
    };
    Ok((name, p))
}

fn load_config(path: &Path) -> Result<Params> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(KvRecord::parse(&text)?.into_map())
}

fn run_command(command: &str, params: &Params) -> Result<RunManifest> {
    let engine = Engine::from_env()?;
    let cancel = Arc::new(AtomicBool::new(false));
    if command == "sweep" {
        let flag = cancel.clone();
        // Finish the current cell, keep the partial report, then stop.
        let _ = ctrlc::set_handler(move || {
            flag.store(true, Ordering::SeqCst);
            eprintln!("interrupt: finishing the current cell");
        });
    }
    let ctx = RunContext {
        plugin_path: std::env::var(PLUGIN_PATH_ENV).ok().filter(|p| !p.is_empty()),
        engine: &engine,
        cancel: Some(&cancel),
    };
    runs::execute(command, params, &ctx)
}

fn summary(m: &RunManifest) -> String {
    serde_json::json!({
        "command": m.command,
        "outputs": m.outputs,
        "results": m.results,
    })
    .to_string()
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::ToySet(a) => {
            if a.count == 0 || a.size < 8 || a.size % 2 != 0 {
                return Err(Error::invalid("toy-set needs --count >= 1 and an even --size >= 8"));
            }
            let paths = save_dataset(&toy_face_set(a.count, a.seed, a.size), &a.out)?;
            println!("{}", serde_json::json!({ "command": "toy-set", "outputs": paths }));
            Ok(())
        }
        Command::Replay(a) => {
            let m = RunManifest::load(&a.manifest)?;
            let mut params = m.params.clone();
            for o in &a.overrides {
                let (k, v) = split_pair(o)?;
                params.insert(k, v);
            }
            let out = run_command(&m.command, &params)?;
            println!("{}", summary(&out));
            Ok(())
        }
        Command::Serve(a) => {
            let config = nullface_service::ServiceConfig {
                run_dir: a.run_dir.clone(),
                max_upload_bytes: a.max_upload_bytes,
                plugin_path: std::env::var(PLUGIN_PATH_ENV).ok().filter(|p| !p.is_empty()),
            };
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
            rt.block_on(nullface_service::serve(&a.addr, config))
        }
        cmd => {
            let (name, flags) = flag_params(cmd)?;
            let mut params = match &cli.config {
                Some(path) => load_config(path)?,
                None => Params::new(),
            };
            params.extend(flags);
            let m = run_command(name, &params)?;
            println!("{}", summary(&m));
            Ok(())
        }
    }
}

fn error_json(class: &str, message: &str) -> String {
    serde_json::json!({ "error": { "class": class, "message": message } }).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", error_json("usage", e.render().to_string().trim()));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = e.class();
            eprintln!("{}", error_json(class.name(), &e.to_string()));
            ExitCode::from(class.exit_code() as u8)
        }
    }
}
