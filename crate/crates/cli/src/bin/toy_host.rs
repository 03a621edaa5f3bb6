//! Serves a bundled toy backbone and embedder over the plugin line protocol on
//! stdin/stdout. Used to exercise `exec:` plugin manifests.
//!
//! Usage: `nullface-toy-host [toy-pointwise|toy-attention] [CxHxW] [seed]`

use std::io::{stdin, stdout, BufWriter};
use std::process::ExitCode;

use nullface_core::backbones::{serve_plugin, NoisePredictor, ToyAttentionBackbone, ToyPointwiseBackbone, ToyStatsEmbedder, TOY_EMBED_DIM};
use nullface_core::tensor::LatentShape;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let kind = args.first().map_or("toy-pointwise", String::as_str);
    let shape = match LatentShape::parse(args.get(1).map_or("12x32x32", String::as_str)) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    let seed: u64 = match args.get(2).map(|s| s.parse()) {
        None => 0,
        Some(Ok(s)) => s,
        Some(Err(_)) => {
            eprintln!("seed must be an unsigned integer");
            return ExitCode::from(2);
        }
    };
    let backbone: Box<dyn NoisePredictor> = match kind {
        "toy-pointwise" => Box::new(ToyPointwiseBackbone::new(seed, shape, TOY_EMBED_DIM)),
        "toy-attention" => Box::new(ToyAttentionBackbone::new(seed, shape, TOY_EMBED_DIM)),
        other => {
            eprintln!("unknown toy backbone `{other}`");
            return ExitCode::from(2);
        }
    };
    let embedder = ToyStatsEmbedder::new(seed);
    let out = BufWriter::new(stdout().lock());
    match serve_plugin(stdin().lock(), out, Some(backbone.as_ref()), Some(&embedder)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(4)
        }
    }
}
