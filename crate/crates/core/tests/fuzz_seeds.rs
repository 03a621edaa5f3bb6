//! The checked-in fuzz seeds stay valid inputs for their decoders.

use std::fs;
use std::path::{Path, PathBuf};

use nullface_core::backbones::process::{decode_tensor, parse_request, parse_response};
use nullface_core::backbones::PluginManifest;
use nullface_core::container::record_from_bytes;
use nullface_core::evaluation::{GridSpec, MetricsReport};
use nullface_core::kv::KvRecord;
use nullface_core::masks::{decode_mask_png, decode_segmentation, PaletteSidecar};
use nullface_core::runs::RunManifest;
use nullface_core::schedule::NoiseSchedule;
use nullface_core::tensor::LatentShape;

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            let b = fs::read(&p).unwrap();
            (p, b)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn text(b: &[u8]) -> &str {
    std::str::from_utf8(b).unwrap()
}

#[test]
fn text_seeds_parse() {
    for (p, b) in seeds("schedule_text") {
        let r = NoiseSchedule::from_text(text(&b));
        // Regression inputs are named after what they exercise and must be refused.
        assert_eq!(r.is_ok(), !p.ends_with("huge-steps"), "{}", p.display());
    }
    for (p, b) in seeds("kv_record") {
        KvRecord::parse(text(&b)).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
    for (p, b) in seeds("plugin_manifest") {
        PluginManifest::parse(text(&b)).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
    for (p, b) in seeds("grid_spec") {
        GridSpec::parse(text(&b)).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
    for (p, b) in seeds("run_manifest") {
        RunManifest::parse(text(&b)).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
    for (p, b) in seeds("metrics_csv") {
        MetricsReport::from_csv(&b[..]).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}

#[test]
fn protocol_seeds_parse() {
    for (p, b) in seeds("plugin_protocol") {
        let line = text(&b);
        let name = p.file_name().unwrap().to_str().unwrap();
        if name.starts_with("request") {
            parse_request(line).unwrap_or_else(|e| panic!("{name}: {e}"));
        } else if name == "response-error" {
            assert!(parse_response(line).is_err());
        } else if name.starts_with("response") {
            let r = parse_response(line).unwrap_or_else(|e| panic!("{name}: {e}"));
            if let Some(eps) = r.eps.as_deref() {
                decode_tensor(eps, LatentShape::parse("4x8x8").unwrap()).unwrap();
            }
        } else {
            decode_tensor(line, LatentShape::parse("1x2x2").unwrap()).unwrap();
        }
    }
}

#[test]
fn binary_seeds_decode() {
    for (p, b) in seeds("inversion_record") {
        let len = u32::from_le_bytes(b[..4].try_into().unwrap()) as usize;
        let (meta, tensors) = b[4..].split_at(len);
        record_from_bytes(meta, tensors).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
    for (p, b) in seeds("mask_png") {
        decode_mask_png(&b, None).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
    for (p, b) in seeds("segmentation") {
        let len = u16::from_le_bytes(b[..2].try_into().unwrap()) as usize;
        let (side, image) = b[2..].split_at(len);
        let side = (len > 0).then(|| PaletteSidecar::parse(text(side)).unwrap());
        let map = decode_segmentation(image, side.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert!(map.labels().iter().all(|&c| c < 9));
    }
}
