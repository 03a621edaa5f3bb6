#![no_main]

use libfuzzer_sys::fuzz_target;
use nullface_core::backbones::process::{decode_tensor, parse_request, parse_response};
use nullface_core::tensor::LatentShape;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else {
        return;
    };
    let _ = parse_request(line);
    if let Ok(r) = parse_response(line) {
        if let Some(eps) = r.eps.as_deref() {
            let shape = LatentShape::parse("4x8x8").unwrap();
            let _ = decode_tensor(eps, shape);
        }
    }
    let _ = decode_tensor(line, LatentShape::parse("1x2x2").unwrap());
});
