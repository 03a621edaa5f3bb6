#![no_main]

use libfuzzer_sys::fuzz_target;
use nullface_core::runs::RunManifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = RunManifest::parse(text);
    }
});
