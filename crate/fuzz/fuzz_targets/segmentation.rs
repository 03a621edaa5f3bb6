#![no_main]

use libfuzzer_sys::fuzz_target;
use nullface_core::masks::{decode_segmentation, PaletteSidecar};

// Input layout: u16 LE sidecar length (0 means none), sidecar text, image bytes.
fuzz_target!(|data: &[u8]| {
    let Some((len, rest)) = data.split_first_chunk::<2>() else {
        return;
    };
    let len = u16::from_le_bytes(*len) as usize;
    if len > rest.len() {
        return;
    }
    let (sidecar, image) = rest.split_at(len);
    let sidecar = if len == 0 {
        None
    } else {
        match std::str::from_utf8(sidecar).ok().map(PaletteSidecar::parse) {
            Some(Ok(s)) => Some(s),
            _ => return,
        }
    };
    let _ = decode_segmentation(image, sidecar.as_ref());
});
