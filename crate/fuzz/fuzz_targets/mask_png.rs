#![no_main]

use libfuzzer_sys::fuzz_target;
use nullface_core::masks::{decode_mask_png, encode_mask_png};

fuzz_target!(|data: &[u8]| {
    let _ = decode_mask_png(data, Some((32, 32)));
    if let Ok(mask) = decode_mask_png(data, None) {
        let bytes = encode_mask_png(&mask).expect("decoded mask encodes");
        let again = decode_mask_png(&bytes, None).expect("encoded mask decodes");
        assert_eq!((again.width(), again.height()), (mask.width(), mask.height()));
    }
});
