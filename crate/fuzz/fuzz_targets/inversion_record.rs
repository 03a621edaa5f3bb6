#![no_main]

use libfuzzer_sys::fuzz_target;
use nullface_core::container::{record_from_bytes, record_to_bytes};

// Input layout: u32 LE length of meta.json, meta.json, tensors.bin.
fuzz_target!(|data: &[u8]| {
    let Some((len, rest)) = data.split_first_chunk::<4>() else {
        return;
    };
    let len = u32::from_le_bytes(*len) as usize;
    if len > rest.len() {
        return;
    }
    let (meta, tensors) = rest.split_at(len);
    if let Ok(rec) = record_from_bytes(meta, tensors) {
        let (m, t) = record_to_bytes(&rec).expect("loaded record serializes");
        record_from_bytes(m.as_bytes(), &t).expect("serialized record loads");
    }
});
