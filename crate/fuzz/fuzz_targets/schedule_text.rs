#![no_main]

use libfuzzer_sys::fuzz_target;
use nullface_core::schedule::NoiseSchedule;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(s) = NoiseSchedule::from_text(text) {
            let again = NoiseSchedule::from_text(&s.to_text()).expect("serialized schedule parses");
            assert_eq!(again.to_text(), s.to_text());
        }
    }
});
