#![no_main]

use libfuzzer_sys::fuzz_target;
use nullface_core::evaluation::MetricsReport;

fuzz_target!(|data: &[u8]| {
    let _ = MetricsReport::from_csv(data);
});
