#![no_main]

use daf_core::harness::AccuracyMatrix;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = AccuracyMatrix::from_csv(text);
    }
});
