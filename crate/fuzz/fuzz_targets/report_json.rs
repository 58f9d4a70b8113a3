#![no_main]

use daf_core::report::RunDocument;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = RunDocument::from_json(data);
});
