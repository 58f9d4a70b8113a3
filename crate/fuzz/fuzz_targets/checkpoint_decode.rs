#![no_main]

use daf_core::checkpoint::{decode, encode};
use libfuzzer_sys::fuzz_target;

// Input is the manifest, one NUL byte, then the payload.
fuzz_target!(|data: &[u8]| {
    let (manifest, payload) = match data.iter().position(|&b| b == 0) {
        Some(i) => (&data[..i], &data[i + 1..]),
        None => (data, &[][..]),
    };
    if let Ok(ckpt) = decode(manifest, payload) {
        let (m, p) = encode(&ckpt, "fuzz.ckpt.bin").unwrap();
        assert_eq!(decode(m.as_bytes(), &p).unwrap(), ckpt);
    }
});
