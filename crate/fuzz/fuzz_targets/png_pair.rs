//! PNG ingestion runs on untrusted files; both decode paths must fail
//! gracefully on malformed input.

#![no_main]

use libfuzzer_sys::fuzz_target;
use segforge_core::data::pngio::{decode_image_bytes, decode_mask_bytes};

fuzz_target!(|data: &[u8]| {
    let _ = decode_image_bytes::<f32>(data, "fuzz");
    let _ = decode_mask_bytes::<f32>(data, "fuzz");
});
