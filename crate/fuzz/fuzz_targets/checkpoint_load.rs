//! Checkpoint decoding must reject arbitrary bytes with an error, never a
//! panic, out-of-bounds read, or runaway allocation.

#![no_main]

use libfuzzer_sys::fuzz_target;
use segforge_core::checkpoint::{load_checkpoint_bytes, peek_dtype};

fuzz_target!(|data: &[u8]| {
    let _ = peek_dtype(data);
    let _ = load_checkpoint_bytes::<f32>(data);
    let _ = load_checkpoint_bytes::<f64>(data);
});
