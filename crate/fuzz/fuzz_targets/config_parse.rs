//! Run-config parsing takes user-controlled JSON; any input must produce
//! Ok or a config error, never a panic.

#![no_main]

use libfuzzer_sys::fuzz_target;
use segforge_cli::config::parse_config;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = parse_config(text) {
            let _ = cfg.validate();
        }
    }
});
