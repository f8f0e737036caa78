#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        // Parsing + validation must never panic on arbitrary TOML.
        let _ = envckb::config::SceneConfig::from_toml_str(s);
    }
});
