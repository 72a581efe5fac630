#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = fgss::channel_model::ScenarioCatalog::from_toml_str(text);
    }
});
