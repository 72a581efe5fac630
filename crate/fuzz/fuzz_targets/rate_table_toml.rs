#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(table) = fgss::rate_function::RateTable::from_toml_str(text) {
            let again = fgss::rate_function::RateTable::from_toml_str(&table.to_toml_string()).unwrap();
            assert_eq!(again.len(), table.len());
        }
    }
});
