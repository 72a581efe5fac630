#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(line) = std::str::from_utf8(data) {
        if let Ok(req) = fgss::predictor::parse_request_line(line) {
            let _ = req.key();
        }
    }
});
