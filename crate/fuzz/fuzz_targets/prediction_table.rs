#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = fgss::predictor::TableEstimator::from_reader(data);
});
