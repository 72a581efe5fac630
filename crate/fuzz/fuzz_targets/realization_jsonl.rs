#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(r) = fgss::channel_model::ChannelRealization::import_jsonl(data) {
        let mut out = Vec::new();
        r.export_jsonl(&mut out).unwrap();
    }
});
