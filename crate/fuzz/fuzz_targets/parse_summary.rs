#![no_main]

use libfuzzer_sys::fuzz_target;
use m2gan::experiment::parse_summary_text;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_summary_text(text);
    }
});
