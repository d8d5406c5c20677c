#![no_main]

use libfuzzer_sys::fuzz_target;
use m2gan::corpus::parse_corpus;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = parse_corpus(data) {
        for r in &c.records {
            assert_eq!(r.durations.len(), r.token_ids.len());
            assert_eq!(r.frames.shape()[0], r.durations.iter().sum::<usize>());
        }
    }
});
