#![no_main]

use libfuzzer_sys::fuzz_target;
use m2gan::train::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = TrainConfig::parse(text) {
        assert_eq!(TrainConfig::parse(&cfg.to_text()).expect("rendered config parses"), cfg);
    }
});
