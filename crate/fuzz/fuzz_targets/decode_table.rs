#![no_main]

use libfuzzer_sys::fuzz_target;
use m2gan::tensor::serialize::{decode_table, encode_table};

fuzz_target!(|data: &[u8]| {
    if let Ok(entries) = decode_table(data) {
        let again = decode_table(&encode_table(&entries)).expect("re-encoded table decodes");
        assert_eq!(entries.len(), again.len());
        for ((a, x), (b, y)) in entries.iter().zip(&again) {
            assert_eq!(a, b);
            assert_eq!(x.shape(), y.shape());
        }
    }
});
