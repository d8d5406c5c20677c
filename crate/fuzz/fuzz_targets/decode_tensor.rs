#![no_main]

use libfuzzer_sys::fuzz_target;
use m2gan::tensor::serialize::{decode_tensor, encode_tensor};

fuzz_target!(|data: &[u8]| {
    if let Ok((t, used)) = decode_tensor(data) {
        assert!(used <= data.len());
        assert_eq!(t.len(), t.shape().iter().product::<usize>());
        // anything accepted must survive a round trip
        let mut again = Vec::new();
        encode_tensor(&t, &mut again);
        let (u, n) = decode_tensor(&again).expect("re-encoded tensor decodes");
        assert_eq!(n, again.len());
        assert_eq!(t.shape(), u.shape());
    }
});
