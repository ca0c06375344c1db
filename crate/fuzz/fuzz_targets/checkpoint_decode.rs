#![no_main]

use libfuzzer_sys::fuzz_target;
use prismflow::checkpoint::{decode, encode};
use prismflow::numcore::ParamBlocks;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = decode(data) {
        // Anything accepted must survive a re-encode.
        let again = decode(&encode(&ck.model, &ck.resolved)).unwrap();
        assert_eq!(again.model.flatten(), ck.model.flatten());
    }
});
