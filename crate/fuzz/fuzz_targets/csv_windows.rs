#![no_main]

use libfuzzer_sys::fuzz_target;
use prismflow::datasets::{parse_csv_windows, WindowMode};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let stride = data.first().map_or(1, |b| usize::from(b % 4) + 1);
    for mode in [WindowMode::Blocks, WindowMode::Sliding { seq_len: 3, stride }] {
        if let Ok(ds) = parse_csv_windows(text, mode) {
            assert!(ds.windows().iter().all(|w| w.data().iter().all(|v| v.is_finite())));
        }
    }
});
