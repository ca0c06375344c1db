#![no_main]

use libfuzzer_sys::fuzz_target;

// Parsing only; no command is run.
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let argv = std::iter::once("prismflow").chain(text.split_whitespace());
        let _ = prismflow_cli::parse_args(argv);
    }
});
