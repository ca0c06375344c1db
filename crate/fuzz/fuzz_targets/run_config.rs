#![no_main]

use libfuzzer_sys::fuzz_target;
use prismflow::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_toml(text) {
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
    let _ = prismflow::trainer::TrainConfig::from_toml(text);
});
