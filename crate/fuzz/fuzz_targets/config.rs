#![no_main]

use brts_core::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = TrainConfig::parse(text) {
        let again = TrainConfig::parse(&cfg.to_kv_string()).expect("rendered config parses");
        assert_eq!(again, cfg);
    }
});
