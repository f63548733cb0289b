#![no_main]

use brts_core::trainer::parse_log_line;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(fields) = parse_log_line(text) {
        assert_eq!(fields[0].0, "step");
    }
});
