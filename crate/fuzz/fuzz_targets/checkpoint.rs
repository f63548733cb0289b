#![no_main]

use brts_core::checkpoint::{parse_checkpoint, to_checkpoint_string};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(params) = parse_checkpoint(text) {
        let rendered = to_checkpoint_string(&params);
        assert_eq!(parse_checkpoint(&rendered).expect("rendered checkpoint parses"), params);
    }
});
