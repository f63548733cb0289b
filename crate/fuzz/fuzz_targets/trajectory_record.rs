#![no_main]

use brts_core::rollout::TrajectoryRecord;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rec) = text.parse::<TrajectoryRecord>() {
        let again: TrajectoryRecord = rec.to_string().parse().expect("rendered record parses");
        assert_eq!(again, rec);
    }
});
