#![no_main]

use brts_core::task::{parse_task_line, read_tasks};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(task) = parse_task_line(text, 0) {
        let again = parse_task_line(&task.to_line(), 0).expect("rendered line parses");
        assert_eq!(again, task);
    }
    let _ = read_tasks(text.as_bytes());
});
