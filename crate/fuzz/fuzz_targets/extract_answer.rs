#![no_main]

use brts_core::task::extract_answer;
use brts_core::vocab::{is_digit, ANSWER_MARK};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // one token per byte, covering reserved and free ids
    let tokens: Vec<u32> = data.iter().map(|&b| u32::from(b % 40)).collect();
    match extract_answer(&tokens) {
        Some(answer) => {
            assert!(!answer.is_empty() && answer.iter().all(|&t| is_digit(t)));
            assert!(tokens.contains(&ANSWER_MARK));
        }
        None => {}
    }
});
