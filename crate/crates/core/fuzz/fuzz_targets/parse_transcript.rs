#![no_main]

use hepaas_core::mpc::{parse_transcript, transcript_to_jsonl};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|s: &str| {
    // anything that parses must survive a write/read cycle unchanged
    if let Ok(entries) = parse_transcript(s) {
        assert_eq!(parse_transcript(&transcript_to_jsonl(&entries)).unwrap(), entries);
    }
});
