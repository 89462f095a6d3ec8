#![no_main]

use hepaas_core::formats::parse_batch_csv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|s: &str| {
    let _ = parse_batch_csv(s);
});
