#![no_main]

use hepaas_core::formats::parse_plan;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|s: &str| {
    let _ = parse_plan(s);
});
