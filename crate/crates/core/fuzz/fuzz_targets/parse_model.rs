#![no_main]

use hepaas_core::formats::parse_model;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|s: &str| {
    let _ = parse_model(s);
});
