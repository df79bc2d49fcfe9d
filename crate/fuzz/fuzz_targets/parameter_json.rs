#![no_main]

use libfuzzer_sys::fuzz_target;
use tlmest::io::{parameter_json, parse_parameter_json};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(p) = parse_parameter_json(text) {
        if p.is_finite() {
            assert_eq!(parse_parameter_json(&parameter_json(&p).unwrap()).unwrap(), p);
        }
    }
});
