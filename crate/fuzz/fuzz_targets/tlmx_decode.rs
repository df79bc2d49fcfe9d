#![no_main]

use libfuzzer_sys::fuzz_target;
use tlmest::io::{decode_tlmx, encode_tlmx};
use tlmest::LossFamily;

fuzz_target!(|data: &[u8]| {
    for family in [LossFamily::SquaredIdentity, LossFamily::LogisticLogit] {
        if let Ok(d) = decode_tlmx(data, family) {
            let bytes = encode_tlmx(&d).unwrap();
            assert_eq!(decode_tlmx(&bytes, family).unwrap(), d);
        }
    }
});
