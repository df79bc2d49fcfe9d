#![no_main]

use libfuzzer_sys::fuzz_target;
use tlmest::experiments::aggregate;
use tlmest::io::{read_records_csv, write_records_csv};

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = read_records_csv(data) {
        let _ = aggregate(&records);
        let mut out = Vec::new();
        write_records_csv(&mut out, &records).unwrap();
        assert_eq!(read_records_csv(out.as_slice()).unwrap().len(), records.len());
    }
});
