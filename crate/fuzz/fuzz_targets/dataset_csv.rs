#![no_main]

use libfuzzer_sys::fuzz_target;
use tlmest::io::{read_dataset_csv, write_dataset_csv};
use tlmest::LossFamily;

// first byte picks the family, the rest is the CSV
fuzz_target!(|data: &[u8]| {
    let Some((&tag, csv)) = data.split_first() else { return };
    let family = if tag & 1 == 1 { LossFamily::LogisticLogit } else { LossFamily::SquaredIdentity };
    if let Ok(d) = read_dataset_csv(csv, family) {
        let mut out = Vec::new();
        write_dataset_csv(&mut out, &d).unwrap();
        assert_eq!(read_dataset_csv(out.as_slice(), family).unwrap(), d);
    }
});
