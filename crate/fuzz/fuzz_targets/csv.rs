#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = provega_core::data_source::parse_csv(data) {
        for row in &ds.rows {
            assert_eq!(row.values.len(), ds.columns.len());
        }
    }
});
