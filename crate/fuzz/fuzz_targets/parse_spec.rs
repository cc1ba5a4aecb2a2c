#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = provega_core::parse_spec(text) {
        // A spec that parses must survive its own serialization.
        let again = provega_core::parse_spec(&spec.to_json_string()).expect("reparse");
        assert_eq!(again.to_json_string(), spec.to_json_string());
    }
});
