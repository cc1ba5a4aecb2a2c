#![no_main]

use libfuzzer_sys::fuzz_target;
use provega_core::protocol::{decode_client, encode};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(msg) = decode_client(text) {
        let again = decode_client(&encode(&msg)).expect("reparse");
        assert_eq!(encode(&again), encode(&msg));
    }
});
