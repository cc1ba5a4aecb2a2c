#![no_main]

use libfuzzer_sys::fuzz_target;
use provega_core::protocol::{decode_generator, encode};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(msg) = decode_generator(text) {
        let again = decode_generator(&encode(&msg)).expect("reparse");
        assert_eq!(encode(&again), encode(&msg));
    }
});
