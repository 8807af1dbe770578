#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = gsedit_core::cimln::Manifest::from_bytes(data);
});
