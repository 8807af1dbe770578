#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = gsedit_core::rten::from_bytes(data) {
        // accepted tensors must re-serialize bitwise
        let round = gsedit_core::rten::to_bytes(&t);
        let back = gsedit_core::rten::from_bytes(&round).expect("round trip parses");
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
});
