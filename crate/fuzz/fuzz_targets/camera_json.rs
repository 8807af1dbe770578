#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(cams) = gsedit_core::splat::cameras_from_json_bytes(data) {
        for c in &cams {
            c.validate().expect("parsed camera is valid");
        }
        let bytes = gsedit_core::splat::cameras_to_json_bytes(&cams);
        gsedit_core::splat::cameras_from_json_bytes(&bytes).expect("round trip");
    }
});
