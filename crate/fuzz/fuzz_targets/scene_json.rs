#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(scene) = gsedit_core::splat::GaussianScene::from_json_bytes(data) {
        // accepted scenes satisfy the validation invariants
        scene.validate().expect("parsed scene is valid");
        let bytes = scene.to_json_bytes();
        gsedit_core::splat::GaussianScene::from_json_bytes(&bytes).expect("round trip");
    }
});
