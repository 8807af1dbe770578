#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(job) = gsedit_core::pipeline::EditJob::from_json_bytes(data) {
        job.validate_fields().expect("parsed job is valid");
    }
});
