#![no_main]

use libfuzzer_sys::fuzz_target;
use xalign::train::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Checkpoint::from_bytes(data) {
        assert_eq!(c.to_bytes(), data);
    }
});
