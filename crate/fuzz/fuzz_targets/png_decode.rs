#![no_main]

use libfuzzer_sys::fuzz_target;
use xalign::data::raster::decode_png;

fuzz_target!(|data: &[u8]| {
    if let Ok(g) = decode_png(data) {
        assert!(g.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
