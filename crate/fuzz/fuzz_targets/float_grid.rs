#![no_main]

use libfuzzer_sys::fuzz_target;
use xalign::data::raster::{decode_grid, encode_grid};
use xalign::data::GridDtype;

fuzz_target!(|data: &[u8]| {
    if let Ok(g) = decode_grid(data) {
        assert_eq!(g.data.len(), g.height * g.width * g.channels);
        let back = decode_grid(&encode_grid(&g, GridDtype::F64)).expect("encoded grid decodes");
        assert_eq!(back.data.len(), g.data.len());
    }
});
