#![no_main]

use libfuzzer_sys::fuzz_target;
use xalign::data::DatasetManifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = DatasetManifest::from_json_str(text, ".") {
        let again = DatasetManifest::from_json_str(&m.to_json(), ".").expect("canonical manifest reparses");
        assert_eq!(again.digest(), m.digest());
    }
});
