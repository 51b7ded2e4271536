#![no_main]

use libfuzzer_sys::fuzz_target;
use xalign::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(c) = RunConfig::from_toml_str(text, &[]) {
        let again = RunConfig::from_toml_str(&c.to_toml(), &[]).expect("written config reparses");
        assert_eq!(again.digest(), c.digest());
    }
});
