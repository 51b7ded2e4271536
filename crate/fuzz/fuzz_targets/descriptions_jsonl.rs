#![no_main]

use libfuzzer_sys::fuzz_target;
use xalign::text::DescriptionSet;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(set) = DescriptionSet::parse_jsonl(text) {
        let again = DescriptionSet::parse_jsonl(&set.to_jsonl()).expect("written set reparses");
        assert_eq!(again, set);
    }
});
