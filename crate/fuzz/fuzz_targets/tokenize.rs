#![no_main]

use libfuzzer_sys::fuzz_target;
use xalign::text::describe::clean_sentences;
use xalign::text::{tokenize, Vocabulary};

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    let vocab = Vocabulary::build([text.as_ref()]);
    let ids = tokenize(&text, &vocab, 64);
    assert!(ids.len() <= 64);
    assert!(ids.iter().all(|&i| i < vocab.len()));
    for s in clean_sentences(&text) {
        assert!(!s.trim().is_empty());
    }
});
