//! Holds the `acceptance` test target; run it with `cargo test -p xalign-suite --test acceptance`.
