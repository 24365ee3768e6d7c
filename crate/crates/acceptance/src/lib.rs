//! Holds the `acceptance` test target, which prints one PASS/FAIL line per
//! release criterion. Run it with `cargo test -p failprobe-acceptance`.
