//! End-to-end acceptance checks for the `thor` crates. The suite lives in
//! `tests/acceptance.rs` and is run with `cargo test -p thor-e2e`.
