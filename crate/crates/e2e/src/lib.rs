//! Holds the `acceptance` test target; run it with
//! `cargo test -p manifold-kin-e2e`.
