//! Holder crate for the `acceptance` test target.
//!
//! Run with `cargo test -p tda-acceptance --test acceptance`.
