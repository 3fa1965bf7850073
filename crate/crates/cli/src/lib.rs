//! Library surface of the command-line tool; `main.rs` is a thin wrapper.

pub fn placeholder() {}
