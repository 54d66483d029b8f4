//! Reference implementations that double-check the real ones from the
//! outside: a regex-based import scanner, a corpus of notebook cells, and a
//! from-scratch notebook-protocol client. Nothing here depends on the crates
//! under test.

pub mod client;
pub mod corpus;
pub mod scanner;
