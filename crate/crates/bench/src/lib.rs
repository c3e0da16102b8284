//! Benchmark-only crate; see `benches/attack.rs`.
