//! Benchmark-only crate; see `benches/collisions.rs`.
