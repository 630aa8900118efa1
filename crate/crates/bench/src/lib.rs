//! Benchmark-only package; see `benches/tabular.rs`.
