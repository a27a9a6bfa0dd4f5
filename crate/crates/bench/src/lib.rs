//! Benchmarks for the hot paths in `thoughtlog-core`; see `benches/`.
