//! Criterion benchmarks for the hot paths of `cmas-core`; see `benches/`.
