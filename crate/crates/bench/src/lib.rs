//! Criterion benchmarks for the hot paths of `autofuzz-core`; see `benches/`.
