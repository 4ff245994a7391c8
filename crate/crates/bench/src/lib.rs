//! Criterion benchmarks for the model; see `benches/`.
