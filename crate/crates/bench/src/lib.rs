//! Criterion benchmarks for `urdmu-core` live under `benches/`.
