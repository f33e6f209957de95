//! Criterion benchmarks for the `ergolab` kernels live under `benches/`.
