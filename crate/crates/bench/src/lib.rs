//! Criterion benchmarks for the hot kernels of `hazefork`; see `benches/`.
