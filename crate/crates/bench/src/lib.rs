//! Criterion benchmarks for the sdaf kernels; see `benches/kernels.rs`.
