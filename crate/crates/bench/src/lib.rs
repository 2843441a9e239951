//! Criterion benchmarks for the numeric kernels and model passes; see
//! `benches/`.
