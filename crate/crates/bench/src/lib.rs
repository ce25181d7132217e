//! Criterion benchmarks for the bridge kernels, signal ops and training
//! loop. See `benches/`.
