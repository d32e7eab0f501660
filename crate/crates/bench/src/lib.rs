//! Criterion benchmarks for the kernels, one attention block and the tiny model; see `benches/`.
