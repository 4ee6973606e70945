//! Criterion benchmarks for the kernels in `statfem-euclid`; see `benches/`.
