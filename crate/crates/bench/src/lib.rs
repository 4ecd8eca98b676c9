//! Criterion benchmarks for `slicerisk` live under `benches/`.
