//! Criterion benchmarks for the occupancy accounting live in `benches/`.
