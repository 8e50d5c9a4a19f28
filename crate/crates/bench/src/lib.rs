//! Criterion benchmarks for the matcher, PQ, and model forward pass live in `benches/`.
