//! Criterion benchmarks for the retrieval paths live in `benches/`.
