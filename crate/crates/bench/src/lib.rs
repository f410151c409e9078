//! Benchmarks for retrieval scoring and training steps live under `benches/`.
