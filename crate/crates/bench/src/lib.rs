//! Criterion benchmarks for the core pipelines; see `benches/pipelines.rs`.
