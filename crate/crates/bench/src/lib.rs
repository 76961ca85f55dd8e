//! Criterion benchmarks for the curlgauge diagnostics live in `benches/`.
