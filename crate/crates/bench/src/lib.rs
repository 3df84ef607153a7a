//! Criterion benchmarks for flowedit-core; see `benches/`.
