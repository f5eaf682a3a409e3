//! Benchmarks for elmo-core live in `benches/`; run `cargo bench -p elmo-bench`.
