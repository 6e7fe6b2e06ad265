//! Criterion benchmarks for the counting pipeline, topic routing and
//! occupancy accounting. Run with `cargo bench -p flowmon-bench`.
