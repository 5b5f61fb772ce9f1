//! Criterion benchmarks for the lane-graph operators and the model forward
//! pass. Run with `cargo bench -p lanercnn-bench`.
