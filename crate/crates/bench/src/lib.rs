//! Criterion benchmarks for attention modes, sparse normalizers and the
//! model forward pass. Run with `cargo bench -p rsst-bench`.
