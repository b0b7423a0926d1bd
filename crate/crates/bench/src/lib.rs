//! Criterion benchmarks for the numeric kernels and the simulated loop; run
//! with `cargo bench -p reasonloop-bench`.
