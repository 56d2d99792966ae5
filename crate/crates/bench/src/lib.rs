//! Criterion benchmarks for the segmentation kernels; see `benches/`.
