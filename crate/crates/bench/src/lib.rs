//! Criterion benchmarks for roleret-core live under benches/.
