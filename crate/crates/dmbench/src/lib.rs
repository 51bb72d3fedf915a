//! Benchmark harness for the disaggregated-memory B+-tree.
