//! Benchmark harness: navigation traces, headless bench runs and reports.

pub mod bench;
pub mod report;
pub mod trace;
