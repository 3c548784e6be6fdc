//! Shared fixtures for the criterion benchmarks.

use clipstop_core::data::{generate_synthetic, DatasetManifest, SynthConfig};

/// A small deterministic dataset sized for micro-benchmarks.
pub fn bench_dataset() -> DatasetManifest {
    let cfg = SynthConfig { n_studies: 64, ..SynthConfig::informative_a4c(1234) };
    generate_synthetic(&cfg).expect("bench dataset")
}
