//! Library surface of the experiment runner: configuration handling and the
//! orchestration routines behind the `onn` binary's verbs.

pub mod config;
pub mod runner;

use std::path::PathBuf;

/// Resolves the bundled desk-scale dataset fixture.
///
/// Honors the `ONN_MNIST_DIR` environment variable so runs and tests can
/// point at a full-size IDX dataset instead of the checked-in fixture.
pub fn test_fixture_dir() -> PathBuf {
    if let Ok(dir) = std::env::var("ONN_MNIST_DIR") {
        return PathBuf::from(dir);
    }
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../testdata/digits-8x8")
}
