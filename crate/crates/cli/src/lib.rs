//! The `aitok` command-line pipeline as a library, so tests can drive the
//! stages without spawning processes.

pub mod cli;
pub mod commands;
pub mod manifest;
pub mod store;
pub mod suites;

/// A self-check failed: a roundtrip, gradient or replay comparison. The
/// binary maps this to exit code 2; every other error exits with 1.
#[derive(Debug)]
pub struct InvariantViolation(pub String);

impl std::fmt::Display for InvariantViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invariant violated: {}", self.0)
    }
}

impl std::error::Error for InvariantViolation {}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<InvariantViolation>().is_some() {
        2
    } else {
        1
    }
}
