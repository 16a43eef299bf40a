//! Drivers behind the `hclrec` binary. Command parsing lives in the binary;
//! everything here takes plain argument structs so the pieces stay testable.

pub mod data;
pub mod grid;
pub mod plot;
pub mod run;

use hclrec::Error;

/// Process exit code for a pipeline error: 1 usage, 2 data, 3 numeric.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::UnknownFormat(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}
