//! Command-line front end: a flat `key=value` run configuration and the
//! `train`, `eval`, `gradcheck` and `extract-features` commands.

pub mod commands;
pub mod config;

pub use commands::{run_command, Outcome, Overrides, Verb};
pub use config::RunConfig;
pub use crnn::metrics::{per_class_recall, ua_recall};

use crnn::ErrorKind;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub fn exit_code(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::Config => EXIT_CONFIG,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Numeric => EXIT_NUMERIC,
    }
}

pub fn kind_name(kind: ErrorKind) -> &'static str {
    match kind {
        ErrorKind::Config => "config",
        ErrorKind::Data => "data",
        ErrorKind::Numeric => "numeric",
    }
}
