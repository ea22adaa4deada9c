//! Library half of the experiment driver; the binary in `main.rs` is a thin
//! argument-parsing shell so integration tests can call commands directly.

pub mod commands;
pub mod config;
pub mod report;

use entlab_core::Error;

/// Failure classes with fixed exit codes and machine-parsable prefixes:
/// config 2, data 3, invariant 4.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Data(String),
    Invariant(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Invariant(_) => 4,
        }
    }

    /// Single-line stderr form, `error[<class>]: <message>`.
    pub fn render(&self) -> String {
        let (class, msg) = match self {
            Failure::Config(m) => ("config", m),
            Failure::Data(m) => ("data", m),
            Failure::Invariant(m) => ("invariant", m),
        };
        let one_line = msg.replace('\n', " ");
        format!("error[{class}]: {one_line}")
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        match &e {
            Error::Io(_) | Error::Json(_) | Error::Data(_) => Failure::Data(e.to_string()),
            _ => Failure::Invariant(e.to_string()),
        }
    }
}
