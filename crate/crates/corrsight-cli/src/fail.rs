//! Error carrier that remembers which stage failed, so the process can
//! exit with a distinct code per failure class.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Ingest,
    Runtime,
}

impl Stage {
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Ingest => 3,
            Stage::Runtime => 4,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Ingest => "ingest",
            Stage::Runtime => "runtime",
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub stage: Stage,
    pub msg: String,
}

impl Failure {
    pub fn config(msg: impl Into<String>) -> Self {
        Failure {
            stage: Stage::Config,
            msg: msg.into(),
        }
    }

    pub fn ingest(msg: impl Into<String>) -> Self {
        Failure {
            stage: Stage::Ingest,
            msg: msg.into(),
        }
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Failure {
            stage: Stage::Runtime,
            msg: msg.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error: {}", self.stage.label(), self.msg)
    }
}

impl std::error::Error for Failure {}

impl From<corrsight_core::Error> for Failure {
    fn from(e: corrsight_core::Error) -> Self {
        Failure::runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, Failure>;
