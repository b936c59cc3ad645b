//! Command-line front end pieces: configuration, CSV ingestion, artifact
//! persistence, and pipeline orchestration. The `corrsight` binary is a
//! thin dispatcher over these modules.

pub mod artifacts;
pub mod config;
pub mod fail;
pub mod ingest;
pub mod pipeline;
