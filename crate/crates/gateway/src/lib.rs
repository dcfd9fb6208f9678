//! HTTP service and command-line front end for `ontoprompt-core`.

pub mod cli;
pub mod config;
pub mod server;
