pub mod artifacts;
pub mod config;
pub mod error;
pub mod maintenance;
pub mod pipeline;
pub mod protocol;
pub mod server;
