//! Pipeline stages behind the `drascore` binary.
pub mod config;
pub mod stages;

pub use config::RunConfig;
pub use stages::VERSION;
