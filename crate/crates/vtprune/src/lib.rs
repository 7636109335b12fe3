//! File formats, profile tables, external scorers and the command-line
//! front end for `vtprune-core`.

pub mod cli;
pub mod dump;
pub mod error;
pub mod output;
pub mod profiles;
pub mod rules;
pub mod scorer;
pub mod synth;

pub use crate::dump::{load_dump, ClsPolicy, Manifest, RawDump, Sample};
pub use crate::error::{Error, Result};
pub use crate::output::{RetainedOutput, RunConfig};
