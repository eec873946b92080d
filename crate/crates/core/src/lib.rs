//! Patient-trial eligibility matching over page-image medical records.

pub mod eval;
pub mod gateway;
pub mod ids;
pub mod ingest;
pub mod matching;
pub mod model;
pub mod par;
pub mod prep;
pub mod prompts;
pub mod record;
pub mod stats;
pub mod store;
pub mod workspace;
