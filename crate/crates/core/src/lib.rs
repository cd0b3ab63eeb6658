//! Multi-knowledge prefix prompting for sequence-to-sequence translation.
//!
//! Similar sentence pairs from a translation memory, matched bilingual
//! terms and constituency templates are turned into prefix prompts for the
//! encoder input and decoder output of a small transformer. The crate covers
//! knowledge acquisition, dataset construction, target-masked training,
//! prefix-forced beam search and evaluation.

pub mod cli;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod prompt;
pub mod retrieval;
pub mod synth;
pub mod template;
pub mod terminology;

pub use error::{Error, Result};
