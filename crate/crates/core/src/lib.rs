//! Validation-based demonstration selection for in-context learning.
//!
//! The crate is split by concern:
//!
//! - [`corpus`]: examples, task templates and dataset descriptors;
//! - [`retrieval`]: BM25 and embedding similarity, top-k candidate retrieval;
//! - [`backend`]: language-model log-probability backends;
//! - [`selection`]: demonstration scoring, selection and baselines;
//! - [`evaluation`]: prompts, predictions, metrics and reports;
//! - [`synthetic`]: a generated toy task for end-to-end checks.

pub mod backend;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod retrieval;
pub mod selection;
pub mod synthetic;

pub use error::{Error, Result};
