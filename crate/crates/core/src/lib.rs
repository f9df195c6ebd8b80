//! Question-answering based consistency evaluation for generated and edited
//! images.
//!
//! An evaluation extracts the visual concepts a request implies, asks blind
//! questions about them, has a vision model answer those questions, refines
//! with follow-up questions while the reasoning model asks for more, and
//! finally asks for a 0-10 consistency score. The [`stats`] module measures
//! agreement between such scores and human ratings.

pub mod backend;
pub mod concepts;
pub mod model;
mod payload;
pub mod templates;
pub mod exec;
pub mod ite;
pub mod pipeline;
pub mod questions;
pub mod scorer;
pub mod stats;
pub mod report;
pub mod cli;
