//! Raw-text → Universal Dependencies parsing pipeline.
//!
//! The crate is organized around the pipeline stages: [`segment`] splits raw
//! text into sentences and tokens, [`embed`] builds word representations
//! (static tables, character encoders, and a bidirectional LM for contextual
//! vectors), [`tagger`] predicts UPOS, [`parser`] scores and decodes
//! dependency trees (single models or ensembles), [`xlingual`] maps embedding
//! spaces for low-resource transfer, [`conllu`] reads and writes treebanks,
//! and [`eval`] scores system output against gold with span-aligned F1.
//! All neural components run on the reverse-mode [`autodiff`] engine.

pub mod autodiff;
pub mod conllu;
pub mod embed;
pub mod eval;
pub mod parser;
pub mod pipeline;
pub mod segment;
pub mod tagger;
pub mod xlingual;
