//! Ontology-driven orchestration of chat-completion models.
//!
//! A [`meta_ontology::MetaOntology`] describes every prompt the engine sends.
//! [`dialogue::DialogueEngine`] runs one question through intent detection,
//! entity extraction, context selection and answer extraction.
//! [`meta_learning`] grows the ontology through tuning sessions and
//! [`evaluation`] scores judged answers.

pub mod context_store;
pub mod dialogue;
pub mod evaluation;
pub mod llm_backend;
pub mod meta_learning;
pub mod meta_ontology;
pub mod prompt_engine;
