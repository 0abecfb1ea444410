//! Textual descriptions for concept activation vectors.
//!
//! The engine reads a bundle of layer activations and joint text-image
//! embeddings, discovers (or imports) concept activation vectors, selects the
//! most relevant images or receptive-field crops per concept, ranks catalog
//! texts for each concept with SoftWPMI, derives a common description and
//! ranks concepts by ConceptSHAP importance.

pub mod cav_bank;
pub mod concept_shap;
pub mod discovery;
pub mod error;
pub mod pipeline;
pub mod receptive_field;
pub mod selection;
pub mod synthetic;
pub mod text_matcher;
pub mod tensor_store;

pub use error::{Error, Result};
