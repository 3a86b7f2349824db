//! Cross-modal text–video retrieval with semantic-role disentangled embeddings.
//!
//! Captions are split into noun and verb roles, video clips are contextualized
//! by a self-attention encoder over their modality features, and both sides
//! are mapped into noun, verb and joint embedding spaces trained with a
//! four-direction triplet loss. Retrieval quality is measured with mAP over
//! binary relevance and nDCG over graded relevance.

pub mod error;
pub mod matrix;
pub mod nn;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub mod text_roles;
pub mod model;
pub mod eval;
pub mod loss;
pub mod data_io;
pub mod train;
pub mod selfcheck;
