//! Question generation from a passage and an answer span.
//!
//! The pipeline tags named entities with indexed labels, splits text into
//! WordPiece ids, and trains an encoder-decoder transformer (built on the
//! reverse-mode [`autodiff`] engine in this crate) to map
//! `answer [*] passage` to a question. [`generation`] decodes with beam
//! search and [`evaluation`] scores output by word-level edit distance.

pub mod autodiff;
pub mod evaluation;
pub mod generation;
pub mod preprocess;
pub mod resources;
pub mod squad;
pub mod tensor;
pub mod training;
pub mod transformer;
pub mod wordpiece;
