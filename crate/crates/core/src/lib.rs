//! Audio-visual continuous pseudo-labeling at desk scale.
//!
//! A two-stream CTC encoder over synchronized audio/video feature sequences,
//! trained supervised on a labeled split and semi-supervised on unlabeled
//! splits with continuously regenerated pseudo-labels (cache-based or
//! EMA-teacher), evaluated with greedy and lexicon-constrained beam-search
//! decoding against a word-level n-gram language model.

pub mod ctc;
pub mod cpl;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod eval;
pub mod lm;
pub mod tensor;
