//! Desk-scale toolkit that translates noisy early-stage writing into
//! conventional writing with a character-level encoder-decoder model,
//! trains it with label-smoothed cross-entropy or a robust mixture
//! likelihood, and evaluates translations with edit-distance and
//! readability metrics, calibration diagnostics, and a reject option.

pub mod augment;
pub mod calibration;
pub mod decoding;
pub mod metrics;
pub mod model;
pub mod ngram;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod training;
