//! Noise-aware discrete speech tokenizer.
//!
//! A frame-level predictor maps speech features to unit logits, a residual
//! encoder summarizes each utterance in one global vector, and a decoder
//! reconstructs the features from both. Training ties the units of clean and
//! augmented inputs together so that small acoustic perturbations do not
//! change the token stream.

pub mod augment;
pub mod eval;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod featureio;
pub mod interp;
pub mod losses;
pub mod model;
pub mod par;
pub mod tensor;
pub mod tokenize;
pub mod train;

pub use error::{NastError, Result};
pub use featureio::{FeatureSequence, Manifest, SyntheticSpec, UtteranceRecord};
pub use model::{NastConfig, NastModel};
pub use tensor::Matrix;
pub use tokenize::{KMeansModel, Quantizer, UnitSequence};
pub use train::{TrainConfig, TrainState};
