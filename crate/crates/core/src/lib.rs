//! Joint transducer and internal-language-model training.
//!
//! HAT and MHAT transducers over a small causal encoder, the alignment
//! lattice and its forward-backward recursion, the family of objectives for
//! injecting unpaired text (ILMT, ILMA, JOIST, JEIT, CJJT), a synthetic
//! rare-word corpus, training, and beam-search decoding with LM fusion.

pub mod corpus;
pub mod decoding;
pub mod error;
pub mod lattice;
pub mod losses;
pub mod models;
pub mod numerics;
pub mod training;

pub use corpus::{CorpusSpec, SplitBundle, Utterance, Vocabulary};
pub use decoding::{FusionConfig, Hypothesis, WerBreakdown};
pub use error::{Error, Result};
pub use losses::{Mode, ObjectiveSpec};
pub use models::{ModelConfig, ModelParams, TokenSequence, Variant};
pub use numerics::{Gradients, ParamSet, Tensor};
pub use training::{Checkpoint, TrainConfig};
