//! Synthetic narrative corpus, relation labels and the `EVSQ` feature file.

pub mod corpus;
pub mod format;
pub mod narrative;

pub use corpus::{restride, Corpus, Event, EventSequence, Relation, RelationTriplet};
pub use format::{read_features, write_features};
pub use narrative::{derive_relation_labels, generate_corpus, GenerationTrace, NarrativeConfig, World};
