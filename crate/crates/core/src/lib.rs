//! Generative retrieval with docid construction, constrained decoding and
//! iterative reasoning (think, retrieve, refine).

pub mod constraint;
pub mod corpus;
pub mod decode;
pub mod docid;
pub mod error;
pub mod eval;
pub mod lm;
pub mod orchestrator;
pub mod reasoning;

pub use constraint::{AutomatonState, Constraint, ConstraintAutomaton, Strategy};
pub use corpus::{Corpus, Document, Query, Token, TokenSeq, Tokenizer, Vocabulary, END, SEP, UNK};
pub use decode::{BeamConfig, Candidate, Hypothesis, RankedList};
pub use docid::{DocIdIndex, DocIdRecord, IndexConfig, View};
pub use error::{Error, Result};
pub use lm::{GenerationRequest, LanguageModel, NgramModel, ScriptedModel, TokenDistribution};
