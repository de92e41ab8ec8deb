//! Constrained-decoding automata over a docid index.

pub mod fm;
pub mod termset;
pub mod trie;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use fm::{FmConstraint, FmIndex, FmState, Interval};
pub use termset::{TermSetConstraint, TermState};
pub use trie::{PrefixTrie, TrieState};

use crate::corpus::{Token, TokenSeq, END, SEP};
use crate::docid::DocIdIndex;
use crate::error::{Error, Result};

/// Tokens that may be emitted next, plus whether END may be taken.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Allowed {
    /// Ascending, no duplicates, never SEP or END.
    pub tokens: Vec<Token>,
    pub end: bool,
}

impl Allowed {
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty() && !self.end
    }
}

pub trait Constraint {
    type State: Clone + fmt::Debug + PartialEq;

    fn start(&self) -> Self::State;
    fn allowed(&self, s: &Self::State) -> Result<Allowed>;
    fn step(&self, s: &Self::State, token: Token) -> Result<Self::State>;
    /// Record indices (ascending) accepted at `s`.
    fn complete(&self, s: &Self::State) -> Result<Vec<usize>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Trie,
    FmIndex,
    TermSet,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Trie, Strategy::FmIndex, Strategy::TermSet];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Trie => "trie",
            Strategy::FmIndex => "fm_index",
            Strategy::TermSet => "term_set",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "trie" => Ok(Strategy::Trie),
            "fm" | "fm_index" | "fmindex" => Ok(Strategy::FmIndex),
            "term_set" | "termset" | "terms" => Ok(Strategy::TermSet),
            other => Err(Error::Config(format!(
                "unknown constraint strategy {other:?} (expected trie, fm_index or term_set)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum ConstraintAutomaton {
    Trie(PrefixTrie),
    Fm(FmConstraint),
    TermSet(TermSetConstraint),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutomatonState {
    Trie(TrieState),
    Fm(FmState),
    TermSet(TermState),
}

/// Builds an automaton over the record bodies of `index`.
pub fn build(strategy: Strategy, index: &DocIdIndex) -> Result<ConstraintAutomaton> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let seqs: Vec<TokenSeq> = index.records().iter().map(|r| r.body().to_vec()).collect();
    ConstraintAutomaton::from_sequences(strategy, &seqs)
}

impl ConstraintAutomaton {
    /// Builds directly from token sequences (without END). Record indices
    /// refer to positions in `sequences`.
    pub fn from_sequences(strategy: Strategy, sequences: &[TokenSeq]) -> Result<Self> {
        for (i, s) in sequences.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Config(format!("sequence {i} is empty")));
            }
            if let Some(&t) = s.iter().find(|&&t| t == SEP || t == END) {
                return Err(Error::Config(format!("sequence {i} contains reserved token {t}")));
            }
        }
        Ok(match strategy {
            Strategy::Trie => ConstraintAutomaton::Trie(PrefixTrie::new(sequences)),
            Strategy::FmIndex => ConstraintAutomaton::Fm(FmConstraint::new(sequences)),
            Strategy::TermSet => ConstraintAutomaton::TermSet(TermSetConstraint::new(sequences)),
        })
    }

    pub fn strategy(&self) -> Strategy {
        match self {
            ConstraintAutomaton::Trie(_) => Strategy::Trie,
            ConstraintAutomaton::Fm(_) => Strategy::FmIndex,
            ConstraintAutomaton::TermSet(_) => Strategy::TermSet,
        }
    }

    /// Length of the longest accepted sequence (without END).
    pub fn longest(&self) -> usize {
        match self {
            ConstraintAutomaton::Trie(a) => a.longest(),
            ConstraintAutomaton::Fm(a) => a.longest(),
            ConstraintAutomaton::TermSet(a) => a.longest(),
        }
    }

    /// Convenience: walk `tokens` from the start state.
    pub fn walk(&self, tokens: &[Token]) -> Result<AutomatonState> {
        tokens.iter().try_fold(self.start(), |s, &t| self.step(&s, t))
    }

    /// Whether `tokens` (without END) is an accepted sequence.
    pub fn accepts(&self, tokens: &[Token]) -> bool {
        self.walk(tokens)
            .and_then(|s| self.allowed(&s))
            .map(|a| a.end)
            .unwrap_or(false)
    }
}

fn mismatch() -> Error {
    Error::InvalidState("state belongs to a different strategy".into())
}

impl Constraint for ConstraintAutomaton {
    type State = AutomatonState;

    fn start(&self) -> AutomatonState {
        match self {
            ConstraintAutomaton::Trie(a) => AutomatonState::Trie(a.start()),
            ConstraintAutomaton::Fm(a) => AutomatonState::Fm(a.start()),
            ConstraintAutomaton::TermSet(a) => AutomatonState::TermSet(a.start()),
        }
    }

    fn allowed(&self, s: &AutomatonState) -> Result<Allowed> {
        match (self, s) {
            (ConstraintAutomaton::Trie(a), AutomatonState::Trie(s)) => a.allowed(s),
            (ConstraintAutomaton::Fm(a), AutomatonState::Fm(s)) => a.allowed(s),
            (ConstraintAutomaton::TermSet(a), AutomatonState::TermSet(s)) => a.allowed(s),
            _ => Err(mismatch()),
        }
    }

    fn step(&self, s: &AutomatonState, token: Token) -> Result<AutomatonState> {
        match (self, s) {
            (ConstraintAutomaton::Trie(a), AutomatonState::Trie(s)) => a.step(s, token).map(AutomatonState::Trie),
            (ConstraintAutomaton::Fm(a), AutomatonState::Fm(s)) => a.step(s, token).map(AutomatonState::Fm),
            (ConstraintAutomaton::TermSet(a), AutomatonState::TermSet(s)) => {
                a.step(s, token).map(AutomatonState::TermSet)
            }
            _ => Err(mismatch()),
        }
    }

    fn complete(&self, s: &AutomatonState) -> Result<Vec<usize>> {
        match (self, s) {
            (ConstraintAutomaton::Trie(a), AutomatonState::Trie(s)) => a.complete(s),
            (ConstraintAutomaton::Fm(a), AutomatonState::Fm(s)) => a.complete(s),
            (ConstraintAutomaton::TermSet(a), AutomatonState::TermSet(s)) => a.complete(s),
            _ => Err(mismatch()),
        }
    }
}

/// Every accepted sequence reachable within `max_len` tokens, in DFS order
/// (ascending token ids). Meant for tests and small indexes.
pub fn enumerate_accepted(a: &ConstraintAutomaton, max_len: usize) -> Result<Vec<TokenSeq>> {
    fn go(
        a: &ConstraintAutomaton,
        s: &AutomatonState,
        prefix: &mut TokenSeq,
        max_len: usize,
        out: &mut Vec<TokenSeq>,
    ) -> Result<()> {
        let allowed = a.allowed(s)?;
        if allowed.end {
            out.push(prefix.clone());
        }
        if prefix.len() == max_len {
            return Ok(());
        }
        for &t in &allowed.tokens {
            let next = a.step(s, t)?;
            prefix.push(t);
            go(a, &next, prefix, max_len, out)?;
            prefix.pop();
        }
        Ok(())
    }
    let mut out = Vec::new();
    go(a, &a.start(), &mut Vec::new(), max_len, &mut out)?;
    Ok(out)
}
