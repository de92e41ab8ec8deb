use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Allowed, Constraint};
use crate::corpus::{Token, TokenSeq};
use crate::error::{Error, Result};

type Multiset = BTreeMap<Token, u32>;

fn multiset(seq: &[Token]) -> Multiset {
    let mut m = Multiset::new();
    for &t in seq {
        *m.entry(t).or_default() += 1;
    }
    m
}

/// Order-free term constraint: a sequence is accepted iff its token
/// multiset equals some record's multiset.
#[derive(Debug, Clone)]
pub struct TermSetConstraint {
    terms: Vec<Multiset>,
    postings: BTreeMap<Token, Vec<usize>>,
    longest: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TermState {
    pub generated: Multiset,
    /// Records whose multiset still contains `generated`, ascending.
    pub live: Vec<usize>,
}

impl TermSetConstraint {
    pub fn new(sequences: &[TokenSeq]) -> Self {
        let terms: Vec<Multiset> = sequences.iter().map(|s| multiset(s)).collect();
        let mut postings: BTreeMap<Token, Vec<usize>> = BTreeMap::new();
        for (r, m) in terms.iter().enumerate() {
            for &t in m.keys() {
                postings.entry(t).or_default().push(r);
            }
        }
        let longest = sequences.iter().map(Vec::len).max().unwrap_or(0);
        TermSetConstraint {
            terms,
            postings,
            longest,
        }
    }

    pub fn longest(&self) -> usize {
        self.longest
    }

    pub fn postings(&self, token: Token) -> &[usize] {
        self.postings.get(&token).map(Vec::as_slice).unwrap_or(&[])
    }

    fn check(&self, s: &TermState) -> Result<()> {
        if s.live.iter().any(|&r| r >= self.terms.len()) {
            return Err(Error::InvalidState("live record out of range".into()));
        }
        if !s.generated.is_empty() && s.live.is_empty() {
            return Err(Error::InvalidState("no live candidates".into()));
        }
        Ok(())
    }
}

fn count(m: &Multiset, t: Token) -> u32 {
    m.get(&t).copied().unwrap_or(0)
}

impl Constraint for TermSetConstraint {
    type State = TermState;

    fn start(&self) -> TermState {
        TermState {
            generated: Multiset::new(),
            live: (0..self.terms.len()).collect(),
        }
    }

    fn allowed(&self, s: &TermState) -> Result<Allowed> {
        self.check(s)?;
        let mut tokens = BTreeSet::new();
        let mut end = false;
        for &r in &s.live {
            let m = &self.terms[r];
            if !s.generated.is_empty() && *m == s.generated {
                end = true;
            }
            for (&t, &c) in m {
                if c > count(&s.generated, t) {
                    tokens.insert(t);
                }
            }
        }
        Ok(Allowed {
            tokens: tokens.into_iter().collect(),
            end,
        })
    }

    fn step(&self, s: &TermState, token: Token) -> Result<TermState> {
        self.check(s)?;
        let mut generated = s.generated.clone();
        let need = {
            let c = generated.entry(token).or_default();
            *c += 1;
            *c
        };
        let posting = self.postings(token);
        let live: Vec<usize> = s
            .live
            .iter()
            .copied()
            .filter(|r| posting.binary_search(r).is_ok() && count(&self.terms[*r], token) >= need)
            .collect();
        if live.is_empty() {
            return Err(Error::IllegalTransition(token));
        }
        Ok(TermState { generated, live })
    }

    fn complete(&self, s: &TermState) -> Result<Vec<usize>> {
        self.check(s)?;
        let done: Vec<usize> = s
            .live
            .iter()
            .copied()
            .filter(|&r| !s.generated.is_empty() && self.terms[r] == s.generated)
            .collect();
        if done.is_empty() {
            return Err(Error::NotTerminal);
        }
        Ok(done)
    }
}
