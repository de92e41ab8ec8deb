//! FM-index over the SEP-joined docid text.
//!
//! The index is built over the *reversed* text, so one backward-search step
//! extends a forward pattern by one token on the right. That is exactly
//! what left-to-right decoding needs: the suffix-array interval of the
//! emitted window is the automaton state.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Allowed, Constraint};
use crate::corpus::{Token, TokenSeq, SEP};
use crate::error::{Error, Result};

type Symbol = u32;
const SENTINEL: Symbol = 0;

fn symbol(t: Token) -> Symbol {
    t + 1
}

fn token(s: Symbol) -> Token {
    s - 1
}

/// Suffix array by prefix doubling.
fn suffix_array(text: &[Symbol]) -> Vec<usize> {
    let n = text.len();
    let mut sa: Vec<usize> = (0..n).collect();
    let mut rank: Vec<usize> = text.iter().map(|&s| s as usize).collect();
    let mut tmp = vec![0usize; n];
    let mut k = 1;
    loop {
        let key = |i: usize, rank: &[usize]| (rank[i], if i + k < n { rank[i + k] + 1 } else { 0 });
        sa.sort_unstable_by_key(|&a| key(a, &rank));
        tmp[sa[0]] = 0;
        for w in 1..n {
            let bump = key(sa[w - 1], &rank) != key(sa[w], &rank);
            tmp[sa[w]] = tmp[sa[w - 1]] + bump as usize;
        }
        std::mem::swap(&mut rank, &mut tmp);
        if rank[sa[n - 1]] == n - 1 {
            break;
        }
        k *= 2;
    }
    sa
}

/// Half-open suffix-array interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interval {
    pub lo: usize,
    pub hi: usize,
}

impl Interval {
    pub fn len(&self) -> usize {
        self.hi - self.lo
    }

    pub fn is_empty(&self) -> bool {
        self.hi <= self.lo
    }
}

#[derive(Debug, Clone)]
pub struct FmIndex {
    /// Forward text `SEP d1 SEP d2 ... SEP`.
    text: TokenSeq,
    bwt: Vec<Symbol>,
    sa: Vec<usize>,
    /// `less[c]` = number of symbols smaller than `c`.
    less: Vec<usize>,
    /// Sorted BWT positions of each symbol; rank is a binary search.
    positions: Vec<Vec<u32>>,
    /// Record owning each position of the reversed text (`usize::MAX` for SEP).
    record_at: Vec<usize>,
}

impl FmIndex {
    pub fn new(sequences: &[TokenSeq]) -> Self {
        let mut text = vec![SEP];
        let mut owner = vec![usize::MAX];
        for (r, seq) in sequences.iter().enumerate() {
            text.extend_from_slice(seq);
            owner.extend(std::iter::repeat_n(r, seq.len()));
            text.push(SEP);
            owner.push(usize::MAX);
        }
        let mut rev: Vec<Symbol> = text.iter().rev().map(|&t| symbol(t)).collect();
        rev.push(SENTINEL);
        let mut record_at: Vec<usize> = owner.into_iter().rev().collect();
        record_at.push(usize::MAX);

        let n = rev.len();
        let sa = suffix_array(&rev);
        let bwt: Vec<Symbol> = sa.iter().map(|&i| rev[(i + n - 1) % n]).collect();
        let sigma = rev.iter().copied().max().unwrap_or(0) as usize + 1;
        let mut counts = vec![0usize; sigma];
        let mut positions = vec![Vec::new(); sigma];
        for (i, &c) in bwt.iter().enumerate() {
            counts[c as usize] += 1;
            positions[c as usize].push(i as u32);
        }
        let mut less = vec![0usize; sigma + 1];
        for c in 0..sigma {
            less[c + 1] = less[c] + counts[c];
        }
        FmIndex {
            text,
            bwt,
            sa,
            less,
            positions,
            record_at,
        }
    }

    /// The forward SEP-joined text the index was built over.
    pub fn text(&self) -> &[Token] {
        &self.text
    }

    pub fn full(&self) -> Interval {
        Interval {
            lo: 0,
            hi: self.bwt.len(),
        }
    }

    fn occ(&self, c: Symbol, i: usize) -> usize {
        match self.positions.get(c as usize) {
            Some(p) => p.partition_point(|&x| (x as usize) < i),
            None => 0,
        }
    }

    /// Extends the forward pattern of `iv` by `t` on the right.
    pub fn extend(&self, iv: Interval, t: Token) -> Interval {
        let c = symbol(t);
        if c as usize >= self.positions.len() {
            return Interval { lo: 0, hi: 0 };
        }
        let base = self.less[c as usize];
        Interval {
            lo: base + self.occ(c, iv.lo),
            hi: base + self.occ(c, iv.hi),
        }
    }

    pub fn interval(&self, pattern: &[Token]) -> Interval {
        pattern.iter().fold(
            self.full(),
            |iv, &t| {
                if iv.is_empty() {
                    iv
                } else {
                    self.extend(iv, t)
                }
            },
        )
    }

    /// Number of occurrences of `pattern` in the forward text.
    pub fn count(&self, pattern: &[Token]) -> usize {
        self.interval(pattern).len()
    }

    /// Distinct tokens that immediately follow an occurrence of the pattern
    /// whose interval is `iv` (SEP included).
    pub fn followers_of(&self, iv: Interval) -> BTreeSet<Token> {
        if iv.is_empty() {
            return BTreeSet::new();
        }
        let sigma = self.positions.len();
        if iv.len() <= sigma {
            self.bwt[iv.lo..iv.hi]
                .iter()
                .filter(|&&c| c != SENTINEL)
                .map(|&c| token(c))
                .collect()
        } else {
            (1..sigma as Symbol)
                .filter(|&c| self.occ(c, iv.hi) > self.occ(c, iv.lo))
                .map(token)
                .collect()
        }
    }

    pub fn followers(&self, pattern: &[Token]) -> BTreeSet<Token> {
        self.followers_of(self.interval(pattern))
    }

    /// Records ending with the pattern of `iv`.
    fn records_ending(&self, iv: Interval) -> Vec<usize> {
        let with_sep = self.extend(iv, SEP);
        let mut out: Vec<usize> = (with_sep.lo..with_sep.hi)
            .filter_map(|row| self.record_at.get(self.sa[row] + 1).copied())
            .filter(|&r| r != usize::MAX)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FmState {
    pub window: Interval,
    pub len: usize,
}

/// Unanchored window automaton: decoding may start at any docid position;
/// the hypothesis may end wherever the window is followed by SEP, so the
/// accepted language is the set of nonempty docid suffixes.
#[derive(Debug, Clone)]
pub struct FmConstraint {
    index: FmIndex,
    start_tokens: Vec<Token>,
    longest: usize,
}

impl FmConstraint {
    pub fn new(sequences: &[TokenSeq]) -> Self {
        let index = FmIndex::new(sequences);
        let start_tokens = index
            .followers_of(index.full())
            .into_iter()
            .filter(|&t| t != SEP)
            .collect();
        FmConstraint {
            index,
            start_tokens,
            longest: sequences.iter().map(Vec::len).max().unwrap_or(0),
        }
    }

    pub fn longest(&self) -> usize {
        self.longest
    }

    pub fn index(&self) -> &FmIndex {
        &self.index
    }

    fn check(&self, s: &FmState) -> Result<()> {
        let n = self.index.bwt.len();
        if s.window.hi > n || (s.len > 0 && s.window.is_empty()) {
            return Err(Error::InvalidState(format!("window {:?} is not live", s.window)));
        }
        Ok(())
    }
}

impl Constraint for FmConstraint {
    type State = FmState;

    fn start(&self) -> FmState {
        FmState {
            window: self.index.full(),
            len: 0,
        }
    }

    fn allowed(&self, s: &FmState) -> Result<Allowed> {
        self.check(s)?;
        if s.len == 0 {
            return Ok(Allowed {
                tokens: self.start_tokens.clone(),
                end: false,
            });
        }
        let followers = self.index.followers_of(s.window);
        Ok(Allowed {
            end: followers.contains(&SEP),
            tokens: followers.into_iter().filter(|&t| t != SEP).collect(),
        })
    }

    fn step(&self, s: &FmState, token: Token) -> Result<FmState> {
        self.check(s)?;
        if token == SEP {
            return Err(Error::IllegalTransition(token));
        }
        let window = self.index.extend(s.window, token);
        if window.is_empty() {
            return Err(Error::IllegalTransition(token));
        }
        Ok(FmState { window, len: s.len + 1 })
    }

    fn complete(&self, s: &FmState) -> Result<Vec<usize>> {
        self.check(s)?;
        if s.len == 0 {
            return Err(Error::NotTerminal);
        }
        let records = self.index.records_ending(s.window);
        if records.is_empty() {
            return Err(Error::NotTerminal);
        }
        Ok(records)
    }
}
