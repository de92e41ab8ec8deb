use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Allowed, Constraint};
use crate::corpus::{Token, TokenSeq};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: BTreeMap<Token, usize>,
    terminal: Vec<usize>,
}

/// Prefix trie over docid token sequences. Accepts exactly the record
/// sequences.
#[derive(Debug, Clone)]
pub struct PrefixTrie {
    nodes: Vec<TrieNode>,
    longest: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrieState(pub usize);

impl PrefixTrie {
    pub fn new(sequences: &[TokenSeq]) -> Self {
        let mut nodes = vec![TrieNode::default()];
        for (record, seq) in sequences.iter().enumerate() {
            let mut at = 0;
            for &t in seq {
                at = match nodes[at].children.get(&t) {
                    Some(&next) => next,
                    None => {
                        nodes.push(TrieNode::default());
                        let id = nodes.len() - 1;
                        nodes[at].children.insert(t, id);
                        id
                    }
                };
            }
            nodes[at].terminal.push(record);
        }
        let longest = sequences.iter().map(Vec::len).max().unwrap_or(0);
        PrefixTrie { nodes, longest }
    }

    /// Length of the longest accepted sequence.
    pub fn longest(&self) -> usize {
        self.longest
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn node(&self, s: &TrieState) -> Result<&TrieNode> {
        self.nodes
            .get(s.0)
            .ok_or_else(|| Error::InvalidState(format!("trie node {} does not exist", s.0)))
    }
}

impl Constraint for PrefixTrie {
    type State = TrieState;

    fn start(&self) -> TrieState {
        TrieState(0)
    }

    fn allowed(&self, s: &TrieState) -> Result<Allowed> {
        let node = self.node(s)?;
        Ok(Allowed {
            tokens: node.children.keys().copied().collect(),
            end: !node.terminal.is_empty(),
        })
    }

    fn step(&self, s: &TrieState, token: Token) -> Result<TrieState> {
        self.node(s)?
            .children
            .get(&token)
            .map(|&n| TrieState(n))
            .ok_or(Error::IllegalTransition(token))
    }

    fn complete(&self, s: &TrieState) -> Result<Vec<usize>> {
        let node = self.node(s)?;
        if node.terminal.is_empty() {
            return Err(Error::NotTerminal);
        }
        Ok(node.terminal.clone())
    }
}
