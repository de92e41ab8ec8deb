use std::hash::Hasher;

use fnv::FnvHasher;

use crate::corpus::{content_words, Document, Tokenizer};
use crate::error::{Error, Result};

pub type Embedding = Vec<f64>;

pub const DEFAULT_DIM: usize = 64;

/// Hashed bag-of-words embedding, L2-normalized.
///
/// Content words of the title and body are hashed into `dim` buckets with
/// a seeded FNV-1a hash; bucket values are raw counts. Entries are
/// non-negative, so the vector is zero only for documents with no words.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Embedder {
    pub dim: usize,
    pub seed: u64,
    pub tokenizer: Tokenizer,
}

impl Embedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config(format!("embedding dimension must be >= 2, got {dim}")));
        }
        Ok(Embedder {
            dim,
            seed,
            tokenizer: Tokenizer::default(),
        })
    }

    fn bucket(&self, word: &str) -> usize {
        let mut h = FnvHasher::default();
        h.write(&self.seed.to_le_bytes());
        h.write(word.as_bytes());
        (h.finish() % self.dim as u64) as usize
    }

    pub fn embed(&self, doc: &Document) -> Result<Embedding> {
        let mut text = String::new();
        if let Some(title) = &doc.title {
            text.push_str(title);
            text.push(' ');
        }
        text.push_str(&doc.text);

        let mut words = content_words(&self.tokenizer, &text);
        if words.is_empty() {
            // all-stopword documents still embed on their raw words
            words = self
                .tokenizer
                .words(&text)
                .into_iter()
                .filter(|w| w.chars().all(char::is_alphanumeric))
                .collect();
        }
        if words.is_empty() {
            return Err(Error::EmptyDocument(doc.doc_key.clone()));
        }

        let mut v = vec![0.0; self.dim];
        for w in &words {
            v[self.bucket(w)] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

pub fn embed_document(doc: &Document, dim: usize) -> Result<Embedding> {
    Embedder::new(dim, 0)?.embed(doc)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}
