use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{generate_stepwise, GenerationRequest, LanguageModel, TokenDistribution};
use crate::corpus::{Token, Tokenizer, Vocabulary, SEP};
use crate::error::{Error, Result};

/// Padding symbol used before the first real token.
const PAD: Token = SEP;

/// Trigram model with add-one smoothing over the full vocabulary:
/// `P(w | u v) = (c(u v w) + 1) / (c(u v) + |V|)`.
#[derive(Debug, Clone)]
pub struct NgramModel {
    vocab: Arc<Vocabulary>,
    tokenizer: Tokenizer,
    counts: HashMap<(Token, Token), HashMap<Token, u64>>,
    totals: HashMap<(Token, Token), u64>,
}

#[derive(Serialize, Deserialize)]
struct NgramFile {
    kind: String,
    order: usize,
    vocab_size: usize,
    /// `[u, v, w, count]`, sorted.
    counts: Vec<[u64; 4]>,
}

impl NgramModel {
    pub const ORDER: usize = 3;

    pub fn new(vocab: Arc<Vocabulary>, tokenizer: Tokenizer) -> Self {
        NgramModel {
            vocab,
            tokenizer,
            counts: HashMap::new(),
            totals: HashMap::new(),
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn history(ctx: &[Token]) -> (Token, Token) {
        match ctx {
            [] => (PAD, PAD),
            [v] => (PAD, *v),
            [.., u, v] => (*u, *v),
        }
    }

    /// Counts every trigram of `prompt + target` (left-padded).
    pub fn train(&mut self, prompt: &[Token], target: &[Token]) -> Result<()> {
        let mut seq = vec![PAD, PAD];
        seq.extend_from_slice(prompt);
        seq.extend_from_slice(target);
        if let Some(&bad) = seq.iter().find(|&&t| !self.vocab.contains(t)) {
            return Err(Error::UnknownToken(bad));
        }
        for w in seq.windows(3) {
            *self.counts.entry((w[0], w[1])).or_default().entry(w[2]).or_default() += 1;
            *self.totals.entry((w[0], w[1])).or_default() += 1;
        }
        Ok(())
    }

    pub fn train_pairs<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a [Token], &'a [Token])>) -> Result<()> {
        for (prompt, target) in pairs {
            self.train(prompt, target)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut counts: Vec<[u64; 4]> = self
            .counts
            .iter()
            .flat_map(|(&(u, v), next)| next.iter().map(move |(&w, &c)| [u as u64, v as u64, w as u64, c]))
            .collect();
        counts.sort_unstable();
        Ok(serde_json::to_string(&NgramFile {
            kind: "ngram".into(),
            order: Self::ORDER,
            vocab_size: self.vocab.len(),
            counts,
        })?)
    }

    pub fn from_json(json: &str, vocab: Arc<Vocabulary>, tokenizer: Tokenizer) -> Result<Self> {
        let file: NgramFile = serde_json::from_str(json)?;
        if file.kind != "ngram" || file.order != Self::ORDER {
            return Err(Error::Config(format!(
                "expected an order-{} ngram model file",
                Self::ORDER
            )));
        }
        if file.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "ngram model was trained on a vocabulary of {} tokens, index has {}",
                file.vocab_size,
                vocab.len()
            )));
        }
        let mut model = NgramModel::new(vocab, tokenizer);
        for [u, v, w, c] in file.counts {
            let key = (u as Token, v as Token);
            *model.counts.entry(key).or_default().entry(w as Token).or_default() += c;
            *model.totals.entry(key).or_default() += c;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, vocab: Arc<Vocabulary>, tokenizer: Tokenizer) -> Result<Self> {
        let path = path.as_ref();
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&json, vocab, tokenizer)
    }

    /// Observed continuations of a history, sorted by token id.
    pub fn continuations(&self, ctx: &[Token]) -> BTreeMap<Token, u64> {
        self.counts
            .get(&Self::history(ctx))
            .map(|m| m.iter().map(|(&k, &v)| (k, v)).collect())
            .unwrap_or_default()
    }
}

impl LanguageModel for NgramModel {
    fn name(&self) -> &str {
        "ngram"
    }

    fn supports_distributions(&self) -> bool {
        true
    }

    fn next_token_distribution(&self, ctx: &[Token]) -> Result<TokenDistribution> {
        if let Some(&bad) = ctx.iter().find(|&&t| !self.vocab.contains(t)) {
            return Err(Error::UnknownToken(bad));
        }
        let v = self.vocab.len();
        let hist = Self::history(ctx);
        let total = self.totals.get(&hist).copied().unwrap_or(0) as f64;
        let denom = (total + v as f64).ln();
        let base = -denom;
        let mut logprobs = vec![base; v];
        if let Some(next) = self.counts.get(&hist) {
            for (&w, &c) in next {
                logprobs[w as usize] = (c as f64 + 1.0).ln() - denom;
            }
        }
        Ok(TokenDistribution::from_logits(&logprobs))
    }

    fn generate(&self, req: &GenerationRequest) -> Result<String> {
        generate_stepwise(self, &self.vocab, &self.tokenizer, req)
    }
}
