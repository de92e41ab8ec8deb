use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{apply_stops, GenerationRequest, LanguageModel, TokenDistribution};
use crate::corpus::{Token, TokenSeq, Tokenizer, Vocabulary};
use crate::error::{Error, Result};

/// How a rule selects a prompt (for generation) or a token context (for
/// distributions). Token contexts are compared against the leniently
/// tokenized pattern text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Exact(String),
    Prefix(String),
    Suffix(String),
    Contains(String),
}

impl Pattern {
    fn matches_text(&self, text: &str) -> bool {
        match self {
            Pattern::Exact(p) => text == p,
            Pattern::Prefix(p) => text.starts_with(p.as_str()),
            Pattern::Suffix(p) => text.ends_with(p.as_str()),
            Pattern::Contains(p) => text.contains(p.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Response {
    Text {
        text: String,
    },
    /// Token surface -> probability; weights are renormalized and unlisted
    /// tokens get the floor. `<end>` names END.
    Distribution {
        distribution: BTreeMap<String, f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedRule {
    #[serde(rename = "match")]
    pub pattern: Pattern,
    #[serde(flatten)]
    pub response: Response,
}

impl ScriptedRule {
    pub fn text(pattern: Pattern, text: impl Into<String>) -> Self {
        ScriptedRule {
            pattern,
            response: Response::Text { text: text.into() },
        }
    }

    pub fn distribution<I, S>(pattern: Pattern, probs: I) -> Self
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        ScriptedRule {
            pattern,
            response: Response::Distribution {
                distribution: probs.into_iter().map(|(k, v)| (k.into(), v)).collect(),
            },
        }
    }
}

enum TokenPattern {
    Exact,
    Prefix(TokenSeq),
    Suffix(TokenSeq),
    Contains(TokenSeq),
}

impl TokenPattern {
    fn matches(&self, ctx: &[Token]) -> bool {
        match self {
            TokenPattern::Exact => false,
            TokenPattern::Prefix(p) => ctx.starts_with(p),
            TokenPattern::Suffix(p) => ctx.ends_with(p),
            TokenPattern::Contains(p) => p.is_empty() || ctx.windows(p.len()).any(|w| w == p.as_slice()),
        }
    }
}

/// Test double that answers from a fixed, first-match rule list.
///
/// Unmatched generation returns the empty string; unmatched contexts get
/// the uniform distribution. Every `generate` call is counted and its
/// prompt recorded.
pub struct ScriptedModel {
    name: String,
    vocab: Arc<Vocabulary>,
    tokenizer: Tokenizer,
    text_rules: Vec<(Pattern, String)>,
    dist_rules: Vec<(usize, TokenPattern, Arc<TokenDistribution>)>,
    exact_dist: HashMap<TokenSeq, usize>,
    calls: AtomicUsize,
    prompts: Mutex<Vec<String>>,
}

impl ScriptedModel {
    pub fn new(rules: Vec<ScriptedRule>, vocab: Arc<Vocabulary>, tokenizer: Tokenizer) -> Result<Self> {
        let mut model = ScriptedModel {
            name: "scripted".into(),
            vocab,
            tokenizer,
            text_rules: Vec::new(),
            dist_rules: Vec::new(),
            exact_dist: HashMap::new(),
            calls: AtomicUsize::new(0),
            prompts: Mutex::new(Vec::new()),
        };
        for rule in rules {
            match rule.response {
                Response::Text { text } => model.text_rules.push((rule.pattern, text)),
                Response::Distribution { distribution } => {
                    let dist = Arc::new(model.resolve(&distribution)?);
                    let order = model.dist_rules.len();
                    let encode = |s: &str| model.tokenizer.encode_lenient(&model.vocab, s);
                    let tp = match &rule.pattern {
                        Pattern::Exact(p) => {
                            model.exact_dist.entry(encode(p)).or_insert(order);
                            TokenPattern::Exact
                        }
                        Pattern::Prefix(p) => TokenPattern::Prefix(encode(p)),
                        Pattern::Suffix(p) => TokenPattern::Suffix(encode(p)),
                        Pattern::Contains(p) => TokenPattern::Contains(encode(p)),
                    };
                    model.dist_rules.push((order, tp, dist));
                }
            }
        }
        Ok(model)
    }

    /// Exact-context rules keyed by token ids rather than text.
    pub fn with_exact_contexts(
        mut self,
        entries: impl IntoIterator<Item = (TokenSeq, TokenDistribution)>,
    ) -> Result<Self> {
        for (ctx, dist) in entries {
            if dist.len() != self.vocab.len() {
                return Err(Error::Config(format!(
                    "distribution has {} entries, vocabulary has {}",
                    dist.len(),
                    self.vocab.len()
                )));
            }
            let order = self.dist_rules.len();
            self.exact_dist.entry(ctx).or_insert(order);
            self.dist_rules.push((order, TokenPattern::Exact, Arc::new(dist)));
        }
        Ok(self)
    }

    pub fn from_json(json: &str, vocab: Arc<Vocabulary>, tokenizer: Tokenizer) -> Result<Self> {
        let rules: Vec<ScriptedRule> = serde_json::from_str(json)?;
        Self::new(rules, vocab, tokenizer)
    }

    pub fn load(path: impl AsRef<Path>, vocab: Arc<Vocabulary>, tokenizer: Tokenizer) -> Result<Self> {
        let path = path.as_ref();
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&json, vocab, tokenizer)
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    fn resolve(&self, probs: &BTreeMap<String, f64>) -> Result<TokenDistribution> {
        let mut weights = vec![0.0; self.vocab.len()];
        for (surface, &p) in probs {
            let id = self
                .vocab
                .id(surface)
                .ok_or_else(|| Error::Config(format!("scripted distribution names unknown token {surface:?}")))?;
            weights[id as usize] += p;
        }
        TokenDistribution::from_weights(&weights)
    }

    /// Number of `generate` calls so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Prompts of all `generate` calls, in call order.
    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().expect("prompt log").clone()
    }

    pub fn reset_log(&self) {
        self.calls.store(0, Ordering::SeqCst);
        self.prompts.lock().expect("prompt log").clear();
    }
}

/// Whitespace-piece truncation that keeps the original spacing.
fn first_pieces(text: &str, n: usize) -> &str {
    let mut seen = 0;
    let mut in_piece = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_piece {
                seen += 1;
                in_piece = false;
                if seen == n {
                    return &text[..i];
                }
            }
        } else {
            in_piece = true;
        }
    }
    text
}

impl LanguageModel for ScriptedModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn supports_distributions(&self) -> bool {
        true
    }

    fn next_token_distribution(&self, ctx: &[Token]) -> Result<TokenDistribution> {
        if let Some(&bad) = ctx.iter().find(|&&t| !self.vocab.contains(t)) {
            return Err(Error::UnknownToken(bad));
        }
        let exact = self.exact_dist.get(ctx).copied();
        let limit = exact.unwrap_or(usize::MAX);
        let hit = self
            .dist_rules
            .iter()
            .take_while(|(order, _, _)| *order < limit)
            .find(|(_, p, _)| p.matches(ctx))
            .map(|(order, _, _)| *order)
            .or(exact);
        Ok(match hit {
            Some(order) => (*self.dist_rules[order].2).clone(),
            None => TokenDistribution::uniform(self.vocab.len()),
        })
    }

    fn generate(&self, req: &GenerationRequest) -> Result<String> {
        req.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.prompts.lock().expect("prompt log").push(req.prompt.clone());
        let text = self
            .text_rules
            .iter()
            .find(|(p, _)| p.matches_text(&req.prompt))
            .map(|(_, t)| t.as_str())
            .unwrap_or("");
        let (text, _) = apply_stops(text, &req.stop);
        Ok(first_pieces(&text, req.max_tokens).to_string())
    }
}
