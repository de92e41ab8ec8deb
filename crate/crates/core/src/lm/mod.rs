//! Language-model abstraction.
//!
//! Constrained decoding needs the full next-token distribution, which only
//! in-process models provide ([`ScriptedModel`], [`NgramModel`]). The
//! [`RemoteModel`] adapter covers free-form generation over HTTP and exposes
//! distributions only when the endpoint offers them.

mod ngram;
mod remote;
mod scripted;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Token, Tokenizer, Vocabulary, END, SEP, UNK};
use crate::error::{Error, Result};

pub use ngram::NgramModel;
pub use remote::{RemoteConfig, RemoteModel};
pub use scripted::{Pattern, Response, ScriptedModel, ScriptedRule};

/// Log-probability given to masked or impossible tokens.
pub const FLOOR_LOGPROB: f64 = -1e9;

/// Full-vocabulary next-token distribution, stored densely by token id.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    logprobs: Vec<f64>,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl TokenDistribution {
    pub fn uniform(vocab_size: usize) -> Self {
        TokenDistribution {
            logprobs: vec![-(vocab_size as f64).ln(); vocab_size],
        }
    }

    /// Normalizes non-negative weights; zero-weight tokens get the floor.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Config(
                "distribution weights must be non-negative with a positive sum".into(),
            ));
        }
        Ok(TokenDistribution {
            logprobs: weights
                .iter()
                .map(|&w| if w > 0.0 { (w / total).ln() } else { FLOOR_LOGPROB })
                .collect(),
        })
    }

    /// Log-softmax of `logits`; non-finite logits are treated as masked.
    pub fn from_logits(logits: &[f64]) -> Self {
        let finite = logits.iter().copied().filter(|x| x.is_finite());
        let lse = log_sum_exp(finite);
        TokenDistribution {
            logprobs: logits
                .iter()
                .map(|&x| {
                    if x.is_finite() {
                        (x - lse).max(FLOOR_LOGPROB)
                    } else {
                        FLOOR_LOGPROB
                    }
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.logprobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logprobs.is_empty()
    }

    pub fn logprob(&self, token: Token) -> f64 {
        self.logprobs.get(token as usize).copied().unwrap_or(FLOOR_LOGPROB)
    }

    pub fn logprobs(&self) -> &[f64] {
        &self.logprobs
    }

    /// Sum of probabilities; 1 up to rounding.
    pub fn total_mass(&self) -> f64 {
        self.logprobs.iter().map(|lp| lp.exp()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_tokens: usize,
    #[serde(default)]
    pub stop: Vec<String>,
    /// 0 means greedy.
    #[serde(default)]
    pub temperature: f64,
    #[serde(default, skip_serializing)]
    pub seed: u64,
}

impl GenerationRequest {
    pub fn greedy(prompt: impl Into<String>, max_tokens: usize) -> Self {
        GenerationRequest {
            prompt: prompt.into(),
            max_tokens,
            stop: Vec::new(),
            temperature: 0.0,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

pub trait LanguageModel: Send + Sync {
    fn name(&self) -> &str;

    /// Whether [`LanguageModel::next_token_distribution`] can succeed.
    fn supports_distributions(&self) -> bool;

    fn next_token_distribution(&self, ctx: &[Token]) -> Result<TokenDistribution>;

    fn generate(&self, req: &GenerationRequest) -> Result<String>;

    /// Sum of stepwise log-probabilities of `target` after `prompt`.
    /// `target` must end with END.
    fn sequence_logprob(&self, prompt: &[Token], target: &[Token]) -> Result<f64> {
        if target.last() != Some(&END) {
            return Err(Error::MissingEnd);
        }
        let mut ctx = prompt.to_vec();
        let mut total = 0.0;
        for &t in target {
            total += self.next_token_distribution(&ctx)?.logprob(t);
            ctx.push(t);
        }
        Ok(total)
    }
}

/// Cuts `text` at the earliest occurrence of any stop string.
pub(crate) fn apply_stops(text: &str, stops: &[String]) -> (String, bool) {
    let cut = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min();
    match cut {
        Some(i) => (text[..i].to_string(), true),
        None => (text.to_string(), false),
    }
}

/// Token-by-token generation for models that expose distributions.
///
/// Greedy picks the most likely token (lowest id on ties); with a positive
/// temperature the token is sampled from a seeded generator. SEP and UNK
/// are never emitted.
pub(crate) fn generate_stepwise(
    model: &dyn LanguageModel,
    vocab: &Vocabulary,
    tokenizer: &Tokenizer,
    req: &GenerationRequest,
) -> Result<String> {
    req.validate()?;
    let mut ctx = tokenizer.encode_lenient(vocab, &req.prompt);
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mut words: Vec<&str> = Vec::new();
    for _ in 0..req.max_tokens {
        let dist = model.next_token_distribution(&ctx)?;
        let eligible = |t: usize| t as Token != SEP && t as Token != UNK;
        let next = if req.temperature > 0.0 {
            let weights: Vec<f64> = dist
                .logprobs()
                .iter()
                .enumerate()
                .map(|(t, lp)| if eligible(t) { (lp / req.temperature).exp() } else { 0.0 })
                .collect();
            let sampler =
                WeightedIndex::new(&weights).map_err(|e| Error::ModelFailure(format!("sampling failed: {e}")))?;
            sampler.sample(&mut rng) as Token
        } else {
            let mut best = END;
            let mut best_lp = f64::NEG_INFINITY;
            for (t, &lp) in dist.logprobs().iter().enumerate() {
                if eligible(t) && lp > best_lp {
                    best = t as Token;
                    best_lp = lp;
                }
            }
            best
        };
        if next == END {
            break;
        }
        words.push(vocab.surface(next).unwrap_or("<unk>"));
        ctx.push(next);
        let (_, stopped) = apply_stops(&words.join(" "), &req.stop);
        if stopped {
            break;
        }
    }
    Ok(apply_stops(&words.join(" "), &req.stop).0)
}
