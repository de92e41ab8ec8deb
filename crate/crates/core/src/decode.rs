//! Constrained beam search and ranking of decoded docids.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::constraint::{AutomatonState, Constraint, ConstraintAutomaton};
use crate::corpus::{Token, TokenSeq, END};
use crate::docid::{DocIdIndex, DocIdRecord};
use crate::error::{Error, Result};
use crate::lm::LanguageModel;

pub const DEFAULT_BEAM_WIDTH: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_width: usize,
    /// Maximum hypothesis length including END. `None` uses the longest
    /// accepted sequence plus one.
    pub max_len: Option<usize>,
    pub length_normalize: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_width: DEFAULT_BEAM_WIDTH,
            max_len: None,
            length_normalize: false,
        }
    }
}

impl BeamConfig {
    pub fn with_width(beam_width: usize) -> Self {
        BeamConfig {
            beam_width,
            ..Self::default()
        }
    }
}

/// A finished hypothesis. `tokens` ends with END.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: TokenSeq,
    pub score: f64,
    /// Indices of the records this sequence resolves to.
    pub records: Vec<usize>,
}

/// Higher score first, then ascending token sequence.
fn rank_order(a_score: f64, a_tokens: &[Token], b_score: f64, b_tokens: &[Token]) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_tokens.cmp(b_tokens))
}

struct Live {
    tokens: TokenSeq,
    state: AutomatonState,
    score: f64,
}

/// Beam search where each step only expands tokens the automaton allows.
///
/// Scores are raw sums of the model's log-probabilities; disallowed mass is
/// simply never taken, so no renormalization happens. Finished hypotheses
/// are pooled apart from the live beam. The result holds at most
/// `beam_width` hypotheses, best first.
pub fn constrained_beam_search(
    model: &dyn LanguageModel,
    prompt: &[Token],
    automaton: &ConstraintAutomaton,
    cfg: &BeamConfig,
) -> Result<Vec<Hypothesis>> {
    if cfg.beam_width == 0 {
        return Err(Error::Config("beam width must be >= 1".into()));
    }
    if !model.supports_distributions() {
        return Err(Error::NotSupported(format!(
            "{} (constrained decoding needs next-token distributions)",
            model.name()
        )));
    }
    let k = cfg.beam_width;
    let max_len = cfg.max_len.unwrap_or(automaton.longest() + 1);
    let start = automaton.start();
    if automaton.allowed(&start)?.is_empty() {
        return Err(Error::NoValidPath);
    }

    let final_score = |score: f64, len: usize| {
        if cfg.length_normalize {
            score / len as f64
        } else {
            score
        }
    };

    let mut live = vec![Live {
        tokens: Vec::new(),
        state: start,
        score: 0.0,
    }];
    let mut finished: Vec<(TokenSeq, AutomatonState, f64)> = Vec::new();
    let mut ctx = prompt.to_vec();

    while !live.is_empty() {
        let mut children: Vec<Live> = Vec::new();
        for beam in &live {
            let allowed = automaton.allowed(&beam.state)?;
            let room = beam.tokens.len() + 1 < max_len;
            if !allowed.end && (!room || allowed.tokens.is_empty()) {
                continue;
            }
            ctx.truncate(prompt.len());
            ctx.extend_from_slice(&beam.tokens);
            let dist = model.next_token_distribution(&ctx)?;
            if allowed.end && beam.tokens.len() < max_len {
                let mut tokens = beam.tokens.clone();
                tokens.push(END);
                finished.push((tokens, beam.state.clone(), beam.score + dist.logprob(END)));
            }
            if !room {
                continue;
            }
            for &t in &allowed.tokens {
                let mut tokens = beam.tokens.clone();
                tokens.push(t);
                children.push(Live {
                    state: automaton.step(&beam.state, t)?,
                    score: beam.score + dist.logprob(t),
                    tokens,
                });
            }
        }
        children.sort_by(|a, b| rank_order(a.score, &a.tokens, b.score, &b.tokens));
        children.truncate(k);
        live = children;

        // Log-probabilities never increase a score, so once the best live
        // beam cannot reach the k-th finished score it never will.
        if !cfg.length_normalize && finished.len() >= k {
            if let Some(best_live) = live.first() {
                let mut scores: Vec<f64> = finished.iter().map(|f| f.2).collect();
                scores.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
                if best_live.score < scores[k - 1] {
                    break;
                }
            }
        }
    }

    let mut out: Vec<Hypothesis> = finished
        .into_iter()
        .map(|(tokens, state, score)| {
            let score = final_score(score, tokens.len());
            Ok(Hypothesis {
                records: automaton.complete(&state)?,
                tokens,
                score,
            })
        })
        .collect::<Result<_>>()?;
    out.sort_by(|a, b| rank_order(a.score, &a.tokens, b.score, &b.tokens));
    out.truncate(k);
    if out.is_empty() {
        return Err(Error::NoValidPath);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub record: DocIdRecord,
    pub score: f64,
    pub doc_key: String,
}

impl Candidate {
    pub fn new(record: DocIdRecord, score: f64) -> Self {
        Candidate {
            doc_key: record.doc_key.clone(),
            record,
            score,
        }
    }

    pub fn surface(&self) -> &str {
        &self.record.surface
    }
}

/// Candidates best first, at most one per document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub candidates: Vec<Candidate>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn doc_keys(&self) -> Vec<&str> {
        self.candidates.iter().map(|c| c.doc_key.as_str()).collect()
    }

    pub fn top(&self, n: usize) -> &[Candidate] {
        &self.candidates[..n.min(self.candidates.len())]
    }

    pub fn truncate(&mut self, k: usize) {
        self.candidates.truncate(k);
    }
}

fn by_score_then_surface(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.record.surface.cmp(&b.record.surface))
        .then_with(|| a.doc_key.cmp(&b.doc_key))
}

/// Expands hypotheses into one candidate per resolved record.
pub fn candidates(index: &DocIdIndex, hyps: &[Hypothesis]) -> Vec<Candidate> {
    hyps.iter()
        .flat_map(|h| {
            h.records
                .iter()
                .map(move |&r| Candidate::new(index.record(r).clone(), h.score))
        })
        .collect()
}

/// Keeps the best candidate per document, best first, at most `k`.
pub fn dedup_rank(mut cands: Vec<Candidate>, k: usize) -> RankedList {
    cands.sort_by(by_score_then_surface);
    let mut seen = std::collections::HashSet::new();
    let mut out: Vec<Candidate> = cands.into_iter().filter(|c| seen.insert(c.doc_key.clone())).collect();
    out.truncate(k);
    RankedList { candidates: out }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Cross-view merge: each document scores `log Σ exp(score)` over the
/// distinct hypotheses that resolve to it. The document is represented by
/// its best record. Ties go to the smaller doc key.
pub fn merge_views(index: &DocIdIndex, hyps: &[Hypothesis]) -> RankedList {
    let mut per_doc: BTreeMap<&str, (Vec<f64>, Option<Candidate>)> = BTreeMap::new();
    for h in hyps {
        let mut docs_here: Vec<&str> = Vec::new();
        for &r in &h.records {
            let rec = index.record(r);
            let entry = per_doc.entry(rec.doc_key.as_str()).or_default();
            if !docs_here.contains(&rec.doc_key.as_str()) {
                docs_here.push(rec.doc_key.as_str());
                entry.0.push(h.score);
            }
            let cand = Candidate::new(rec.clone(), h.score);
            let better = match &entry.1 {
                None => true,
                Some(best) => by_score_then_surface(&cand, best) == Ordering::Less,
            };
            if better {
                entry.1 = Some(cand);
            }
        }
    }
    let mut out: Vec<Candidate> = per_doc
        .into_values()
        .filter_map(|(scores, best)| {
            best.map(|mut c| {
                c.score = log_sum_exp(&scores);
                c
            })
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.doc_key.cmp(&b.doc_key))
    });
    RankedList { candidates: out }
}

/// Ranks decoded hypotheses: a multi-view index merges views, a single-view
/// index keeps the best hypothesis per document.
pub fn rank_hypotheses(index: &DocIdIndex, hyps: &[Hypothesis], k: usize) -> RankedList {
    if index.is_multi_view() {
        let mut merged = merge_views(index, hyps);
        merged.truncate(k);
        merged
    } else {
        dedup_rank(candidates(index, hyps), k)
    }
}
