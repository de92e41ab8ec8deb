//! Standard retrieval, Direct CoT, and the iterative think / retrieve /
//! refine loop.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::constraint::ConstraintAutomaton;
use crate::corpus::Query;
use crate::decode::{constrained_beam_search, rank_hypotheses, BeamConfig, Candidate, RankedList};
use crate::docid::DocIdIndex;
use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::reasoning::{Budgets, PromptRegistry, Reasoner, ReasoningState, ReflectOutcome, RelevanceJudgment, Verdict};

/// The retriever decodes docids under constraints; the reasoner thinks,
/// verifies and reflects. Both may be the same model.
#[derive(Clone, Copy)]
pub struct ModelBundle<'a> {
    pub retriever: &'a dyn LanguageModel,
    pub reasoner: &'a dyn LanguageModel,
}

impl<'a> ModelBundle<'a> {
    pub fn single(model: &'a dyn LanguageModel) -> Self {
        ModelBundle {
            retriever: model,
            reasoner: model,
        }
    }

    pub fn pair(retriever: &'a dyn LanguageModel, reasoner: &'a dyn LanguageModel) -> Self {
        ModelBundle { retriever, reasoner }
    }

    pub fn is_shared(&self) -> bool {
        std::ptr::addr_eq(
            self.retriever as *const dyn LanguageModel,
            self.reasoner as *const dyn LanguageModel,
        )
    }

    pub fn describe(&self) -> ModelNames {
        ModelNames {
            retriever: self.retriever.name().to_string(),
            reasoner: self.reasoner.name().to_string(),
            shared: self.is_shared(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelNames {
    pub retriever: String,
    pub reasoner: String,
    pub shared: bool,
}

/// Everything needed to turn a prompt into a ranked docid list.
#[derive(Clone, Copy)]
pub struct Retrieval<'a> {
    pub index: &'a DocIdIndex,
    pub automaton: &'a ConstraintAutomaton,
    pub prompts: &'a PromptRegistry,
    pub beam: BeamConfig,
    /// Number of documents returned.
    pub k: usize,
    /// Generation budgets for the reasoning calls.
    pub budgets: Budgets,
}

impl<'a> Retrieval<'a> {
    pub fn new(
        index: &'a DocIdIndex,
        automaton: &'a ConstraintAutomaton,
        prompts: &'a PromptRegistry,
        beam: BeamConfig,
    ) -> Self {
        Retrieval {
            index,
            automaton,
            prompts,
            beam,
            k: beam.beam_width,
            budgets: Budgets::default(),
        }
    }

    pub fn reasoner<'m>(&self, model: &'m dyn LanguageModel) -> Reasoner<'m>
    where
        'a: 'm,
    {
        Reasoner {
            budgets: self.budgets,
            ..Reasoner::new(model, self.prompts)
        }
    }

    /// Decodes for `P_r + query + aux`.
    pub fn retrieve(&self, model: &dyn LanguageModel, query: &str, aux: Option<&str>) -> Result<RankedList> {
        let prompt = self.prompts.retrieval_prompt(query, aux);
        let tokens = self.index.tokenizer().encode_lenient(self.index.vocab(), &prompt);
        let hyps = constrained_beam_search(model, &tokens, self.automaton, &self.beam)?;
        Ok(rank_hypotheses(self.index, &hyps, self.k))
    }
}

fn check_query(q: &Query) -> Result<()> {
    if q.text.trim().is_empty() {
        return Err(Error::EmptyQuery);
    }
    Ok(())
}

pub fn run_standard(q: &Query, model: &dyn LanguageModel, retrieval: &Retrieval) -> Result<RankedList> {
    check_query(q)?;
    retrieval.retrieve(model, &q.text, None)
}

/// Free-form reasoning first, then retrieval conditioned on it.
pub fn run_direct_cot(
    q: &Query,
    reasoner: &dyn LanguageModel,
    retriever: &dyn LanguageModel,
    retrieval: &Retrieval,
) -> Result<RankedList> {
    check_query(q)?;
    let dc = retrieval.reasoner(reasoner).direct_cot(q)?;
    retrieval.retrieve(retriever, &q.text, Some(&dc.reasoning))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Retrieve with the explanation and refine only the explanation.
    pub no_context: bool,
    /// Drop the explanation everywhere.
    pub no_explanation: bool,
    /// Skip judging; reflect on the rank-1 candidate every round.
    pub no_verification: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub verify_depth: usize,
    pub round_budget: usize,
    #[serde(default)]
    pub ablation: Ablation,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            verify_depth: 3,
            round_budget: 3,
            ablation: Ablation::default(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.verify_depth == 0 || self.verify_depth > k {
            return Err(Error::Config(format!(
                "verify depth t={} must be within 1..={k}",
                self.verify_depth
            )));
        }
        if self.round_budget == 0 {
            return Err(Error::Config("round budget T must be >= 1".into()));
        }
        if self.ablation.no_context && self.ablation.no_explanation {
            return Err(Error::Config(
                "no_context and no_explanation together leave nothing to retrieve with".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    AllRelevant,
    ParseFailure,
    BudgetExhausted,
}

impl TerminationReason {
    pub const ALL: [TerminationReason; 3] = [
        TerminationReason::AllRelevant,
        TerminationReason::BudgetExhausted,
        TerminationReason::ParseFailure,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TerminationReason::AllRelevant => "all_relevant",
            TerminationReason::ParseFailure => "parse_failure",
            TerminationReason::BudgetExhausted => "budget_exhausted",
        }
    }
}

/// Relevance source for the verification step.
pub trait Judge: Sync {
    fn judge(&self, q: &Query, candidate: &Candidate) -> Result<RelevanceJudgment>;
}

impl Judge for Reasoner<'_> {
    fn judge(&self, q: &Query, candidate: &Candidate) -> Result<RelevanceJudgment> {
        self.verify(q, candidate)
    }
}

/// Ground-truth judge: relevant iff the candidate's document is labelled
/// relevant for the query.
pub struct OracleJudge;

impl Judge for OracleJudge {
    fn judge(&self, q: &Query, candidate: &Candidate) -> Result<RelevanceJudgment> {
        let verdict = if q.relevant_keys.contains(&candidate.doc_key) {
            Verdict::Relevant
        } else {
            Verdict::Irrelevant
        };
        Ok(RelevanceJudgment {
            verdict,
            raw: "oracle".into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceCandidate {
    pub surface: String,
    pub score: f64,
    pub doc: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    #[serde(rename = "c")]
    pub context: String,
    #[serde(rename = "e")]
    pub explanation: String,
    pub topk: Vec<TraceCandidate>,
    pub judgments: Vec<Verdict>,
    /// 1-based rank of the first irrelevant candidate, 0 if none.
    pub j_hat: usize,
    /// Wall-clock time of the round in milliseconds.
    pub ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct R4RResult {
    pub ranked: RankedList,
    pub reason: TerminationReason,
    pub rounds_used: usize,
    pub rounds: Vec<RoundTrace>,
    /// Time spent in the initial think step.
    pub think_ms: f64,
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// The think / retrieve / refine loop.
///
/// Each round retrieves with the current context, verifies ranks 1..t in
/// order up to the first irrelevant one, and reflects on it. The run ends
/// when all checked ranks are relevant, when reflection cannot be parsed,
/// or after `round_budget` rounds; the last round's list is returned.
pub fn run_r4r(q: &Query, models: ModelBundle, retrieval: &Retrieval, cfg: &RefineConfig) -> Result<R4RResult> {
    let reasoner = retrieval.reasoner(models.reasoner);
    run_r4r_judged(q, models, retrieval, cfg, &reasoner)
}

/// As [`run_r4r`], with verification delegated to `judge`.
pub fn run_r4r_judged(
    q: &Query,
    models: ModelBundle,
    retrieval: &Retrieval,
    cfg: &RefineConfig,
    judge: &dyn Judge,
) -> Result<R4RResult> {
    check_query(q)?;
    cfg.validate(retrieval.k)?;
    let ab = cfg.ablation;
    let reasoner = retrieval.reasoner(models.reasoner);

    let t0 = Instant::now();
    let mut state = reasoner.think(q)?;
    if ab.no_explanation {
        state.explanation.clear();
    }
    let think_ms = elapsed_ms(t0);

    let mut rounds = Vec::new();
    for i in 1..=cfg.round_budget {
        let started = Instant::now();
        let aux = if ab.no_context {
            &state.explanation
        } else {
            &state.context
        };
        let ranked = retrieval.retrieve(models.retriever, &q.text, Some(aux))?;

        let mut judgments = Vec::new();
        let mut j_hat = 0;
        if ab.no_verification {
            j_hat = usize::from(!ranked.is_empty());
        } else {
            for (j, cand) in ranked.top(cfg.verify_depth).iter().enumerate() {
                let verdict = judge.judge(q, cand)?.verdict;
                judgments.push(verdict);
                if verdict == Verdict::Irrelevant {
                    j_hat = j + 1;
                    break;
                }
            }
        }
        let mut trace = RoundTrace {
            context: state.context.clone(),
            explanation: state.explanation.clone(),
            topk: ranked
                .candidates
                .iter()
                .map(|c| TraceCandidate {
                    surface: c.record.surface.clone(),
                    score: c.score,
                    doc: c.doc_key.clone(),
                })
                .collect(),
            judgments,
            j_hat,
            ms: 0.0,
        };

        let finish = |reason, mut trace: RoundTrace, mut rounds: Vec<RoundTrace>| -> Result<R4RResult> {
            trace.ms = elapsed_ms(started);
            rounds.push(trace);
            Ok(R4RResult {
                ranked: ranked.clone(),
                reason,
                rounds_used: i,
                rounds,
                think_ms,
            })
        };

        if j_hat == 0 {
            let reason = if ab.no_verification {
                // nothing retrieved, so nothing to reflect on
                TerminationReason::BudgetExhausted
            } else {
                TerminationReason::AllRelevant
            };
            return finish(reason, trace, rounds);
        }

        let failed = &ranked.candidates[j_hat - 1];
        let mut shown = state.clone();
        if ab.no_explanation {
            shown.explanation.clear();
        }
        match reasoner.reflect(q, failed, &shown)? {
            ReflectOutcome::ParseFailed => {
                return finish(TerminationReason::ParseFailure, trace, rounds);
            }
            ReflectOutcome::Refined(next) => {
                state = ReasoningState {
                    round: next.round,
                    context: if ab.no_context {
                        state.context.clone()
                    } else {
                        next.context
                    },
                    explanation: if ab.no_explanation {
                        String::new()
                    } else {
                        next.explanation
                    },
                };
            }
        }
        if i == cfg.round_budget {
            return finish(TerminationReason::BudgetExhausted, trace, rounds);
        }
        trace.ms = elapsed_ms(started);
        rounds.push(trace);
    }
    unreachable!("round_budget >= 1 is validated")
}

/// One JSON line per query run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub qid: String,
    pub reason: TerminationReason,
    pub rounds: usize,
    pub rounds_detail: Vec<RoundTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub models: Option<ModelNames>,
    /// Sweep coordinates, set by the experiment runner.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    pub round_budget: Option<usize>,
}

impl TraceRecord {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

pub fn collect_trace(qid: &str, result: &R4RResult, models: Option<ModelNames>) -> TraceRecord {
    TraceRecord {
        qid: qid.to_string(),
        reason: result.reason,
        rounds: result.rounds_used,
        rounds_detail: result.rounds.clone(),
        models,
        t: None,
        round_budget: None,
    }
}

/// Reads a JSON-lines trace file; blank lines are skipped.
pub fn read_traces(text: &str) -> Result<Vec<TraceRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::MalformedRecord {
                line_no: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}
