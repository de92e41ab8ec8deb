//! Metrics, likelihood diagnostics and the batch experiment runner.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraint::{ConstraintAutomaton, Strategy};
use crate::corpus::{Corpus, Query, TokenSeq};
use crate::decode::{BeamConfig, RankedList};
use crate::docid::DocIdIndex;
use crate::error::{Error, Result};
use crate::lm::{LanguageModel, NgramModel};
use crate::orchestrator::{
    collect_trace, run_direct_cot, run_r4r, run_standard, Ablation, ModelBundle, ModelNames, RefineConfig, Retrieval,
    TerminationReason, TraceRecord,
};
use crate::reasoning::{Budgets, PromptRegistry};

/// Ranked document keys of one query together with its relevant set.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunRecord {
    pub ranked: Vec<String>,
    pub relevant: BTreeSet<String>,
}

impl RunRecord {
    pub fn new<I, S>(ranked: I, relevant: &BTreeSet<String>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        RunRecord {
            ranked: ranked.into_iter().map(Into::into).collect(),
            relevant: relevant.clone(),
        }
    }

    pub fn from_ranked(list: &RankedList, q: &Query) -> Self {
        RunRecord::new(list.doc_keys(), &q.relevant_keys)
    }

    /// 1-based rank of the first relevant document within the top `k`.
    pub fn first_relevant(&self, k: usize) -> Option<usize> {
        self.ranked
            .iter()
            .take(k)
            .position(|d| self.relevant.contains(d))
            .map(|p| p + 1)
    }
}

fn check(runs: &[RunRecord], k: usize) -> Result<()> {
    if runs.is_empty() {
        return Err(Error::EmptyRuns);
    }
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    Ok(())
}

pub fn hits_at_k(runs: &[RunRecord], k: usize) -> Result<f64> {
    check(runs, k)?;
    let hits = runs.iter().filter(|r| r.first_relevant(k).is_some()).count();
    Ok(hits as f64 / runs.len() as f64)
}

pub fn mrr_at_k(runs: &[RunRecord], k: usize) -> Result<f64> {
    check(runs, k)?;
    let total: f64 = runs
        .iter()
        .filter_map(|r| r.first_relevant(k))
        .map(|rank| 1.0 / rank as f64)
        .sum();
    Ok(total / runs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

impl LatencyStats {
    pub fn from_samples(ms: &[f64]) -> Option<Self> {
        if ms.is_empty() {
            return None;
        }
        let mut sorted = ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        let pct = |p: f64| sorted[((p * (sorted.len() - 1) as f64).round() as usize).min(sorted.len() - 1)];
        Some(LatencyStats {
            mean_ms: sorted.iter().sum::<f64>() / sorted.len() as f64,
            p50_ms: pct(0.5),
            p95_ms: pct(0.95),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_queries: usize,
    pub hits: BTreeMap<usize, f64>,
    pub mrr: BTreeMap<usize, f64>,
    /// Only present when timing was requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyStats>,
}

impl MetricReport {
    pub fn compute(runs: &[RunRecord], ks: &[usize], latencies_ms: Option<&[f64]>) -> Result<Self> {
        let mut hits = BTreeMap::new();
        let mut mrr = BTreeMap::new();
        for &k in ks {
            hits.insert(k, hits_at_k(runs, k)?);
            mrr.insert(k, mrr_at_k(runs, k)?);
        }
        Ok(MetricReport {
            n_queries: runs.len(),
            hits,
            mrr,
            latency: latencies_ms.and_then(LatencyStats::from_samples),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerminationStats {
    pub all_relevant: f64,
    pub budget_exhausted: f64,
    pub parse_failure: f64,
}

pub fn termination_stats(reasons: impl IntoIterator<Item = TerminationReason>) -> Result<TerminationStats> {
    let mut counts = [0usize; 3];
    for r in reasons {
        counts[match r {
            TerminationReason::AllRelevant => 0,
            TerminationReason::BudgetExhausted => 1,
            TerminationReason::ParseFailure => 2,
        }] += 1;
    }
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(Error::EmptyRuns);
    }
    let f = |c: usize| c as f64 / n as f64;
    Ok(TerminationStats {
        all_relevant: f(counts[0]),
        budget_exhausted: f(counts[1]),
        parse_failure: f(counts[2]),
    })
}

pub fn trace_termination_stats(traces: &[TraceRecord]) -> Result<TerminationStats> {
    termination_stats(traces.iter().map(|t| t.reason))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NllMode {
    /// Plain input, no instruction.
    Standard,
    /// `P_i` / `P_r` prepended to the input.
    Instruction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NllReport {
    pub indexing_loss: f64,
    pub retrieval_loss: f64,
    pub total: f64,
    pub mode: NllMode,
}

/// Prompt/target pairs for the indexing objective (document → docid) and
/// the retrieval objective (query → docid). Targets end with END.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrainingPairs {
    pub indexing: Vec<(TokenSeq, TokenSeq)>,
    pub retrieval: Vec<(TokenSeq, TokenSeq)>,
}

impl TrainingPairs {
    pub fn iter(&self) -> impl Iterator<Item = (&[u32], &[u32])> {
        self.indexing
            .iter()
            .chain(&self.retrieval)
            .map(|(p, t)| (p.as_slice(), t.as_slice()))
    }
}

/// `(query text, relevant doc key)` for every labelled relevance.
pub fn query_pairs(queries: &[Query]) -> Vec<(String, String)> {
    queries
        .iter()
        .flat_map(|q| q.relevant_keys.iter().map(move |d| (q.text.clone(), d.clone())))
        .collect()
}

pub fn training_pairs(
    corpus: &Corpus,
    index: &DocIdIndex,
    pairs: &[(String, String)],
    prompts: &PromptRegistry,
    mode: NllMode,
) -> Result<TrainingPairs> {
    let tok = index.tokenizer();
    let vocab = index.vocab();
    let encode = |text: &str| tok.encode_lenient(vocab, text);
    let mut out = TrainingPairs::default();
    for doc in corpus {
        let input = match mode {
            NllMode::Standard => doc.text.clone(),
            NllMode::Instruction => prompts.indexing_prompt(&doc.text),
        };
        let target = index.primary_record(&doc.doc_key)?.tokens.clone();
        out.indexing.push((encode(&input), target));
    }
    for (q, key) in pairs {
        let input = match mode {
            NllMode::Standard => q.clone(),
            NllMode::Instruction => prompts.retrieval_prompt(q, None),
        };
        let target = index.primary_record(key)?.tokens.clone();
        out.retrieval.push((encode(&input), target));
    }
    Ok(out)
}

/// Negative log-likelihood of the gold docids under `model` (diagnostic
/// only, nothing is trained).
pub fn nll_losses(
    model: &dyn LanguageModel,
    corpus: &Corpus,
    pairs: &[(String, String)],
    index: &DocIdIndex,
    prompts: &PromptRegistry,
    mode: NllMode,
) -> Result<NllReport> {
    if !model.supports_distributions() {
        return Err(Error::NotSupported(format!(
            "{} (no token distributions)",
            model.name()
        )));
    }
    let tp = training_pairs(corpus, index, pairs, prompts, mode)?;
    let loss = |set: &[(TokenSeq, TokenSeq)]| -> Result<f64> {
        set.iter()
            .map(|(p, t)| model.sequence_logprob(p, t).map(|lp| -lp))
            .sum()
    };
    let indexing_loss = loss(&tp.indexing)?;
    let retrieval_loss = loss(&tp.retrieval)?;
    Ok(NllReport {
        indexing_loss,
        retrieval_loss,
        total: indexing_loss + retrieval_loss,
        mode,
    })
}

pub fn train_ngram(model: &mut NgramModel, pairs: &TrainingPairs) -> Result<()> {
    model.train_pairs(pairs.iter())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Standard,
    DirectCot,
    R4r,
}

impl Pipeline {
    pub fn as_str(self) -> &'static str {
        match self {
            Pipeline::Standard => "standard",
            Pipeline::DirectCot => "direct_cot",
            Pipeline::R4r => "r4r",
        }
    }
}

impl FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "standard" => Ok(Pipeline::Standard),
            "direct_cot" | "cot" => Ok(Pipeline::DirectCot),
            "r4r" => Ok(Pipeline::R4r),
            other => Err(Error::Config(format!(
                "unknown pipeline {other:?} (expected standard, direct_cot or r4r)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub pipeline: Pipeline,
    pub strategy: Strategy,
    pub beam: BeamConfig,
    /// Length of each returned list.
    pub k: usize,
    /// Cutoffs reported for Hits@k and MRR@k.
    pub metric_ks: Vec<usize>,
    /// Verify depths t to sweep (r4r only).
    pub verify_depths: Vec<usize>,
    /// Round budgets T to sweep (r4r only).
    pub round_budgets: Vec<usize>,
    pub ablation: Ablation,
    pub budgets: Budgets,
    /// Record wall-clock latencies. Off keeps outputs byte-reproducible.
    pub timing: bool,
    pub seed: u64,
    /// Worker threads; 0 lets the thread pool decide.
    #[serde(skip)]
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            pipeline: Pipeline::Standard,
            strategy: Strategy::Trie,
            beam: BeamConfig::default(),
            k: BeamConfig::default().beam_width,
            metric_ks: vec![1, 5, 10, 20],
            verify_depths: vec![3],
            round_budgets: vec![3],
            ablation: Ablation::default(),
            budgets: Budgets::default(),
            timing: false,
            seed: 0,
            jobs: 0,
        }
    }
}

#[derive(Clone, Copy)]
pub struct ExperimentInputs<'a> {
    pub index: &'a DocIdIndex,
    pub automaton: &'a ConstraintAutomaton,
    pub prompts: &'a PromptRegistry,
    pub queries: &'a [Query],
    pub models: ModelBundle<'a>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    pub round_budget: Option<usize>,
    pub metrics: MetricReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub termination: Option<TerminationStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub models: ModelNames,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub report: ExperimentReport,
    /// One record per query and sweep row, in row then query order.
    pub traces: Vec<TraceRecord>,
    /// Ranked lists of the first row, in query order.
    pub rankings: Vec<RankedList>,
}

struct QueryOutcome {
    ranked: RankedList,
    ms: f64,
    trace: Option<TraceRecord>,
}

fn run_row(
    cfg: &ExperimentConfig,
    inputs: &ExperimentInputs,
    retrieval: &Retrieval,
    refine: Option<RefineConfig>,
) -> Result<Vec<QueryOutcome>> {
    let one = |q: &Query| -> Result<QueryOutcome> {
        let started = Instant::now();
        let models = inputs.models;
        let (ranked, trace) = match (cfg.pipeline, refine) {
            (Pipeline::Standard, _) => (run_standard(q, models.retriever, retrieval)?, None),
            (Pipeline::DirectCot, _) => (run_direct_cot(q, models.reasoner, models.retriever, retrieval)?, None),
            (Pipeline::R4r, Some(rc)) => {
                let mut res = run_r4r(q, models, retrieval, &rc)?;
                if !cfg.timing {
                    res.rounds.iter_mut().for_each(|r| r.ms = 0.0);
                }
                let mut trace = collect_trace(&q.query_id, &res, Some(models.describe()));
                trace.t = Some(rc.verify_depth);
                trace.round_budget = Some(rc.round_budget);
                (res.ranked, Some(trace))
            }
            (Pipeline::R4r, None) => unreachable!("r4r rows carry a refine config"),
        };
        Ok(QueryOutcome {
            ranked,
            ms: started.elapsed().as_secs_f64() * 1e3,
            trace,
        })
    };
    // Results come back in query order whatever the thread count.
    inputs.queries.par_iter().map(one).collect()
}

/// Runs every query through the configured pipeline, once per sweep row.
pub fn run_experiment(cfg: &ExperimentConfig, inputs: &ExperimentInputs) -> Result<ExperimentOutput> {
    if inputs.queries.is_empty() {
        return Err(Error::EmptyRuns);
    }
    if cfg.k == 0 || cfg.metric_ks.is_empty() || cfg.metric_ks.contains(&0) {
        return Err(Error::Config("k and every metric cutoff must be >= 1".into()));
    }
    let retrieval = Retrieval {
        k: cfg.k,
        budgets: cfg.budgets,
        ..Retrieval::new(inputs.index, inputs.automaton, inputs.prompts, cfg.beam)
    };
    let sweep: Vec<Option<RefineConfig>> = match cfg.pipeline {
        Pipeline::R4r => {
            let mut rows = Vec::new();
            for &t in &cfg.verify_depths {
                for &budget in &cfg.round_budgets {
                    let rc = RefineConfig {
                        verify_depth: t,
                        round_budget: budget,
                        ablation: cfg.ablation,
                    };
                    rc.validate(cfg.k)?;
                    rows.push(Some(rc));
                }
            }
            if rows.is_empty() {
                return Err(Error::Config("the t and T sweeps must be nonempty".into()));
            }
            rows
        }
        _ => vec![None],
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let mut rows = Vec::new();
    let mut traces = Vec::new();
    let mut rankings = Vec::new();
    for refine in sweep {
        let outcomes = pool.install(|| run_row(cfg, inputs, &retrieval, refine))?;
        let runs: Vec<RunRecord> = outcomes
            .iter()
            .zip(inputs.queries)
            .map(|(o, q)| RunRecord::from_ranked(&o.ranked, q))
            .collect();
        let ms: Vec<f64> = outcomes.iter().map(|o| o.ms).collect();
        let metrics = MetricReport::compute(&runs, &cfg.metric_ks, cfg.timing.then_some(ms.as_slice()))?;
        let row_traces: Vec<TraceRecord> = outcomes.iter().filter_map(|o| o.trace.clone()).collect();
        let termination = if row_traces.is_empty() {
            None
        } else {
            Some(trace_termination_stats(&row_traces)?)
        };
        rows.push(ReportRow {
            t: refine.map(|r| r.verify_depth),
            round_budget: refine.map(|r| r.round_budget),
            metrics,
            termination,
        });
        traces.extend(row_traces);
        if rankings.is_empty() {
            rankings = outcomes.into_iter().map(|o| o.ranked).collect();
        }
    }
    Ok(ExperimentOutput {
        report: ExperimentReport {
            config: cfg.clone(),
            models: inputs.models.describe(),
            rows,
        },
        traces,
        rankings,
    })
}

impl ExperimentOutput {
    pub fn report_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.report)? + "\n")
    }

    pub fn traces_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for t in &self.traces {
            out.push_str(&t.to_json_line()?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, report: &Path, trace: Option<&Path>) -> Result<()> {
        std::fs::write(report, self.report_json()?).map_err(|e| Error::io(report, e))?;
        if let Some(trace) = trace {
            std::fs::write(trace, self.traces_jsonl()?).map_err(|e| Error::io(trace, e))?;
        }
        Ok(())
    }
}
