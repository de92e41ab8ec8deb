use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use gentrieval::constraint::build;
use gentrieval::corpus::{load_corpus, load_queries};
use gentrieval::eval::{
    nll_losses, query_pairs, run_experiment, trace_termination_stats, train_ngram, training_pairs, ExperimentConfig,
    ExperimentInputs, NllMode, Pipeline,
};
use gentrieval::lm::{RemoteConfig, RemoteModel};
use gentrieval::orchestrator::{read_traces, run_standard, Ablation, ModelBundle, Retrieval};
use gentrieval::reasoning::{Budgets, PromptRegistry};
use gentrieval::{
    BeamConfig, DocIdIndex, Error, IndexConfig, LanguageModel, NgramModel, Query, Result, ScriptedModel, Strategy,
};

const REMOTE_ENV: &str = "GENTRIEVAL_REMOTE_URL";

#[derive(Parser)]
#[command(
    name = "gentrieval",
    version,
    about = "Generative retrieval with constrained decoding and iterative refinement"
)]
struct Cli {
    /// Seed for every random choice (embedding, clustering).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a docid index from a JSONL corpus.
    BuildIndex(BuildIndexArgs),
    /// Decode a ranked docid list for one query or a query file.
    Retrieve(RetrieveArgs),
    /// Run a full experiment and write the metric report and traces.
    Run(RunArgs),
    /// Termination statistics of a trace file.
    Stats(StatsArgs),
    /// Train an n-gram retrieval model on docid targets.
    TrainNgram(TrainArgs),
    /// Negative log-likelihood of gold docids under a model.
    Nll(NllArgs),
}

#[derive(Args)]
struct BuildIndexArgs {
    /// JSONL corpus (`id`, `text`, optional `title` and `pseudo_queries`).
    #[arg(long)]
    corpus: PathBuf,
    /// Index output path.
    #[arg(long)]
    out: PathBuf,
    /// Hierarchy depth.
    #[arg(long, default_value_t = 2)]
    levels: usize,
    /// Clusters per level.
    #[arg(long, default_value_t = 8)]
    branching: usize,
    /// Embedding dimension.
    #[arg(long)]
    dim: Option<usize>,
    /// Prompt registry JSON; its prompts join the vocabulary.
    #[arg(long)]
    prompts: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    /// Scripted retrieval model (JSON rule list).
    #[arg(long, conflicts_with = "ngram")]
    model: Option<PathBuf>,
    /// Trained n-gram retrieval model.
    #[arg(long)]
    ngram: Option<PathBuf>,
    /// Scripted reasoning model; defaults to the retrieval model.
    #[arg(long)]
    reasoner: Option<PathBuf>,
    /// Remote model endpoint (GENTRIEVAL_REMOTE_URL takes precedence).
    #[arg(long)]
    remote_url: Option<String>,
}

#[derive(Args)]
struct DecodeArgs {
    /// Index built by `build-index`.
    #[arg(long)]
    index: PathBuf,
    /// Constraint strategy: trie, fm or termset.
    #[arg(long, default_value = "trie")]
    strategy: Strategy,
    /// Number of documents returned.
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// Beam width; defaults to k.
    #[arg(long)]
    beam: Option<usize>,
    /// Prompt registry JSON overriding the built-in prompts.
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[command(flatten)]
    models: ModelArgs,
}

#[derive(Args)]
struct RetrieveArgs {
    #[command(flatten)]
    decode: DecodeArgs,
    /// Query text.
    #[arg(long, conflicts_with = "queries", required_unless_present = "queries")]
    query: Option<String>,
    /// JSONL query file; output lines are prefixed with the query id.
    #[arg(long)]
    queries: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    decode: DecodeArgs,
    /// JSONL queries (`qid`, `text`, `relevant`).
    #[arg(long)]
    queries: PathBuf,
    /// Pipeline: standard, direct_cot or r4r.
    #[arg(long, default_value = "standard")]
    pipeline: Pipeline,
    /// Verify depths t (comma separated sweep).
    #[arg(long = "t", value_delimiter = ',', default_value = "3")]
    t: Vec<usize>,
    /// Round budgets T (comma separated sweep).
    #[arg(long = "T", value_delimiter = ',', default_value = "3")]
    round_budget: Vec<usize>,
    /// Cutoffs for Hits@k and MRR@k.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,20")]
    metric_ks: Vec<usize>,
    /// Token budget for every reasoning call.
    #[arg(long)]
    max_tokens: Option<usize>,
    /// Ablation: retrieve with the explanation instead of the context.
    #[arg(long)]
    no_context: bool,
    /// Ablation: drop the explanation everywhere.
    #[arg(long)]
    no_explanation: bool,
    /// Ablation: skip judging and reflect on the rank-1 hit every round.
    #[arg(long)]
    no_verification: bool,
    /// Report path; stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
    /// JSONL trace path (r4r only).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Record latencies (makes reports machine dependent).
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct StatsArgs {
    /// JSONL trace written by `run --trace`.
    #[arg(long)]
    trace: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSONL corpus the index was built from.
    #[arg(long)]
    corpus: PathBuf,
    /// Index built by `build-index`.
    #[arg(long)]
    index: PathBuf,
    /// Labelled queries for the retrieval objective.
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Output path for the trained model.
    #[arg(long)]
    out: PathBuf,
    /// Prepend the indexing and retrieval instructions.
    #[arg(long)]
    instruction: bool,
    /// Prompt registry JSON overriding the built-in prompts.
    #[arg(long)]
    prompts: Option<PathBuf>,
}

#[derive(Args)]
struct NllArgs {
    /// JSONL corpus the index was built from.
    #[arg(long)]
    corpus: PathBuf,
    /// Index built by `build-index`.
    #[arg(long)]
    index: PathBuf,
    /// JSONL queries with relevance labels.
    #[arg(long)]
    queries: PathBuf,
    /// Score with the instruction prompts prepended.
    #[arg(long)]
    instruction: bool,
    /// Prompt registry JSON overriding the built-in prompts.
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[command(flatten)]
    models: ModelArgs,
}

fn prompts(path: Option<&Path>) -> Result<PromptRegistry> {
    path.map_or_else(|| Ok(PromptRegistry::default()), PromptRegistry::load)
}

struct Models {
    retriever: Box<dyn LanguageModel>,
    reasoner: Option<Box<dyn LanguageModel>>,
}

impl Models {
    fn load(args: &ModelArgs, index: &DocIdIndex) -> Result<Self> {
        let vocab = Arc::new(index.vocab().clone());
        let tok = *index.tokenizer();
        let url = std::env::var(REMOTE_ENV).ok().or_else(|| args.remote_url.clone());
        let remote = || -> Option<Box<dyn LanguageModel>> {
            url.as_ref().map(|u| {
                let mut cfg = RemoteConfig::new(u.clone());
                cfg.vocab_size = Some(vocab.len());
                Box::new(RemoteModel::new(cfg)) as Box<dyn LanguageModel>
            })
        };
        let retriever: Box<dyn LanguageModel> = if let Some(p) = &args.model {
            Box::new(ScriptedModel::load(p, vocab.clone(), tok)?.named("scripted-retriever"))
        } else if let Some(p) = &args.ngram {
            Box::new(NgramModel::load(p, vocab.clone(), tok)?)
        } else if let Some(r) = remote() {
            r
        } else {
            return Err(Error::Config(format!(
                "no retrieval model: pass --model, --ngram, --remote-url or set {REMOTE_ENV}"
            )));
        };
        let local_retriever = args.model.is_some() || args.ngram.is_some();
        let reasoner: Option<Box<dyn LanguageModel>> = match &args.reasoner {
            Some(p) => Some(Box::new(
                ScriptedModel::load(p, vocab.clone(), tok)?.named("scripted-reasoner"),
            )),
            None if local_retriever => remote(),
            None => None,
        };
        Ok(Models { retriever, reasoner })
    }

    fn bundle(&self) -> ModelBundle<'_> {
        match &self.reasoner {
            Some(r) => ModelBundle::pair(self.retriever.as_ref(), r.as_ref()),
            None => ModelBundle::single(self.retriever.as_ref()),
        }
    }
}

fn beam(decode: &DecodeArgs) -> BeamConfig {
    BeamConfig::with_width(decode.beam.unwrap_or(decode.k))
}

fn build_index(args: &BuildIndexArgs, seed: u64) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let mut cfg = IndexConfig {
        levels: args.levels,
        branching: args.branching,
        seed,
        ..IndexConfig::default()
    };
    if let Some(dim) = args.dim {
        cfg.dim = dim;
    }
    let reg = prompts(args.prompts.as_deref())?;
    let extra = [
        reg.indexing,
        reg.retrieval,
        reg.direct_cot,
        reg.think,
        reg.verify,
        reg.reflect,
    ];
    let index = DocIdIndex::build(&corpus, &cfg, &extra)?;
    index.save(&args.out)?;
    eprintln!(
        "indexed {} documents into {} docids ({} tokens)",
        corpus.len(),
        index.len(),
        index.vocab().len()
    );
    Ok(())
}

fn retrieve(args: &RetrieveArgs) -> Result<()> {
    let d = &args.decode;
    let index = DocIdIndex::load(&d.index)?;
    let automaton = build(d.strategy, &index)?;
    let reg = prompts(d.prompts.as_deref())?;
    let models = Models::load(&d.models, &index)?;
    let retrieval = Retrieval {
        k: d.k,
        ..Retrieval::new(&index, &automaton, &reg, beam(d))
    };
    let print = |q: &Query, prefix: Option<&str>| -> Result<()> {
        for c in &run_standard(q, models.retriever.as_ref(), &retrieval)?.candidates {
            match prefix {
                Some(qid) => println!("{qid}\t{}\t{:.6}\t{}", c.surface(), c.score, c.doc_key),
                None => println!("{}\t{:.6}\t{}", c.surface(), c.score, c.doc_key),
            }
        }
        Ok(())
    };
    match (&args.query, &args.queries) {
        (Some(text), _) => print(&Query::new("query", text.as_str()), None),
        (None, Some(path)) => {
            for q in load_queries(path)? {
                print(&q, Some(&q.query_id))?;
            }
            Ok(())
        }
        (None, None) => Err(Error::Config("pass --query or --queries".into())),
    }
}

fn run(args: &RunArgs, seed: u64) -> Result<()> {
    let d = &args.decode;
    let index = DocIdIndex::load(&d.index)?;
    let automaton = build(d.strategy, &index)?;
    let reg = prompts(d.prompts.as_deref())?;
    let models = Models::load(&d.models, &index)?;
    let queries = load_queries(&args.queries)?;
    let mut budgets = Budgets::default();
    if let Some(n) = args.max_tokens {
        budgets = Budgets {
            think: n,
            verify: n,
            reflect: n,
            direct_cot: n,
        };
    }
    let cfg = ExperimentConfig {
        pipeline: args.pipeline,
        strategy: d.strategy,
        beam: beam(d),
        k: d.k,
        metric_ks: args.metric_ks.clone(),
        verify_depths: args.t.clone(),
        round_budgets: args.round_budget.clone(),
        ablation: Ablation {
            no_context: args.no_context,
            no_explanation: args.no_explanation,
            no_verification: args.no_verification,
        },
        budgets,
        timing: args.timing,
        seed,
        jobs: args.jobs,
    };
    let inputs = ExperimentInputs {
        index: &index,
        automaton: &automaton,
        prompts: &reg,
        queries: &queries,
        models: models.bundle(),
    };
    let out = run_experiment(&cfg, &inputs)?;
    match &args.report {
        Some(path) => out.write(path, args.trace.as_deref())?,
        None => {
            print!("{}", out.report_json()?);
            if let Some(trace) = &args.trace {
                std::fs::write(trace, out.traces_jsonl()?).map_err(|e| Error::io(trace, e))?;
            }
        }
    }
    Ok(())
}

fn stats(args: &StatsArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.trace).map_err(|e| Error::io(&args.trace, e))?;
    let s = trace_termination_stats(&read_traces(&text)?)?;
    println!("all_relevant\t{:.3}", s.all_relevant);
    println!("budget_exhausted\t{:.3}", s.budget_exhausted);
    println!("parse_failure\t{:.3}", s.parse_failure);
    Ok(())
}

fn mode(instruction: bool) -> NllMode {
    if instruction {
        NllMode::Instruction
    } else {
        NllMode::Standard
    }
}

fn train(args: &TrainArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let index = DocIdIndex::load(&args.index)?;
    let reg = prompts(args.prompts.as_deref())?;
    let pairs = match &args.queries {
        Some(p) => query_pairs(&load_queries(p)?),
        None => Vec::new(),
    };
    let tp = training_pairs(&corpus, &index, &pairs, &reg, mode(args.instruction))?;
    let mut model = NgramModel::new(Arc::new(index.vocab().clone()), *index.tokenizer());
    train_ngram(&mut model, &tp)?;
    model.save(&args.out)?;
    eprintln!(
        "trained on {} indexing and {} retrieval pairs",
        tp.indexing.len(),
        tp.retrieval.len()
    );
    Ok(())
}

fn nll(args: &NllArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let index = DocIdIndex::load(&args.index)?;
    let reg = prompts(args.prompts.as_deref())?;
    let models = Models::load(&args.models, &index)?;
    let pairs = query_pairs(&load_queries(&args.queries)?);
    let r = nll_losses(
        models.retriever.as_ref(),
        &corpus,
        &pairs,
        &index,
        &reg,
        mode(args.instruction),
    )?;
    println!("indexing_loss\t{:.6}", r.indexing_loss);
    println!("retrieval_loss\t{:.6}", r.retrieval_loss);
    println!("total\t{:.6}", r.total);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::BuildIndex(a) => build_index(a, cli.seed),
        Command::Retrieve(a) => retrieve(a),
        Command::Run(a) => run(a, cli.seed),
        Command::Stats(a) => stats(a),
        Command::TrainNgram(a) => train(a),
        Command::Nll(a) => nll(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
