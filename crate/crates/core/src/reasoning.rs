//! Prompts and the think / verify / reflect / direct-CoT calls.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Query;
use crate::decode::Candidate;
use crate::error::{Error, Result};
use crate::lm::{GenerationRequest, LanguageModel};

pub const RETRIEVAL_PROMPT: &str = "You are a retrieval assistant. Given a query, output identifiers for potentially relevant document (each identifier is a hyphen-separated set of key phrases for that document).";

pub const INDEXING_PROMPT: &str = "You are a retrieval assistant. Given a document, output identifiers for potentially relevant document (each identifier is a hyphen-separated set of key phrases for that document).";

pub const DIRECT_COT_PROMPT: &str = "You are a QA assistant. Given a query, think step by step about the answer and which documents are likely to contain it.";

pub const THINK_PROMPT: &str = "You are a retrieval planning assistant. Read the query and produce a structured plan.
Query: {query}
Answer with exactly two blocks:
<context>a compact query context of at most 15 words, phrased like document identifiers (key phrases)</context>
<explanation>an expanded explanation of what a relevant document should contain</explanation>";

pub const VERIFY_PROMPT: &str = "You are a relevance judge. Decide whether the document identifier answers the query.
Query: {query}
Document identifier: {docid}
Answer with exactly one word: relevant or irrelevant.";

pub const REFLECT_PROMPT: &str = "You are a retrieval planning assistant. The identifier below was retrieved for the query but is not relevant.
Query: {query}
Irrelevant identifier: {docid}
Current plan:
<context>{context}</context>
<explanation>{explanation}</explanation>
Minimally edit only the key signals in both blocks so retrieval avoids this error. Answer with exactly the two edited blocks.";

const FORMAT_REMINDER: &str =
    "Format reminder: reply with <context>...</context><explanation>...</explanation> and nothing else.";

const VERDICT_REMINDER: &str = "Format reminder: reply with the single word relevant or irrelevant.";

/// The six instruction templates. Missing keys in a prompt file keep their
/// defaults.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptRegistry {
    #[serde(rename = "P_i")]
    pub indexing: String,
    #[serde(rename = "P_r")]
    pub retrieval: String,
    #[serde(rename = "P_d")]
    pub direct_cot: String,
    #[serde(rename = "P_t")]
    pub think: String,
    #[serde(rename = "P_v")]
    pub verify: String,
    #[serde(rename = "P_f")]
    pub reflect: String,
}

impl Default for PromptRegistry {
    fn default() -> Self {
        PromptRegistry {
            indexing: INDEXING_PROMPT.into(),
            retrieval: RETRIEVAL_PROMPT.into(),
            direct_cot: DIRECT_COT_PROMPT.into(),
            think: THINK_PROMPT.into(),
            verify: VERIFY_PROMPT.into(),
            reflect: REFLECT_PROMPT.into(),
        }
    }
}

impl PromptRegistry {
    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&json)
    }

    /// `P_r + q + aux`, with an empty or missing `aux` left out.
    pub fn retrieval_prompt(&self, query: &str, aux: Option<&str>) -> String {
        concat(&[&self.retrieval, query, aux.unwrap_or("")])
    }

    /// `P_i + d`.
    pub fn indexing_prompt(&self, document: &str) -> String {
        concat(&[&self.indexing, document])
    }

    pub fn direct_cot_prompt(&self, query: &str) -> String {
        concat(&[&self.direct_cot, query])
    }
}

/// Joins nonempty parts with newlines.
pub fn concat(parts: &[&str]) -> String {
    parts
        .iter()
        .filter(|p| !p.is_empty())
        .copied()
        .collect::<Vec<_>>()
        .join("\n")
}

/// Fills `{name}` slots in one pass; substituted values are not rescanned.
/// Braces that do not enclose an identifier are kept as text.
pub fn render(template: &str, slots: &[(&str, &str)]) -> Result<String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let name_len = after
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(after.len());
        if name_len > 0 && after[name_len..].starts_with('}') {
            let name = &after[..name_len];
            let value = slots
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::UnboundSlot(name.to_string()))?;
            out.push_str(value);
            rest = &after[name_len + 1..];
        } else {
            out.push('{');
            rest = after;
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Extracts the first well-formed `<context>` and `<explanation>` blocks.
/// A block spans from the first closing tag back to the nearest opening tag
/// before it. The context must be nonempty after trimming.
pub fn parse_structured(text: &str) -> Option<(String, String)> {
    let context = block(text, "context")?;
    let explanation = block(text, "explanation")?;
    if context.is_empty() {
        return None;
    }
    Some((context, explanation))
}

fn block(text: &str, tag: &str) -> Option<String> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let end = text.find(&close)?;
    let start = text[..end].rfind(&open)? + open.len();
    Some(text[start..end].trim().to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Relevant,
    Irrelevant,
}

/// Case-insensitive; "irrelevant" is checked first since it contains
/// "relevant".
pub fn parse_verdict(raw: &str) -> Option<Verdict> {
    let lower = raw.to_lowercase();
    if lower.contains("irrelevant") {
        Some(Verdict::Irrelevant)
    } else if lower.contains("relevant") {
        Some(Verdict::Relevant)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceJudgment {
    pub verdict: Verdict,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningState {
    pub round: usize,
    pub context: String,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReflectOutcome {
    Refined(ReasoningState),
    ParseFailed,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DirectCotOutput {
    pub reasoning: String,
}

/// Token budgets for each reasoning call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budgets {
    pub think: usize,
    pub verify: usize,
    pub reflect: usize,
    pub direct_cot: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets {
            think: 128,
            verify: 16,
            reflect: 128,
            direct_cot: 256,
        }
    }
}

/// A reasoning model together with its prompts and budgets.
#[derive(Clone, Copy)]
pub struct Reasoner<'a> {
    pub model: &'a dyn LanguageModel,
    pub prompts: &'a PromptRegistry,
    pub budgets: Budgets,
}

impl<'a> Reasoner<'a> {
    pub fn new(model: &'a dyn LanguageModel, prompts: &'a PromptRegistry) -> Self {
        Reasoner {
            model,
            prompts,
            budgets: Budgets::default(),
        }
    }

    fn ask(&self, prompt: String, max_tokens: usize) -> Result<String> {
        self.model.generate(&GenerationRequest::greedy(prompt, max_tokens))
    }

    /// At most two generations: the prompt, then the prompt with `reminder`.
    fn ask_twice<T>(
        &self,
        prompt: &str,
        reminder: &str,
        max_tokens: usize,
        parse: impl Fn(&str) -> Option<T>,
    ) -> Result<Result<T, String>> {
        let first = self.ask(prompt.to_string(), max_tokens)?;
        if let Some(v) = parse(&first) {
            return Ok(Ok(v));
        }
        let second = self.ask(concat(&[prompt, reminder]), max_tokens)?;
        Ok(parse(&second).ok_or(second))
    }

    pub fn think(&self, q: &Query) -> Result<ReasoningState> {
        let prompt = render(&self.prompts.think, &[("query", &q.text)])?;
        let parsed = self.ask_twice(&prompt, FORMAT_REMINDER, self.budgets.think, parse_structured)?;
        let (context, explanation) = parsed.unwrap_or_else(|_| (q.text.clone(), String::new()));
        Ok(ReasoningState {
            round: 0,
            context,
            explanation,
        })
    }

    pub fn verify(&self, q: &Query, candidate: &Candidate) -> Result<RelevanceJudgment> {
        let prompt = render(
            &self.prompts.verify,
            &[("query", &q.text), ("docid", candidate.surface())],
        )?;
        let first = self.ask(prompt.clone(), self.budgets.verify)?;
        if let Some(verdict) = parse_verdict(&first) {
            return Ok(RelevanceJudgment { verdict, raw: first });
        }
        let second = self.ask(concat(&[&prompt, VERDICT_REMINDER]), self.budgets.verify)?;
        Ok(RelevanceJudgment {
            verdict: parse_verdict(&second).unwrap_or(Verdict::Relevant),
            raw: second,
        })
    }

    pub fn reflect(&self, q: &Query, failed: &Candidate, state: &ReasoningState) -> Result<ReflectOutcome> {
        let prompt = render(
            &self.prompts.reflect,
            &[
                ("query", &q.text),
                ("docid", failed.surface()),
                ("context", &state.context),
                ("explanation", &state.explanation),
            ],
        )?;
        Ok(
            match self.ask_twice(&prompt, FORMAT_REMINDER, self.budgets.reflect, parse_structured)? {
                Ok((context, explanation)) => ReflectOutcome::Refined(ReasoningState {
                    round: state.round + 1,
                    context,
                    explanation,
                }),
                Err(_) => ReflectOutcome::ParseFailed,
            },
        )
    }

    pub fn direct_cot(&self, q: &Query) -> Result<DirectCotOutput> {
        let reasoning = self.ask(self.prompts.direct_cot_prompt(&q.text), self.budgets.direct_cot)?;
        Ok(DirectCotOutput {
            reasoning: reasoning.trim().to_string(),
        })
    }
}

pub fn think(model: &dyn LanguageModel, q: &Query, reg: &PromptRegistry) -> Result<ReasoningState> {
    Reasoner::new(model, reg).think(q)
}

pub fn verify(
    model: &dyn LanguageModel,
    q: &Query,
    candidate: &Candidate,
    reg: &PromptRegistry,
) -> Result<RelevanceJudgment> {
    Reasoner::new(model, reg).verify(q, candidate)
}

pub fn reflect(
    model: &dyn LanguageModel,
    q: &Query,
    failed: &Candidate,
    state: &ReasoningState,
    reg: &PromptRegistry,
) -> Result<ReflectOutcome> {
    Reasoner::new(model, reg).reflect(q, failed, state)
}

pub fn direct_cot(model: &dyn LanguageModel, q: &Query, reg: &PromptRegistry) -> Result<DirectCotOutput> {
    Reasoner::new(model, reg).direct_cot(q)
}
