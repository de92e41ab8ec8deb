//! Textual document identifiers.
//!
//! The default identifier is the keyword path through a residual-quantization
//! hierarchy (`food-apple`). Title, n-gram, and pseudo-query views add
//! further identifiers per document for multi-view retrieval.

mod embed;
mod rq;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{content_words, Corpus, Document, Token, TokenSeq, Tokenizer, Vocabulary, END};
use crate::error::{Error, Result};

pub use embed::{cosine, embed_document, Embedder, Embedding, DEFAULT_DIM};
pub use rq::{
    assign_keywords, build_rq_hierarchy, kmeans, nearest, HierarchyNode, NodeId, NodeKind, RqHierarchy, RqNode,
    MAX_KMEANS_ITERS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Path,
    Title,
    Ngram,
    PseudoQuery,
}

impl View {
    pub fn as_str(self) -> &'static str {
        match self {
            View::Path => "path",
            View::Title => "title",
            View::Ngram => "ngram",
            View::PseudoQuery => "pseudo_query",
        }
    }
}

impl std::str::FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "path" => Ok(View::Path),
            "title" => Ok(View::Title),
            "ngram" => Ok(View::Ngram),
            "pseudo_query" | "pseudo-query" => Ok(View::PseudoQuery),
            other => Err(Error::Config(format!("unknown docid view {other:?}"))),
        }
    }
}

/// One identifier of one document. `tokens` always ends with [`END`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocIdRecord {
    pub doc_key: String,
    pub view: View,
    pub surface: String,
    pub tokens: TokenSeq,
}

impl DocIdRecord {
    /// Tokenizes `surface`; returns `None` when it yields no tokens.
    pub fn new(
        doc_key: &str,
        view: View,
        surface: &str,
        tokenizer: &Tokenizer,
        vocab: &mut Vocabulary,
    ) -> Result<Option<Self>> {
        let mut tokens = tokenizer.encode(vocab, surface)?;
        if tokens.is_empty() {
            return Ok(None);
        }
        tokens.push(END);
        Ok(Some(DocIdRecord {
            doc_key: doc_key.to_string(),
            view,
            surface: surface.to_string(),
            tokens,
        }))
    }

    /// Tokens without the trailing END.
    pub fn body(&self) -> &[Token] {
        &self.tokens[..self.tokens.len() - 1]
    }
}

/// Which non-path views to build, and the n-gram view parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewConfig {
    pub title: bool,
    pub ngram: bool,
    pub pseudo_query: bool,
    pub ngram_count: usize,
    pub ngram_len: usize,
}

impl Default for ViewConfig {
    fn default() -> Self {
        ViewConfig {
            title: false,
            ngram: false,
            pseudo_query: false,
            ngram_count: 3,
            ngram_len: 3,
        }
    }
}

/// Corpus statistics for the n-gram view.
pub struct NgramStats {
    n_docs: usize,
    df: HashMap<Vec<String>, usize>,
    len: usize,
    tokenizer: Tokenizer,
}

fn ngrams(words: &[String], n: usize) -> Vec<Vec<String>> {
    if n == 0 || words.len() < n {
        return Vec::new();
    }
    words.windows(n).map(<[String]>::to_vec).collect()
}

impl NgramStats {
    pub fn new(corpus: &Corpus, len: usize, tokenizer: Tokenizer) -> Self {
        let mut df: HashMap<Vec<String>, usize> = HashMap::new();
        for doc in corpus {
            let mut grams = ngrams(&content_words(&tokenizer, &doc.text), len);
            grams.sort();
            grams.dedup();
            for g in grams {
                *df.entry(g).or_default() += 1;
            }
        }
        NgramStats {
            n_docs: corpus.len(),
            df,
            len,
            tokenizer,
        }
    }

    /// Top `m` distinct n-grams of the body by tf * ln(1 + N/df), ties
    /// lexicographic.
    pub fn top(&self, doc: &Document, m: usize) -> Vec<String> {
        let grams = ngrams(&content_words(&self.tokenizer, &doc.text), self.len);
        let mut tf: BTreeMap<Vec<String>, usize> = BTreeMap::new();
        for g in grams {
            *tf.entry(g).or_default() += 1;
        }
        let mut scored: Vec<(f64, String)> = tf
            .into_iter()
            .map(|(g, c)| {
                let df = self.df.get(&g).copied().unwrap_or(0).max(1);
                let idf = (1.0 + self.n_docs as f64 / df as f64).ln();
                (c as f64 * idf, g.join(" "))
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        scored.into_iter().take(m).map(|(_, s)| s).collect()
    }
}

/// Title, n-gram, and pseudo-query identifiers for `doc`. Missing sources
/// produce no record.
pub fn build_views(
    doc: &Document,
    config: &ViewConfig,
    ngram_stats: Option<&NgramStats>,
    tokenizer: &Tokenizer,
    vocab: &mut Vocabulary,
) -> Result<Vec<DocIdRecord>> {
    let mut out = Vec::new();
    if config.title {
        if let Some(title) = doc.title.as_deref() {
            out.extend(DocIdRecord::new(&doc.doc_key, View::Title, title, tokenizer, vocab)?);
        }
    }
    if config.ngram {
        if let Some(stats) = ngram_stats {
            for gram in stats.top(doc, config.ngram_count) {
                out.extend(DocIdRecord::new(&doc.doc_key, View::Ngram, &gram, tokenizer, vocab)?);
            }
        }
    }
    if config.pseudo_query {
        for pq in &doc.pseudo_queries {
            out.extend(DocIdRecord::new(&doc.doc_key, View::PseudoQuery, pq, tokenizer, vocab)?);
        }
    }
    Ok(out)
}

/// Path docid for `doc_key` in a labelled hierarchy.
pub fn path_docid(
    doc_key: &str,
    h: &RqHierarchy,
    tokenizer: &Tokenizer,
    vocab: &mut Vocabulary,
) -> Result<DocIdRecord> {
    let surface = h.path_surface(doc_key)?;
    DocIdRecord::new(doc_key, View::Path, &surface, tokenizer, vocab)?
        .ok_or_else(|| Error::UnknownDoc(doc_key.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexConfig {
    pub levels: usize,
    pub branching: usize,
    pub dim: usize,
    pub seed: u64,
    pub path: bool,
    pub views: ViewConfig,
    pub tokenizer: Tokenizer,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            levels: 2,
            branching: 8,
            dim: DEFAULT_DIM,
            seed: 0,
            path: true,
            views: ViewConfig::default(),
            tokenizer: Tokenizer::default(),
        }
    }
}

/// All identifiers of a corpus plus the frozen vocabulary they are written in.
#[derive(Debug, Clone, PartialEq)]
pub struct DocIdIndex {
    pub config: IndexConfig,
    vocab: Vocabulary,
    records: Vec<DocIdRecord>,
    hierarchy: Option<HierarchyNode>,
    by_doc: BTreeMap<String, Vec<usize>>,
    by_surface: BTreeMap<String, Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    config: IndexConfig,
    vocab: Vocabulary,
    records: Vec<DocIdRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hierarchy: Option<HierarchyNode>,
}

impl DocIdIndex {
    /// Builds every configured view for `corpus`.
    ///
    /// The vocabulary is filled in a fixed order (docid surfaces, then
    /// document text, then `extra_texts`) and frozen afterwards.
    pub fn build(corpus: &Corpus, config: &IndexConfig, extra_texts: &[String]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Config("cannot index an empty corpus".into()));
        }
        let tokenizer = config.tokenizer;
        let mut vocab = Vocabulary::new();
        let mut records = Vec::new();
        let mut hierarchy = None;

        let labelled = if config.path {
            let embedder = Embedder::new(config.dim, config.seed)?;
            let mut vectors = BTreeMap::new();
            for doc in corpus {
                vectors.insert(doc.doc_key.clone(), embedder.embed(doc)?);
            }
            let h = build_rq_hierarchy(&vectors, config.levels, config.branching)?;
            let h = assign_keywords(h, corpus, &tokenizer)?;
            hierarchy = Some(h.to_serial());
            Some(h)
        } else {
            None
        };
        let ngram_stats = config
            .views
            .ngram
            .then(|| NgramStats::new(corpus, config.views.ngram_len, tokenizer));

        for doc in corpus {
            if let Some(h) = &labelled {
                records.push(path_docid(&doc.doc_key, h, &tokenizer, &mut vocab)?);
            }
            records.extend(build_views(
                doc,
                &config.views,
                ngram_stats.as_ref(),
                &tokenizer,
                &mut vocab,
            )?);
        }

        for doc in corpus {
            if let Some(title) = &doc.title {
                tokenizer.encode(&mut vocab, title)?;
            }
            tokenizer.encode(&mut vocab, &doc.text)?;
            for pq in &doc.pseudo_queries {
                tokenizer.encode(&mut vocab, pq)?;
            }
        }
        for text in extra_texts {
            tokenizer.encode(&mut vocab, text)?;
        }
        vocab.freeze();

        Self::from_parts(config.clone(), vocab, records, hierarchy)
    }

    /// Assembles an index from ready-made records. Every record must be
    /// written in `vocab` and end with END.
    pub fn from_parts(
        config: IndexConfig,
        mut vocab: Vocabulary,
        records: Vec<DocIdRecord>,
        hierarchy: Option<HierarchyNode>,
    ) -> Result<Self> {
        vocab.freeze();
        let mut by_doc: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut by_surface: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.tokens.len() < 2 || r.tokens.last() != Some(&END) {
                return Err(Error::Config(format!(
                    "record {:?} of {} must have a nonempty body and end with END",
                    r.surface, r.doc_key
                )));
            }
            if let Some(&bad) = r.tokens.iter().find(|&&t| !vocab.contains(t)) {
                return Err(Error::UnknownToken(bad));
            }
            if r.body().contains(&END) {
                return Err(Error::Config(format!("record {:?} has an inner END", r.surface)));
            }
            by_doc.entry(r.doc_key.clone()).or_default().push(i);
            by_surface.entry(r.surface.clone()).or_default().push(i);
        }
        Ok(DocIdIndex {
            config,
            vocab,
            records,
            hierarchy,
            by_doc,
            by_surface,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.config.tokenizer
    }

    pub fn records(&self) -> &[DocIdRecord] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &DocIdRecord {
        &self.records[i]
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn config(&self) -> &IndexConfig {
        &self.config
    }

    /// Whether records come from more than one view.
    pub fn is_multi_view(&self) -> bool {
        self.records
            .first()
            .is_some_and(|f| self.records.iter().any(|r| r.view != f.view))
    }

    pub fn hierarchy(&self) -> Option<&HierarchyNode> {
        self.hierarchy.as_ref()
    }

    pub fn doc_keys(&self) -> impl Iterator<Item = &str> {
        self.by_doc.keys().map(String::as_str)
    }

    pub fn records_of(&self, doc_key: &str) -> &[usize] {
        self.by_doc.get(doc_key).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn records_with_surface(&self, surface: &str) -> &[usize] {
        self.by_surface.get(surface).map(Vec::as_slice).unwrap_or(&[])
    }

    /// The document's path record, or its first record when no path view
    /// was built.
    pub fn primary_record(&self, doc_key: &str) -> Result<&DocIdRecord> {
        let ids = self.records_of(doc_key);
        ids.iter()
            .map(|&i| &self.records[i])
            .find(|r| r.view == View::Path)
            .or_else(|| ids.first().map(|&i| &self.records[i]))
            .ok_or_else(|| Error::UnknownDoc(doc_key.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        let file = IndexFile {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            records: self.records.clone(),
            hierarchy: self.hierarchy.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: IndexFile = serde_json::from_str(json)?;
        Self::from_parts(file.config, file.vocab, file.records, file.hierarchy)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut json = self.to_json()?;
        json.push('\n');
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let json = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&json)
    }
}
