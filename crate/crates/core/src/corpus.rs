//! Documents, queries, and the word-level tokenizer shared by the docid
//! index and the built-in language models.
//!
//! Token ids live in one [`Vocabulary`]. Ids `0..RESERVED` are reserved:
//! [`END`] terminates every docid, [`SEP`] separates docids inside the
//! FM-index text, and [`UNK`] stands in for words a frozen vocabulary has
//! never seen when lenient encoding is requested. None of the three can be
//! produced by tokenizing user text, since `<` and `>` always split off as
//! single punctuation tokens.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = u32;
pub type TokenSeq = Vec<Token>;

pub const END: Token = 0;
pub const SEP: Token = 1;
pub const UNK: Token = 2;
pub const RESERVED: usize = 3;

const RESERVED_SURFACES: [&str; RESERVED] = ["<end>", "<sep>", "<unk>"];

/// Append-only mapping between token ids and surfaces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    surfaces: Vec<String>,
    ids: HashMap<String, Token>,
    frozen: bool,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut vocab = Vocabulary {
            surfaces: Vec::new(),
            ids: HashMap::new(),
            frozen: false,
        };
        for surface in RESERVED_SURFACES {
            vocab.push(surface.to_string());
        }
        vocab
    }

    /// Rebuilds a vocabulary from its id-ordered surface list. The result is
    /// frozen.
    pub fn from_surfaces(surfaces: Vec<String>) -> Result<Self> {
        if surfaces.len() < RESERVED || surfaces[..RESERVED].iter().zip(RESERVED_SURFACES).any(|(a, b)| a != b) {
            return Err(Error::Config(
                "vocabulary must start with the reserved tokens <end>, <sep>, <unk>".into(),
            ));
        }
        let mut vocab = Vocabulary {
            surfaces: Vec::with_capacity(surfaces.len()),
            ids: HashMap::with_capacity(surfaces.len()),
            frozen: false,
        };
        for surface in surfaces {
            if vocab.ids.contains_key(&surface) {
                return Err(Error::Config(format!("duplicate vocabulary entry {surface:?}")));
            }
            vocab.push(surface);
        }
        vocab.frozen = true;
        Ok(vocab)
    }

    fn push(&mut self, surface: String) -> Token {
        let id = self.surfaces.len() as Token;
        self.ids.insert(surface.clone(), id);
        self.surfaces.push(surface);
        id
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.len() == RESERVED
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn id(&self, surface: &str) -> Option<Token> {
        self.ids.get(surface).copied()
    }

    pub fn surface(&self, token: Token) -> Option<&str> {
        self.surfaces.get(token as usize).map(String::as_str)
    }

    pub fn contains(&self, token: Token) -> bool {
        (token as usize) < self.surfaces.len()
    }

    pub fn surfaces(&self) -> &[String] {
        &self.surfaces
    }

    /// Returns the id of `surface`, assigning a fresh one if the vocabulary
    /// is still open.
    pub fn intern(&mut self, surface: &str) -> Result<Token> {
        if let Some(id) = self.id(surface) {
            return Ok(id);
        }
        if self.frozen {
            return Err(Error::VocabularyFrozen(surface.to_string()));
        }
        Ok(self.push(surface.to_string()))
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.surfaces.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let surfaces = Vec::<String>::deserialize(deserializer)?;
        Vocabulary::from_surfaces(surfaces).map_err(serde::de::Error::custom)
    }
}

/// Lowercasing word/punctuation splitter.
///
/// Alphanumeric runs form words, every other non-whitespace character is a
/// token of its own. With `split_hyphens` set, `-` is a pure boundary and
/// produces no token, so the path docid `food-apple` reads as `food apple`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub split_hyphens: bool,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer { split_hyphens: true }
    }
}

impl Tokenizer {
    pub fn words(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut word = String::new();
        for c in text.chars().flat_map(char::to_lowercase) {
            if c.is_alphanumeric() || (c == '-' && !self.split_hyphens) {
                word.push(c);
                continue;
            }
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() && c != '-' {
                out.push(c.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
        out
    }

    /// Tokenizes `text`, extending `vocab` with unseen words unless it is
    /// frozen.
    pub fn encode(&self, vocab: &mut Vocabulary, text: &str) -> Result<TokenSeq> {
        self.words(text).iter().map(|w| vocab.intern(w)).collect()
    }

    /// Tokenizes against a fixed vocabulary, mapping unseen words to [`UNK`].
    pub fn encode_lenient(&self, vocab: &Vocabulary, text: &str) -> TokenSeq {
        self.words(text).iter().map(|w| vocab.id(w).unwrap_or(UNK)).collect()
    }

    /// Tokenizes against a fixed vocabulary, failing on unseen words.
    pub fn encode_frozen(&self, vocab: &Vocabulary, text: &str) -> Result<TokenSeq> {
        self.words(text)
            .iter()
            .map(|w| vocab.id(w).ok_or_else(|| Error::VocabularyFrozen(w.clone())))
            .collect()
    }
}

/// Space-joins token surfaces up to (not including) the first [`END`].
pub fn detokenize(vocab: &Vocabulary, tokens: &[Token]) -> String {
    tokens
        .iter()
        .take_while(|&&t| t != END)
        .map(|&t| vocab.surface(t).unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

const STOPWORDS: &[&str] = &[
    "a",
    "about",
    "above",
    "after",
    "again",
    "against",
    "all",
    "am",
    "an",
    "and",
    "any",
    "are",
    "as",
    "at",
    "be",
    "because",
    "been",
    "before",
    "being",
    "below",
    "between",
    "both",
    "but",
    "by",
    "can",
    "could",
    "did",
    "do",
    "does",
    "doing",
    "down",
    "during",
    "each",
    "few",
    "for",
    "from",
    "further",
    "had",
    "has",
    "have",
    "having",
    "he",
    "her",
    "here",
    "hers",
    "herself",
    "him",
    "himself",
    "his",
    "how",
    "i",
    "if",
    "in",
    "into",
    "is",
    "it",
    "its",
    "itself",
    "just",
    "me",
    "more",
    "most",
    "my",
    "myself",
    "no",
    "nor",
    "not",
    "now",
    "of",
    "off",
    "on",
    "once",
    "only",
    "or",
    "other",
    "our",
    "ours",
    "ourselves",
    "out",
    "over",
    "own",
    "same",
    "she",
    "should",
    "so",
    "some",
    "such",
    "than",
    "that",
    "the",
    "their",
    "theirs",
    "them",
    "themselves",
    "then",
    "there",
    "these",
    "they",
    "this",
    "those",
    "through",
    "to",
    "too",
    "under",
    "until",
    "up",
    "very",
    "was",
    "we",
    "were",
    "what",
    "when",
    "where",
    "which",
    "while",
    "who",
    "whom",
    "why",
    "will",
    "with",
    "would",
    "you",
    "your",
    "yours",
    "yourself",
    "yourselves",
];

pub fn is_stopword(word: &str) -> bool {
    STOPWORDS.binary_search(&word).is_ok()
}

/// Alphanumeric, non-stopword words of `text`, in order.
pub fn content_words(tokenizer: &Tokenizer, text: &str) -> Vec<String> {
    tokenizer
        .words(text)
        .into_iter()
        .filter(|w| w.chars().all(char::is_alphanumeric) && !is_stopword(w))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    #[serde(rename = "id")]
    pub doc_key: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pseudo_queries: Vec<String>,
}

impl Document {
    pub fn new(doc_key: impl Into<String>, text: impl Into<String>) -> Self {
        Document {
            doc_key: doc_key.into(),
            text: text.into(),
            title: None,
            pseudo_queries: Vec::new(),
        }
    }

    pub fn with_title(mut self, title: impl Into<String>) -> Self {
        self.title = Some(title.into());
        self
    }

    pub fn with_pseudo_queries(mut self, queries: Vec<String>) -> Self {
        self.pseudo_queries = queries;
        self
    }
}

/// Documents in load order with a key index.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    documents: Vec<Document>,
    by_key: HashMap<String, usize>,
}

impl Corpus {
    pub fn from_documents(documents: Vec<Document>) -> Result<Self> {
        let mut corpus = Corpus::default();
        for doc in documents {
            corpus.push(doc)?;
        }
        Ok(corpus)
    }

    fn push(&mut self, doc: Document) -> Result<()> {
        if self.by_key.contains_key(&doc.doc_key) {
            return Err(Error::DuplicateKey(doc.doc_key));
        }
        self.by_key.insert(doc.doc_key.clone(), self.documents.len());
        self.documents.push(doc);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn position(&self, key: &str) -> Option<usize> {
        self.by_key.get(key).copied()
    }

    pub fn get(&self, key: &str) -> Option<&Document> {
        self.position(key).map(|i| &self.documents[i])
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Document> {
        self.documents.iter()
    }

    /// Parses the JSON-lines corpus format. Blank lines are skipped.
    pub fn from_reader(reader: impl BufRead) -> Result<Self> {
        let mut corpus = Corpus::default();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| Error::MalformedRecord {
                line_no,
                reason: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let doc: Document = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                line_no,
                reason: e.to_string(),
            })?;
            if doc.doc_key.is_empty() {
                return Err(Error::MalformedRecord {
                    line_no,
                    reason: "empty id".into(),
                });
            }
            if doc.text.trim().is_empty() {
                return Err(Error::MalformedRecord {
                    line_no,
                    reason: "empty text".into(),
                });
            }
            corpus.push(doc)?;
        }
        Ok(corpus)
    }
}

impl<'a> IntoIterator for &'a Corpus {
    type Item = &'a Document;
    type IntoIter = std::slice::Iter<'a, Document>;

    fn into_iter(self) -> Self::IntoIter {
        self.documents.iter()
    }
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Corpus::from_reader(BufReader::new(file))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    #[serde(rename = "qid")]
    pub query_id: String,
    pub text: String,
    #[serde(rename = "relevant", default)]
    pub relevant_keys: BTreeSet<String>,
}

impl Query {
    pub fn new(query_id: impl Into<String>, text: impl Into<String>) -> Self {
        Query {
            query_id: query_id.into(),
            text: text.into(),
            relevant_keys: BTreeSet::new(),
        }
    }

    pub fn with_relevant<I, S>(mut self, keys: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.relevant_keys = keys.into_iter().map(Into::into).collect();
        self
    }
}

pub fn queries_from_reader(reader: impl BufRead) -> Result<Vec<Query>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::MalformedRecord {
            line_no,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let query: Query = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line_no,
            reason: e.to_string(),
        })?;
        if query.text.trim().is_empty() {
            return Err(Error::MalformedRecord {
                line_no,
                reason: "empty query text".into(),
            });
        }
        out.push(query);
    }
    Ok(out)
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<Query>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    queries_from_reader(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus_of(lines: &str) -> Result<Corpus> {
        Corpus::from_reader(lines.as_bytes())
    }

    #[test]
    fn loads_in_order() {
        let corpus = corpus_of(
            "{\"id\":\"d1\",\"text\":\"a\"}\n{\"id\":\"d2\",\"text\":\"b\"}\n{\"id\":\"d3\",\"text\":\"c\"}\n",
        )
        .unwrap();
        assert_eq!(corpus.len(), 3);
        assert_eq!(corpus.position("d2"), Some(1));
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let err = corpus_of("{\"id\":\"d1\",\"text\":\"a\"}\n{\"id\":\"d1\",\"text\":\"b\"}\n").unwrap_err();
        assert!(matches!(err, Error::DuplicateKey(k) if k == "d1"));
    }

    #[test]
    fn empty_file_gives_empty_corpus() {
        assert!(corpus_of("").unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = corpus_of("{\"id\":\"d1\",\"text\":\"a\"}\nnot json\n").unwrap_err();
        assert!(matches!(err, Error::MalformedRecord { line_no: 2, .. }));
        let err = corpus_of("{\"id\":\"d1\"}\n").unwrap_err();
        assert!(matches!(err, Error::MalformedRecord { line_no: 1, .. }));
    }

    #[test]
    fn optional_fields_parse() {
        let corpus =
            corpus_of("{\"id\":\"d1\",\"text\":\"a\",\"title\":\"T\",\"pseudo_queries\":[\"x\",\"y\"]}\n").unwrap();
        let doc = corpus.get("d1").unwrap();
        assert_eq!(doc.title.as_deref(), Some("T"));
        assert_eq!(doc.pseudo_queries.len(), 2);
    }

    #[test]
    fn queries_parse() {
        let qs = queries_from_reader("{\"qid\":\"q1\",\"text\":\"apple\",\"relevant\":[\"d1\",\"d2\"]}\n".as_bytes())
            .unwrap();
        assert_eq!(qs[0].relevant_keys.len(), 2);
    }

    #[test]
    fn tokenize_lowercases_and_splits() {
        let mut vocab = Vocabulary::new();
        let tok = Tokenizer::default();
        let ids = tok.encode(&mut vocab, "Apple iPhone").unwrap();
        assert_eq!(ids.len(), 2);
        assert_eq!(vocab.surface(ids[0]), Some("apple"));
        assert_eq!(vocab.surface(ids[1]), Some("iphone"));
        assert!(tok.encode(&mut vocab, "").unwrap().is_empty());
    }

    #[test]
    fn hyphen_is_a_boundary() {
        let tok = Tokenizer::default();
        assert_eq!(tok.words("food-apple"), vec!["food", "apple"]);
        let keep = Tokenizer { split_hyphens: false };
        assert_eq!(keep.words("food-apple"), vec!["food-apple"]);
    }

    #[test]
    fn punctuation_splits_off() {
        let tok = Tokenizer::default();
        assert_eq!(tok.words("Apple Inc."), vec!["apple", "inc", "."]);
        assert_eq!(tok.words("</s>"), vec!["<", "/", "s", ">"]);
    }

    #[test]
    fn frozen_vocabulary_rejects_unseen_words() {
        let mut vocab = Vocabulary::new();
        let tok = Tokenizer::default();
        tok.encode(&mut vocab, "apple").unwrap();
        vocab.freeze();
        assert!(tok.encode(&mut vocab, "apple").is_ok());
        assert!(matches!(
            tok.encode(&mut vocab, "banana"),
            Err(Error::VocabularyFrozen(w)) if w == "banana"
        ));
        assert_eq!(tok.encode_lenient(&vocab, "apple banana")[1], UNK);
    }

    #[test]
    fn vocabulary_serde_round_trip() {
        let mut vocab = Vocabulary::new();
        Tokenizer::default().encode(&mut vocab, "b a c").unwrap();
        let json = serde_json::to_string(&vocab).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back.surfaces(), vocab.surfaces());
        assert!(back.is_frozen());
    }

    #[test]
    fn stopword_list_is_sorted() {
        assert!(STOPWORDS.windows(2).all(|w| w[0] < w[1]));
        assert!(is_stopword("the"));
        assert!(!is_stopword("apple"));
    }

    // Independent normal form: lowercase, hyphens as spaces, punctuation
    // padded with spaces, whitespace collapsed.
    fn normal_form(s: &str) -> String {
        let mut out = String::new();
        for c in s.chars().flat_map(char::to_lowercase) {
            if c.is_alphanumeric() {
                out.push(c);
            } else if c.is_whitespace() || c == '-' {
                out.push(' ');
            } else {
                out.push(' ');
                out.push(c);
                out.push(' ');
            }
        }
        out.split_whitespace().collect::<Vec<_>>().join(" ")
    }

    proptest! {
        #[test]
        fn detokenize_round_trips(s in "[a-zA-Z0-9 .,!?'\\-\\t\\n]{0,60}") {
            let mut vocab = Vocabulary::new();
            let tok = Tokenizer::default();
            let ids = tok.encode(&mut vocab, &s).unwrap();
            prop_assert!(ids.iter().all(|&t| t as usize >= RESERVED));
            prop_assert_eq!(detokenize(&vocab, &ids), normal_form(&s));
        }

        #[test]
        fn encoding_is_deterministic(s in "\\PC{0,40}") {
            let tok = Tokenizer::default();
            let mut a = Vocabulary::new();
            let mut b = Vocabulary::new();
            prop_assert_eq!(tok.encode(&mut a, &s).unwrap(), tok.encode(&mut b, &s).unwrap());
            prop_assert_eq!(a, b);
        }
    }
}
