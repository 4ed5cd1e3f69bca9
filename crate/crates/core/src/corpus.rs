//! Document ingestion, tokenization and vocabulary construction.
//!
//! Spans are expressed in `char` offsets (Unicode scalar values) into the
//! original document text, so that `text.chars().skip(start).take(end - start)`
//! lowercased reproduces the token surface.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CorpusError;

/// Half-open `[start, end)` character offsets into a document's text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// One word occurrence.
///
/// `word_id` is `None` until the vocabulary is built; afterwards `None` means
/// the token is stopped (stoplisted or below the document-frequency floor)
/// and never reaches the engine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub word_id: Option<usize>,
    pub surface: String,
    pub span: Span,
}

impl Token {
    pub fn is_stopped(&self) -> bool {
        self.word_id.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

/// A single social-media comment.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub doc_id: String,
    pub thread_id: String,
    pub author: Option<String>,
    pub timestamp: Option<String>,
    pub geo: Option<GeoPoint>,
    pub text: String,
    pub tokens: Vec<Token>,
}

impl Document {
    /// Builds a document and tokenizes its text. Word ids stay unresolved.
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Self {
            doc_id: doc_id.into(),
            thread_id: String::new(),
            author: None,
            timestamp: None,
            geo: None,
            text,
            tokens,
        }
    }

    /// Number of characters in the text, i.e. the upper bound for spans.
    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    /// Substring of the text covered by `span`.
    pub fn slice(&self, span: Span) -> String {
        self.text
            .chars()
            .skip(span.start)
            .take(span.len())
            .collect()
    }

    /// Indices of tokens overlapping `span`.
    pub fn tokens_in(&self, span: Span) -> impl Iterator<Item = usize> + '_ {
        self.tokens
            .iter()
            .enumerate()
            .filter(move |(_, t)| t.span.overlaps(&span))
            .map(|(i, _)| i)
    }

    /// Count of tokens that carry a vocabulary word.
    pub fn live_token_count(&self) -> usize {
        self.tokens.iter().filter(|t| !t.is_stopped()).count()
    }
}

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '\u{2019}'
}

/// Splits text into lowercased alphanumeric runs.
///
/// A single apostrophe is kept inside a token when it sits between two
/// letters ("don't", "o'neil"); anywhere else it acts as a separator.
pub fn tokenize(text: &str) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if !chars[i].is_alphanumeric() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() {
            let c = chars[i];
            let inner_apostrophe = is_apostrophe(c)
                && i > start
                && chars[i - 1].is_alphabetic()
                && chars.get(i + 1).is_some_and(|n| n.is_alphabetic());
            if c.is_alphanumeric() || inner_apostrophe {
                i += 1;
            } else {
                break;
            }
        }
        let surface: String = chars[start..i].iter().collect::<String>().to_lowercase();
        tokens.push(Token {
            word_id: None,
            surface,
            span: Span::new(start, i),
        });
    }
    tokens
}

/// Sorted word list with document frequencies.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocabulary {
    words: Vec<String>,
    doc_freq: Vec<usize>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn from_parts(words: Vec<String>, doc_freq: Vec<usize>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self {
            words,
            doc_freq,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn doc_freq(&self) -> &[usize] {
        &self.doc_freq
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }
}

/// Corpus-level preprocessing options.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSettings {
    #[serde(default)]
    pub stoplist: BTreeSet<String>,
    #[serde(default = "default_min_df")]
    pub min_df: usize,
}

fn default_min_df() -> usize {
    1
}

impl Default for CorpusSettings {
    fn default() -> Self {
        Self {
            stoplist: BTreeSet::new(),
            min_df: 1,
        }
    }
}

/// Builds the vocabulary and resolves every token's `word_id`.
pub fn build_vocabulary(
    documents: &mut [Document],
    stoplist: &BTreeSet<String>,
    min_df: usize,
) -> Result<Vocabulary, CorpusError> {
    let min_df = min_df.max(1);
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in documents.iter() {
        let seen: HashSet<&str> = doc.tokens.iter().map(|t| t.surface.as_str()).collect();
        for w in seen {
            *df.entry(w).or_default() += 1;
        }
    }
    let (words, doc_freq): (Vec<String>, Vec<usize>) = df
        .into_iter()
        .filter(|(w, n)| *n >= min_df && !stoplist.contains(*w))
        .map(|(w, n)| (w.to_owned(), n))
        .unzip();
    if words.is_empty() {
        return Err(CorpusError::EmptyVocabulary);
    }
    let vocab = Vocabulary::from_parts(words, doc_freq);
    for doc in documents.iter_mut() {
        for tok in &mut doc.tokens {
            tok.word_id = vocab.id(&tok.surface);
        }
    }
    Ok(vocab)
}

/// Resolves token ids of documents against an existing vocabulary.
pub fn resolve_tokens(documents: &mut [Document], vocab: &Vocabulary) {
    for doc in documents {
        for tok in &mut doc.tokens {
            tok.word_id = vocab.id(&tok.surface);
        }
    }
}

#[derive(Deserialize)]
struct RawRecord {
    text: String,
    #[serde(default)]
    doc_id: Option<String>,
    #[serde(default)]
    thread_id: Option<String>,
    #[serde(default)]
    author: Option<String>,
    #[serde(default)]
    timestamp: Option<String>,
    #[serde(default)]
    geo: Option<[f64; 2]>,
}

#[derive(Serialize)]
struct OutRecord<'a> {
    doc_id: &'a str,
    thread_id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    author: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    timestamp: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    geo: Option<[f64; 2]>,
    text: &'a str,
}

fn content_id(line_no: usize, text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    let hex: String = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
    format!("L{line_no}-{hex}")
}

/// Parses a JSON Lines corpus. Blank lines are skipped but still counted.
pub fn ingest_jsonl<R: BufRead>(reader: R) -> Result<Vec<Document>, CorpusError> {
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.split(b'\n').enumerate() {
        let line_no = idx + 1;
        let bytes = line.map_err(|e| CorpusError::Io(e.to_string()))?;
        let line = std::str::from_utf8(&bytes).map_err(|_| CorpusError::Parse {
            line: line_no,
            message: "invalid UTF-8".into(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let doc_id = raw
            .doc_id
            .unwrap_or_else(|| content_id(line_no, &raw.text));
        if !seen.insert(doc_id.clone()) {
            return Err(CorpusError::DuplicateId(doc_id));
        }
        let mut doc = Document::new(doc_id, raw.text);
        doc.thread_id = raw.thread_id.unwrap_or_default();
        doc.author = raw.author;
        doc.timestamp = raw.timestamp;
        doc.geo = raw.geo.map(|[lat, lon]| GeoPoint { lat, lon });
        docs.push(doc);
    }
    Ok(docs)
}

/// Serializes documents back to JSON Lines with explicit ids, so that
/// re-ingesting yields the same documents.
pub fn write_jsonl<W: std::io::Write>(documents: &[Document], mut out: W) -> std::io::Result<()> {
    for doc in documents {
        let rec = OutRecord {
            doc_id: &doc.doc_id,
            thread_id: &doc.thread_id,
            author: doc.author.as_deref(),
            timestamp: doc.timestamp.as_deref(),
            geo: doc.geo.map(|g| [g.lat, g.lon]),
            text: &doc.text,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Documents plus the vocabulary they were resolved against.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub vocab: Vocabulary,
    pub settings: CorpusSettings,
}

impl Corpus {
    pub fn build(mut documents: Vec<Document>, settings: CorpusSettings) -> Result<Self, CorpusError> {
        let vocab = build_vocabulary(&mut documents, &settings.stoplist, settings.min_df)?;
        Ok(Self {
            documents,
            vocab,
            settings,
        })
    }

    /// Appends documents, rejecting ids already present, and rebuilds the vocabulary.
    pub fn extend(&mut self, docs: Vec<Document>) -> Result<(), CorpusError> {
        let existing: HashSet<&str> = self.documents.iter().map(|d| d.doc_id.as_str()).collect();
        if let Some(dup) = docs.iter().find(|d| existing.contains(d.doc_id.as_str())) {
            return Err(CorpusError::DuplicateId(dup.doc_id.clone()));
        }
        let mut all = self.documents.clone();
        all.extend(docs);
        let vocab = build_vocabulary(&mut all, &self.settings.stoplist, self.settings.min_df)?;
        self.documents = all;
        self.vocab = vocab;
        Ok(())
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.doc_id == doc_id)
    }

    pub fn position(&self, doc_id: &str) -> Option<usize> {
        self.documents.iter().position(|d| d.doc_id == doc_id)
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }
}
