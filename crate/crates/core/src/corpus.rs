//! Documents, BIO labels and JSON-lines corpus ingestion.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{KpeError, Result};
use crate::eval::normalize_phrase;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Bio {
    B,
    I,
    O,
}

impl Bio {
    pub const ALL: [Bio; 3] = [Bio::B, Bio::I, Bio::O];

    /// Class index used by the tagger: B = 0, I = 1, O = 2.
    pub fn index(self) -> usize {
        match self {
            Bio::B => 0,
            Bio::I => 1,
            Bio::O => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Bio> {
        Bio::ALL.get(i).copied()
    }
}

impl fmt::Display for Bio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Bio::B => "B",
            Bio::I => "I",
            Bio::O => "O",
        };
        f.write_str(s)
    }
}

impl FromStr for Bio {
    type Err = KpeError;

    fn from_str(s: &str) -> Result<Self> {
        // Accept the common "B-KEY" style tags as well.
        match s.split('-').next().unwrap_or_default() {
            "B" | "b" => Ok(Bio::B),
            "I" | "i" => Ok(Bio::I),
            "O" | "o" => Ok(Bio::O),
            _ => Err(KpeError::InvalidArgument(format!("unknown BIO tag {s:?}"))),
        }
    }
}

/// Checks that no `I` follows an `O` or starts the sequence.
pub fn is_well_formed(labels: &[Bio]) -> bool {
    let mut prev = Bio::O;
    for &l in labels {
        if l == Bio::I && prev == Bio::O {
            return false;
        }
        prev = l;
    }
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub tokens: Vec<String>,
    pub gold_keyphrases: Option<Vec<String>>,
    pub labels: Option<Vec<Bio>>,
}

impl Document {
    pub fn new(id: impl Into<String>, tokens: Vec<String>) -> Self {
        Document {
            id: id.into(),
            tokens,
            gold_keyphrases: None,
            labels: None,
        }
    }

    pub fn with_keyphrases(mut self, keyphrases: Vec<String>) -> Self {
        self.gold_keyphrases = Some(keyphrases);
        self
    }

    pub fn with_labels(mut self, labels: Vec<Bio>) -> Result<Self> {
        if labels.len() != self.tokens.len() {
            return Err(KpeError::InvalidArgument(format!(
                "document {:?}: {} labels for {} tokens",
                self.id,
                labels.len(),
                self.tokens.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Projects the gold keyphrases onto the tokens as BIO labels.
    ///
    /// Tokens and phrases are compared after [`normalize_phrase`]. Scanning
    /// left to right, the longest gold phrase starting at the current token
    /// wins; every occurrence is labeled. Tokens that normalize to nothing
    /// (bare punctuation) never take part in a match.
    pub fn derive_bio_labels(mut self) -> Self {
        let Some(gold) = &self.gold_keyphrases else {
            return self;
        };
        let phrases: Vec<Vec<String>> = {
            let mut seen = HashSet::new();
            gold.iter()
                .map(|p| normalize_phrase(p))
                .filter(|p| !p.is_empty() && seen.insert(p.clone()))
                .map(|p| p.split(' ').map(str::to_owned).collect())
                .collect()
        };
        let words: Vec<Vec<String>> = self
            .tokens
            .iter()
            .map(|t| {
                normalize_phrase(t)
                    .split_whitespace()
                    .map(str::to_owned)
                    .collect()
            })
            .collect();

        let mut labels = vec![Bio::O; self.tokens.len()];
        let mut i = 0;
        while i < words.len() {
            let longest = phrases
                .iter()
                .filter_map(|p| match_at(&words, i, p))
                .max();
            match longest {
                Some(end) => {
                    labels[i] = Bio::B;
                    labels[i + 1..end].fill(Bio::I);
                    i = end;
                }
                None => i += 1,
            }
        }
        self.labels = Some(labels);
        self
    }
}

/// Returns the exclusive end of a token span starting at `start` whose
/// normalized words spell out `phrase` exactly.
fn match_at(words: &[Vec<String>], start: usize, phrase: &[String]) -> Option<usize> {
    let mut consumed = 0;
    for (j, token_words) in words.iter().enumerate().skip(start) {
        if token_words.is_empty() {
            return None;
        }
        let rest = &phrase[consumed..];
        if token_words.len() > rest.len() || rest[..token_words.len()] != token_words[..] {
            return None;
        }
        consumed += token_words.len();
        if consumed == phrase.len() {
            return Some(j + 1);
        }
    }
    None
}

/// Splits raw text on whitespace and detaches leading and trailing
/// punctuation characters as tokens of their own.
pub fn tokenize(text: &str) -> Vec<String> {
    let is_punct = |c: char| c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace());
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let leading: Vec<char> = chunk.chars().take_while(|&c| is_punct(c)).collect();
        if leading.len() == chunk.chars().count() {
            tokens.extend(leading.iter().map(|c| c.to_string()));
            continue;
        }
        let trailing: Vec<char> = {
            let mut t: Vec<char> = chunk.chars().rev().take_while(|&c| is_punct(c)).collect();
            t.reverse();
            t
        };
        let lead_bytes: usize = leading.iter().map(|c| c.len_utf8()).sum();
        let trail_bytes: usize = trailing.iter().map(|c| c.len_utf8()).sum();
        tokens.extend(leading.iter().map(|c| c.to_string()));
        tokens.push(chunk[lead_bytes..chunk.len() - trail_bytes].to_owned());
        tokens.extend(trailing.iter().map(|c| c.to_string()));
    }
    tokens
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl SplitName {
    /// Guesses the split from a file name such as `inspec-train.jsonl`.
    pub fn guess(path: &Path) -> SplitName {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().to_lowercase())
            .unwrap_or_default();
        if stem.contains("train") {
            SplitName::Train
        } else if stem.contains("valid") || stem.contains("dev") {
            SplitName::Validation
        } else {
            SplitName::Test
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplit {
    pub name: SplitName,
    documents: Vec<Document>,
}

impl CorpusSplit {
    pub fn new(name: SplitName, documents: Vec<Document>) -> Result<Self> {
        let mut ids = HashSet::new();
        for d in &documents {
            if !ids.insert(d.id.as_str()) {
                return Err(KpeError::DuplicateId(d.id.clone()));
            }
        }
        Ok(CorpusSplit { name, documents })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn into_documents(self) -> Vec<Document> {
        self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    #[default]
    Jsonl,
}

impl FromStr for CorpusFormat {
    type Err = KpeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            other => Err(KpeError::InvalidArgument(format!("unknown corpus format {other:?}"))),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    #[serde(default)]
    tokens: Option<Vec<String>>,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    keyphrases: Option<Vec<String>>,
    #[serde(default)]
    tags: Option<Vec<String>>,
}

/// Parses one JSON-lines record into a document, deriving BIO labels from
/// keyphrases when tags are not given.
pub fn parse_record(line: &str) -> std::result::Result<Document, String> {
    let rec: Record = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let tokens = match (rec.tokens, rec.text) {
        (Some(t), _) => t,
        (None, Some(text)) => tokenize(&text),
        (None, None) => return Err("record has neither `tokens` nor `text`".into()),
    };
    let mut doc = Document::new(rec.id, tokens);
    if let Some(kp) = rec.keyphrases {
        doc = doc.with_keyphrases(kp);
    }
    match rec.tags {
        Some(tags) => {
            let labels = tags
                .iter()
                .map(|t| t.parse::<Bio>())
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.to_string())?;
            doc = doc.with_labels(labels).map_err(|e| e.to_string())?;
        }
        None if doc.gold_keyphrases.is_some() => doc = doc.derive_bio_labels(),
        None => {}
    }
    Ok(doc)
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<CorpusSplit> {
    match format {
        CorpusFormat::Jsonl => {}
    }
    let text = fs::read_to_string(path)?;
    let mut docs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc = parse_record(line).map_err(|message| KpeError::Load {
            path: path.to_owned(),
            line: i + 1,
            message,
        })?;
        docs.push(doc);
    }
    if docs.is_empty() {
        return Err(KpeError::EmptyCorpus {
            path: path.to_owned(),
        });
    }
    CorpusSplit::new(SplitName::guess(path), docs)
}

/// Serializes a document back to the JSON-lines record shape.
pub fn to_record(doc: &Document) -> serde_json::Value {
    let mut obj = serde_json::Map::new();
    obj.insert("id".into(), doc.id.clone().into());
    obj.insert("tokens".into(), doc.tokens.clone().into());
    if let Some(kp) = &doc.gold_keyphrases {
        obj.insert("keyphrases".into(), kp.clone().into());
    }
    if let Some(labels) = &doc.labels {
        let tags: Vec<String> = labels.iter().map(ToString::to_string).collect();
        obj.insert("tags".into(), tags.into());
    }
    serde_json::Value::Object(obj)
}
