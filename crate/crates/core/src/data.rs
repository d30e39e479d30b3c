//! Tokenization, dataset ingestion, truncation and batching.
//!
//! Dataset files are JSON lines, one user record per line:
//!
//! ```text
//! {"user_id": "u1",
//!  "history": [{"headline": "...", "body": "..."}],
//!  "current": {"body": "..."},
//!  "reference_headline": "..."}
//! ```
//!
//! `current.headline` is optional and ignored by the model.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const SEP: TokenId = 4;
pub const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>"];

fn is_sentence_end(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// Lowercased words, split on whitespace and punctuation, grouped into
/// sentences ended by `.`, `!` or `?`. Empty sentences are dropped.
pub fn sentences(text: &str) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut sentence = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            sentence.push(std::mem::take(&mut word));
        }
        if is_sentence_end(c) && !sentence.is_empty() {
            out.push(std::mem::take(&mut sentence));
        }
    }
    if !word.is_empty() {
        sentence.push(word);
    }
    if !sentence.is_empty() {
        out.push(sentence);
    }
    out
}

pub fn words(text: &str) -> Vec<String> {
    sentences(text).into_iter().flatten().collect()
}

/// Word spans of each sentence, as ranges into [`words`].
pub fn sentence_spans(text: &str) -> Vec<Range<usize>> {
    let mut start = 0;
    sentences(text)
        .iter()
        .map(|s| {
            let r = start..start + s.len();
            start = r.end;
            r
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
}

impl Vocab {
    /// Keeps the `max_size` most frequent words (excluding the reserved
    /// block). Ties go to the lexicographically smaller word.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Vocab> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for w in words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size);
        Ok(Vocab::from_tokens(ranked.into_iter().map(|(w, _)| w)))
    }

    /// Builds a vocab from regular tokens in id order (after the reserved block).
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Vocab {
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens);
        let token_to_id = id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab {
            id_to_token,
            token_to_id,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.id_to_token.get(id).map(String::as_str).unwrap_or("<unk>")
    }

    /// Regular tokens in id order.
    pub fn regular_tokens(&self) -> &[String] {
        &self.id_to_token[RESERVED.len()..]
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        words(text).iter().map(|w| self.id(w)).collect()
    }

    pub fn encode_words(&self, words: &[String]) -> Vec<TokenId> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        self.decode_words(ids).join(" ")
    }

    pub fn decode_words(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawArticle {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub headline: String,
    pub body: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    pub user_id: String,
    pub history: Vec<RawArticle>,
    pub current: RawArticle,
    pub reference_headline: String,
}

impl RawRecord {
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.history
            .iter()
            .flat_map(|a| [a.headline.as_str(), a.body.as_str()])
            .chain([
                self.current.headline.as_str(),
                self.current.body.as_str(),
                self.reference_headline.as_str(),
            ])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Article {
    pub headline: Vec<TokenId>,
    pub body: Vec<TokenId>,
    pub headline_words: Vec<String>,
    pub body_words: Vec<String>,
    /// Sentence spans over `body_words`, clipped to the truncated body.
    pub body_sentences: Vec<Range<usize>>,
    pub raw_headline: String,
    pub raw_body: String,
}

impl Article {
    pub fn encode(raw: &RawArticle, vocab: &Vocab) -> Article {
        let headline_words = words(&raw.headline);
        let body_words = words(&raw.body);
        Article {
            headline: vocab.encode_words(&headline_words),
            body: vocab.encode_words(&body_words),
            headline_words,
            body_words,
            body_sentences: sentence_spans(&raw.body),
            raw_headline: raw.headline.clone(),
            raw_body: raw.body.clone(),
        }
    }

    fn truncate(&mut self, title_cap: usize, body_cap: usize) {
        self.headline.truncate(title_cap);
        self.headline_words.truncate(title_cap);
        self.body.truncate(body_cap);
        self.body_words.truncate(body_cap);
        self.body_sentences = self
            .body_sentences
            .iter()
            .filter(|r| r.start < body_cap)
            .map(|r| r.start..r.end.min(body_cap))
            .collect();
    }

    pub fn to_raw(&self) -> RawArticle {
        RawArticle {
            headline: self.raw_headline.clone(),
            body: self.raw_body.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserRecord {
    pub user_id: String,
    pub history: Vec<Article>,
    pub current: Article,
    pub reference: Vec<TokenId>,
    pub reference_words: Vec<String>,
    pub reference_text: String,
}

impl UserRecord {
    pub fn to_raw(&self) -> RawRecord {
        RawRecord {
            user_id: self.user_id.clone(),
            history: self.history.iter().map(Article::to_raw).collect(),
            current: RawArticle {
                headline: String::new(),
                body: self.current.raw_body.clone(),
            },
            reference_headline: self.reference_text.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Caps {
    pub history: usize,
    pub title: usize,
    pub body: usize,
}

impl Default for Caps {
    fn default() -> Self {
        Caps {
            history: 50,
            title: 30,
            body: 500,
        }
    }
}

/// Keeps the `caps.history` most recent history items (the tail of the
/// list) and hard-cuts every headline and body at the token caps.
pub fn truncate_record(mut record: UserRecord, caps: Caps) -> UserRecord {
    if record.history.len() > caps.history {
        let drop = record.history.len() - caps.history;
        record.history.drain(..drop);
    }
    for a in &mut record.history {
        a.truncate(caps.title, caps.body);
    }
    record.current.truncate(caps.title, caps.body);
    record.reference.truncate(caps.title);
    record.reference_words.truncate(caps.title);
    record
}

pub fn encode_record(raw: &RawRecord, vocab: &Vocab, caps: Caps) -> UserRecord {
    let reference_words = words(&raw.reference_headline);
    let record = UserRecord {
        user_id: raw.user_id.clone(),
        history: raw.history.iter().map(|a| Article::encode(a, vocab)).collect(),
        current: Article::encode(&raw.current, vocab),
        reference: vocab.encode_words(&reference_words),
        reference_words,
        reference_text: raw.reference_headline.clone(),
    };
    truncate_record(record, caps)
}

fn str_field(v: &Value, field: &'static str, path: &Path, line: usize) -> Result<String> {
    match v.get(field) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("field `{field}` must be a string"),
        }),
        None => Err(Error::Schema {
            path: path.to_path_buf(),
            line,
            field,
        }),
    }
}

fn article_field(v: &Value, path: &Path, line: usize, need_headline: bool) -> Result<RawArticle> {
    if !v.is_object() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: "article must be an object".into(),
        });
    }
    let headline = if need_headline {
        str_field(v, "headline", path, line)?
    } else {
        match v.get("headline") {
            Some(Value::String(s)) => s.clone(),
            _ => String::new(),
        }
    };
    Ok(RawArticle {
        headline,
        body: str_field(v, "body", path, line)?,
    })
}

fn parse_line(text: &str, path: &Path, line: usize) -> Result<RawRecord> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: e.to_string(),
    })?;
    let user_id = str_field(&v, "user_id", path, line)?;
    let history = match v.get("history") {
        Some(Value::Array(items)) => items
            .iter()
            .map(|a| article_field(a, path, line, true))
            .collect::<Result<Vec<_>>>()?,
        Some(_) => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: "field `history` must be an array".into(),
            })
        }
        None => {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                line,
                field: "history",
            })
        }
    };
    let current = match v.get("current") {
        Some(c) => article_field(c, path, line, false)?,
        None => {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                line,
                field: "current",
            })
        }
    };
    let reference_headline = str_field(&v, "reference_headline", path, line)?;
    if words(&reference_headline).is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: "reference_headline has no tokens".into(),
        });
    }
    Ok(RawRecord {
        user_id,
        history,
        current,
        reference_headline,
    })
}

/// Parses one record from a JSON string.
pub fn parse_record(text: &str) -> Result<RawRecord> {
    parse_line(text, Path::new("<record>"), 1)
}

/// Reads a JSONL dataset without tokenizing it. Blank lines are skipped.
pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<RawRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, path, i + 1))
        .collect()
}

pub fn load_dataset(path: impl AsRef<Path>, vocab: &Vocab, caps: Caps) -> Result<Vec<UserRecord>> {
    Ok(read_jsonl(path)?
        .iter()
        .map(|r| encode_record(r, vocab, caps))
        .collect())
}

pub fn to_jsonl(records: &[RawRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(path: impl AsRef<Path>, records: &[RawRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(to_jsonl(records).as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn vocab_from_records(records: &[RawRecord], max_size: usize) -> Result<Vocab> {
    Vocab::build(records.iter().flat_map(RawRecord::texts), max_size)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    /// Current-article bodies, right-padded with [`PAD`].
    pub bodies: Vec<Vec<TokenId>>,
    pub body_mask: Vec<Vec<u8>>,
    pub body_lengths: Vec<usize>,
    /// References wrapped as `[BOS] ... [EOS]`, right-padded.
    pub references: Vec<Vec<TokenId>>,
    pub reference_mask: Vec<Vec<u8>>,
    pub reference_lengths: Vec<usize>,
    pub histories: Vec<Vec<Article>>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.bodies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bodies.is_empty()
    }

    pub fn body(&self, i: usize) -> &[TokenId] {
        &self.bodies[i][..self.body_lengths[i]]
    }

    /// Reference tokens without the BOS/EOS wrapper.
    pub fn reference(&self, i: usize) -> &[TokenId] {
        &self.references[i][1..self.reference_lengths[i] - 1]
    }
}

fn pad_rows(rows: Vec<Vec<TokenId>>) -> (Vec<Vec<TokenId>>, Vec<Vec<u8>>, Vec<usize>) {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    let lengths: Vec<usize> = rows.iter().map(Vec::len).collect();
    let mask = lengths
        .iter()
        .map(|&l| (0..width).map(|j| u8::from(j < l)).collect())
        .collect();
    let padded = rows
        .into_iter()
        .map(|mut r| {
            r.resize(width, PAD);
            r
        })
        .collect();
    (padded, mask, lengths)
}

pub fn make_batch(records: &[&UserRecord]) -> Result<TrainingBatch> {
    if records.is_empty() {
        return Err(Error::EmptyBatch("make_batch on zero records"));
    }
    let (bodies, body_mask, body_lengths) = pad_rows(records.iter().map(|r| r.current.body.clone()).collect());
    let refs = records
        .iter()
        .map(|r| {
            let mut v = Vec::with_capacity(r.reference.len() + 2);
            v.push(BOS);
            v.extend_from_slice(&r.reference);
            v.push(EOS);
            v
        })
        .collect();
    let (references, reference_mask, reference_lengths) = pad_rows(refs);
    Ok(TrainingBatch {
        bodies,
        body_mask,
        body_lengths,
        references,
        reference_mask,
        reference_lengths,
        histories: records.iter().map(|r| r.history.clone()).collect(),
    })
}
