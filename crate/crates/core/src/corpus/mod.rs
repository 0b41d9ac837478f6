//! Vocabulary construction, tokenization, and corpus/query/qrels I/O.

mod synthetic;

pub use synthetic::{gen_synthetic, SyntheticConfig, SyntheticData};

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;

/// Surface forms of the reserved tokens, in id order.
pub const RESERVED: [&str; 5] = ["[pad]", "[unk]", "[cls]", "[sep]", "[mask]"];

pub fn is_reserved(id: u32) -> bool {
    id < RESERVED.len() as u32
}

/// Bijective token/id map with fixed reserved ids PAD=0, UNK=1, CLS=2,
/// SEP=3, MASK=4.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Build from a word list (reserved tokens are prepended). Word order
    /// determines ids.
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Keep the `max_size - 5` most frequent lowercased word tokens from
    /// the corpus; frequency ties break lexicographically.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I, max_size: usize) -> Result<Self> {
        if max_size < 6 {
            return Err(Error::Config(format!(
                "vocabulary max_size must be at least 6, got {max_size}"
            )));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for w in split_words(text) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Data("empty corpus: no tokens to build a vocabulary".into()));
        }
        let mut by_freq: Vec<(String, u64)> = counts.into_iter().collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        by_freq.truncate(max_size - RESERVED.len());
        Vocabulary::from_words(by_freq.into_iter().map(|(w, _)| w))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    /// Token id for a word; unknown words map to UNK.
    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    /// One token per line; line number = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r = BufReader::new(std::fs::File::open(path)?);
        let mut lines = Vec::new();
        for line in r.lines() {
            lines.push(line?);
        }
        for (i, want) in RESERVED.iter().enumerate() {
            if lines.get(i).map(String::as_str) != Some(*want) {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    detail: format!("reserved token {i} must be `{want}`"),
                });
            }
        }
        Vocabulary::from_words(lines.into_iter().skip(RESERVED.len()))
    }
}

/// Lowercased word tokens: maximal alphanumeric runs; whitespace and
/// punctuation act as boundaries and are dropped.
pub fn split_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(|s| s.to_lowercase())
        .collect()
}

/// A document as a token-id sequence wrapped in CLS/SEP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizedDoc {
    pub doc_id: String,
    pub text: String,
    pub tokens: Vec<u32>,
}

impl TokenizedDoc {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // CLS/SEP are always present
    }

    /// Tokens between CLS and SEP.
    pub fn interior(&self) -> &[u32] {
        &self.tokens[1..self.tokens.len() - 1]
    }

    pub fn with_id(mut self, id: &str) -> Self {
        self.doc_id = id.to_string();
        self
    }
}

/// Lowercase, split on whitespace/punctuation boundaries, wrap in
/// CLS/SEP, and truncate the body to `max_len - 2` tokens.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenizedDoc {
    assert!(max_len >= 3, "max_len must be at least 3, got {max_len}");
    let mut tokens = vec![CLS];
    for w in split_words(text).into_iter().take(max_len - 2) {
        tokens.push(vocab.id(&w));
    }
    tokens.push(SEP);
    TokenizedDoc {
        doc_id: String::new(),
        text: text.to_string(),
        tokens,
    }
}

/// Render token ids as text: PAD/CLS/SEP/MASK are dropped, UNK renders
/// as its surface form, and tokens are joined with single spaces.
pub fn detokenize(tokens: &[u32], vocab: &Vocabulary) -> String {
    let words: Vec<&str> = tokens
        .iter()
        .filter(|&&t| t == UNK || !is_reserved(t))
        .map(|&t| vocab.token(t))
        .collect();
    words.join(" ")
}

/// Build a well-formed [`TokenizedDoc`] from raw token ids produced by a
/// decoder: the surface text comes from [`detokenize`].
pub fn doc_from_tokens(doc_id: &str, tokens: Vec<u32>, vocab: &Vocabulary) -> TokenizedDoc {
    TokenizedDoc {
        doc_id: doc_id.to_string(),
        text: detokenize(&tokens, vocab),
        tokens,
    }
}

// ── Raw file formats ────────────────────────────────────────────────────

/// One corpus line: JSON object with `_id`, `title`, `text`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RawDoc {
    #[serde(rename = "_id")]
    pub id: String,
    pub title: String,
    pub text: String,
}

/// One query line: JSON object with `_id`, `text`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RawQuery {
    #[serde(rename = "_id")]
    pub id: String,
    pub text: String,
}

/// Relevance judgments: graded (query, doc) pairs.
#[derive(Clone, Debug, Default)]
pub struct Qrels {
    by_query: HashMap<String, Vec<(String, u32)>>,
}

impl Qrels {
    pub fn from_rows(rows: Vec<(String, String, u32)>) -> Self {
        let mut by_query: HashMap<String, Vec<(String, u32)>> = HashMap::new();
        for (q, d, g) in rows {
            by_query.entry(q).or_default().push((d, g));
        }
        Qrels { by_query }
    }

    pub fn relevant(&self, query_id: &str) -> &[(String, u32)] {
        self.by_query.get(query_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> u32 {
        self.relevant(query_id)
            .iter()
            .find(|(d, _)| d == doc_id)
            .map(|&(_, g)| g)
            .unwrap_or(0)
    }

    pub fn num_queries(&self) -> usize {
        self.by_query.len()
    }

    /// Every qrel must reference an existing query and doc id.
    pub fn validate(&self, queries: &[RawQuery], corpus: &Corpus) -> Result<()> {
        let qids: std::collections::HashSet<&str> = queries.iter().map(|q| q.id.as_str()).collect();
        for (q, docs) in &self.by_query {
            if !qids.contains(q.as_str()) {
                return Err(Error::Data(format!("qrels reference unknown query id `{q}`")));
            }
            for (d, _) in docs {
                if corpus.get(d).is_none() {
                    return Err(Error::Data(format!("qrels reference unknown doc id `{d}`")));
                }
            }
        }
        Ok(())
    }
}

/// Tokenized corpus with id lookup. Read-only after construction.
#[derive(Clone, Debug)]
pub struct Corpus {
    docs: Vec<TokenizedDoc>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn from_raw(raw: &[RawDoc], vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        let mut docs = Vec::with_capacity(raw.len());
        let mut index = HashMap::new();
        for r in raw {
            if index.insert(r.id.clone(), docs.len()).is_some() {
                return Err(Error::Data(format!("duplicate doc id `{}`", r.id)));
            }
            docs.push(tokenize(&r.text, vocab, max_len).with_id(&r.id));
        }
        Ok(Corpus { docs, index })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[TokenizedDoc] {
        &self.docs
    }

    pub fn get(&self, doc_id: &str) -> Option<&TokenizedDoc> {
        self.index.get(doc_id).map(|&i| &self.docs[i])
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.display().to_string(),
            detail: format!("line {}: {e}", lineno + 1),
        })?);
    }
    Ok(out)
}

/// Tab-separated qrels with a BEIR-style header line.
pub fn write_qrels_tsv(path: &Path, rows: &[(String, String, u32)]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "query-id\tcorpus-id\tscore")?;
    for (q, d, g) in rows {
        writeln!(w, "{q}\t{d}\t{g}")?;
    }
    Ok(())
}

pub fn read_qrels_tsv(path: &Path) -> Result<Qrels> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut rows = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if lineno == 0 || line.trim().is_empty() {
            continue; // header
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: format!("line {}: expected 3 tab-separated fields", lineno + 1),
            });
        }
        let grade: u32 = parts[2].parse().map_err(|_| Error::Format {
            path: path.display().to_string(),
            detail: format!("line {}: bad grade `{}`", lineno + 1, parts[2]),
        })?;
        rows.push((parts[0].to_string(), parts[1].to_string(), grade));
    }
    Ok(Qrels::from_rows(rows))
}
