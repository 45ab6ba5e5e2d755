//! Task-3 triples, unlabeled word lists, tag schema and character vocabulary.
//!
//! Task-3 lines look like
//!
//! ```text
//! kocama<TAB>pos=N,poss=PSS1S,case=ESS,num=SG<TAB>kocamda
//! ```
//!
//! Words are NFC-normalized and treated as sequences of Unicode scalar
//! values. Case is preserved.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::error::{MsvedError, Result};

/// Label standing for "this word does not carry the category".
pub const NONE_LABEL: &str = "NONE";

pub fn normalize(word: &str) -> String {
    word.nfc().collect()
}

/// A (source word, target labels, target word) triple.
///
/// `labels` keeps the explicit `key=value` pairs in file order; use
/// [`TagSchema::label_vector`] for the complete NONE-filled vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub source: String,
    pub labels: Vec<(String, String)>,
    pub target: String,
}

impl LabeledExample {
    pub fn label_string(&self) -> String {
        format_labels(&self.labels)
    }

    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{}", self.source, self.label_string(), self.target)
    }
}

pub fn format_labels(labels: &[(String, String)]) -> String {
    labels
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// Parses the comma-separated `key=value` field.
pub fn parse_label_string(field: &str) -> std::result::Result<Vec<(String, String)>, String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for pair in field.split(',') {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| format!("malformed label `{pair}`, expected key=value"))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() || value.contains('=') {
            return Err(format!("malformed label `{pair}`, expected key=value"));
        }
        if !seen.insert(key.to_string()) {
            return Err(format!("category `{key}` given twice"));
        }
        out.push((normalize(key), normalize(value)));
    }
    Ok(out)
}

/// Parses task-3 text. Blank lines are skipped; anything else must have
/// exactly three tab-separated, nonempty fields.
pub fn parse_task3_str(text: &str) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 3 {
            return Err(MsvedError::Parse {
                line,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let source = normalize(fields[0].trim());
        let target = normalize(fields[2].trim());
        if source.is_empty() || target.is_empty() {
            return Err(MsvedError::Parse {
                line,
                message: "empty word".into(),
            });
        }
        let labels = parse_label_string(fields[1].trim()).map_err(|message| MsvedError::Parse { line, message })?;
        out.push(LabeledExample { source, labels, target });
    }
    Ok(out)
}

pub fn parse_task3(path: impl AsRef<Path>) -> Result<Vec<LabeledExample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| MsvedError::io(format!("reading {}", path.display()), e))?;
    parse_task3_str(&text)
}

pub fn write_task3(examples: &[LabeledExample]) -> String {
    let mut s = String::new();
    for ex in examples {
        s.push_str(&ex.to_line());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    TaskData,
    ExternalList,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnlabeledWord {
    pub form: String,
    pub provenance: Provenance,
}

/// One word per line; normalized, deduplicated keeping first occurrence,
/// truncated to `limit`.
pub fn parse_unlabeled_str(text: &str, limit: usize, provenance: Provenance) -> Vec<UnlabeledWord> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for line in text.lines() {
        if out.len() >= limit {
            break;
        }
        let form = normalize(line.trim());
        if form.is_empty() || !seen.insert(form.clone()) {
            continue;
        }
        out.push(UnlabeledWord { form, provenance });
    }
    out
}

pub fn load_unlabeled(path: impl AsRef<Path>, limit: usize) -> Result<Vec<UnlabeledWord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| MsvedError::io(format!("reading {}", path.display()), e))?;
    Ok(parse_unlabeled_str(&text, limit, Provenance::ExternalList))
}

/// Surface forms of labeled triples (sources then targets, deduplicated),
/// usable as unlabeled task data.
pub fn task_words(examples: &[LabeledExample]) -> Vec<UnlabeledWord> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for ex in examples {
        for w in [&ex.source, &ex.target] {
            if seen.insert(w.clone()) {
                out.push(UnlabeledWord {
                    form: w.clone(),
                    provenance: Provenance::TaskData,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagCategory {
    pub name: String,
    /// `labels[0]` is always [`NONE_LABEL`].
    pub labels: Vec<String>,
}

/// Ordered tag categories with their label sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagSchema {
    pub categories: Vec<TagCategory>,
}

impl TagSchema {
    /// Categories and labels in first-occurrence order.
    pub fn from_examples(examples: &[LabeledExample]) -> Result<Self> {
        if examples.is_empty() {
            return Err(MsvedError::Schema("no labeled examples".into()));
        }
        let mut categories: Vec<TagCategory> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        for ex in examples {
            for (key, value) in &ex.labels {
                let k = *index.entry(key.clone()).or_insert_with(|| {
                    categories.push(TagCategory {
                        name: key.clone(),
                        labels: vec![NONE_LABEL.to_string()],
                    });
                    categories.len() - 1
                });
                let labels = &mut categories[k].labels;
                if !labels.contains(value) {
                    labels.push(value.clone());
                }
            }
        }
        let schema = TagSchema { categories };
        schema.validate()?;
        Ok(schema)
    }

    /// Checks uniqueness of names and the presence of NONE in every category.
    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(MsvedError::Schema("schema has no tag categories".into()));
        }
        let mut names = HashSet::new();
        for cat in &self.categories {
            if !names.insert(cat.name.as_str()) {
                return Err(MsvedError::Schema(format!("duplicate category `{}`", cat.name)));
            }
            if cat.labels.first().map(String::as_str) != Some(NONE_LABEL) {
                return Err(MsvedError::Schema(format!("category `{}` lacks a leading NONE label", cat.name)));
            }
            let mut labels = HashSet::new();
            for l in &cat.labels {
                if !labels.insert(l.as_str()) {
                    return Err(MsvedError::Schema(format!("duplicate label `{l}` in `{}`", cat.name)));
                }
            }
        }
        Ok(())
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.categories.iter().map(|c| c.labels.len()).collect()
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c.name == name)
    }

    /// Complete label vector, NONE for every category not mentioned.
    pub fn label_vector(&self, labels: &[(String, String)]) -> Result<Vec<usize>> {
        let mut out = vec![0; self.categories.len()];
        for (key, value) in labels {
            let k = self
                .category_index(key)
                .ok_or_else(|| MsvedError::UnknownCategory(key.clone()))?;
            let j = self.categories[k]
                .labels
                .iter()
                .position(|l| l == value)
                .ok_or_else(|| MsvedError::UnknownLabel {
                    category: key.clone(),
                    label: value.clone(),
                })?;
            out[k] = j;
        }
        Ok(out)
    }

    /// Explicit (non-NONE) pairs for a label vector, in schema order.
    pub fn label_pairs(&self, vector: &[usize]) -> Vec<(String, String)> {
        self.categories
            .iter()
            .zip(vector)
            .filter(|(_, &j)| j != 0)
            .map(|(c, &j)| (c.name.clone(), c.labels[j].clone()))
            .collect()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("schema serializes");
        hex(&Sha256::digest(&json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIALS: usize = 4;
pub const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Character inventory. Indices `0..4` are PAD, BOS, EOS, UNK; symbols follow.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    specials: Vec<String>,
    symbols: Vec<String>,
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = String;

    fn try_from(r: VocabRepr) -> std::result::Result<Self, String> {
        if r.specials != SPECIAL_NAMES {
            return Err(format!("unexpected special symbols {:?}", r.specials));
        }
        let mut symbols = Vec::with_capacity(r.symbols.len());
        for s in r.symbols {
            let mut chars = s.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => symbols.push(c),
                _ => return Err(format!("vocabulary symbol `{s}` is not a single character")),
            }
        }
        Ok(Vocab::from_symbols(symbols))
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr {
            specials: SPECIAL_NAMES.iter().map(|s| s.to_string()).collect(),
            symbols: v.symbols.iter().map(|c| c.to_string()).collect(),
        }
    }
}

impl Vocab {
    pub fn from_symbols(symbols: Vec<char>) -> Self {
        let index = symbols.iter().enumerate().map(|(i, &c)| (c, i + NUM_SPECIALS)).collect();
        Vocab { symbols, index }
    }

    /// Symbols in first-occurrence order over the given words.
    pub fn from_words<'w>(words: impl IntoIterator<Item = &'w str>) -> Self {
        let mut seen = HashSet::new();
        let mut symbols = Vec::new();
        for w in words {
            for c in w.chars() {
                if seen.insert(c) {
                    symbols.push(c);
                }
            }
        }
        Self::from_symbols(symbols)
    }

    /// Total size including the special symbols.
    pub fn len(&self) -> usize {
        self.symbols.len() + NUM_SPECIALS
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    /// Unknown characters map to UNK.
    pub fn encode(&self, word: &str) -> Vec<usize> {
        word.chars().map(|c| self.index.get(&c).copied().unwrap_or(UNK)).collect()
    }

    /// Drops special symbols.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= NUM_SPECIALS)
            .filter_map(|&i| self.symbols.get(i - NUM_SPECIALS))
            .collect()
    }
}

/// Schema from the labeled data only; vocabulary from every word of both
/// corpora.
pub fn build_schema_and_vocab(labeled: &[LabeledExample], unlabeled: &[UnlabeledWord]) -> Result<(TagSchema, Vocab)> {
    let schema = TagSchema::from_examples(labeled)?;
    let words = labeled
        .iter()
        .flat_map(|ex| [ex.source.as_str(), ex.target.as_str()])
        .chain(unlabeled.iter().map(|w| w.form.as_str()));
    Ok((schema, Vocab::from_words(words)))
}
