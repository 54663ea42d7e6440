use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use super::{ClozeRecord, Example, PAD, PLACEHOLDER, UNKNOWN};
use crate::error::{NseError, Result};

/// Token ↔ id map. Ids 0, 1 and 2 are reserved for padding, the query
/// placeholder and unknown tokens; the rest follow descending frequency with
/// lexicographic tie-breaking.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const PAD_ID: usize = 0;
    pub const PLACEHOLDER_ID: usize = 1;
    pub const UNKNOWN_ID: usize = 2;

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(NseError::invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        let reserved = [PAD, PLACEHOLDER, UNKNOWN];
        if tokens.len() < 3 || tokens[..3] != reserved {
            return Err(NseError::invalid("vocabulary must start with the reserved symbols"));
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or the unknown id.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNKNOWN_ID)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(UNKNOWN)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, record: &ClozeRecord, source: impl Into<String>) -> Result<Example> {
        let example = Example {
            document: record.document().map(|t| self.id(t)).collect(),
            query: record.query.iter().map(|t| self.id(t)).collect(),
            candidates: record.candidates.iter().map(|t| self.id(t)).collect(),
            answer: self.id(&record.answer),
            source: source.into(),
        };
        example.validate()?;
        Ok(example)
    }

    /// Encodes records labelled `<split>:<index>`, warning once about any
    /// whose candidates are missing from the document.
    pub fn encode_all(&self, records: &[ClozeRecord], split: &str) -> Result<Vec<Example>> {
        let examples: Vec<Example> = records
            .iter()
            .enumerate()
            .map(|(i, r)| self.encode(r, format!("{split}:{i}")))
            .collect::<Result<_>>()?;
        let absent = examples.iter().filter(|e| !e.absent_candidates().is_empty()).count();
        if absent > 0 {
            log::warn!("{split}: {absent} examples have candidates absent from the document");
        }
        Ok(examples)
    }

    pub fn to_text(&self) -> String {
        self.tokens.iter().enumerate().map(|(i, t)| format!("{t}\t{i}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| NseError::invalid(format!("vocabulary line {}: expected token<TAB>id", n + 1)))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| NseError::invalid(format!("vocabulary line {}: bad id {id:?}", n + 1)))?;
            if id != tokens.len() {
                return Err(NseError::invalid(format!("vocabulary line {}: ids must be consecutive", n + 1)));
            }
            tokens.push(tok.to_string());
        }
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| NseError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&fs::read_to_string(path).map_err(|e| NseError::io(path, e))?)
    }
}

/// Builds a vocabulary over documents, queries and candidates. Tokens seen
/// fewer than `min_count` times map to the unknown id, except candidates and
/// answers, which are always kept.
pub fn build_vocab(records: &[ClozeRecord], min_count: usize) -> Result<Vocabulary> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut protected: BTreeSet<&str> = BTreeSet::new();
    for r in records {
        for t in r.document().chain(&r.query).chain(&r.candidates) {
            *counts.entry(t).or_default() += 1;
        }
        protected.extend(r.candidates.iter().map(String::as_str));
        protected.insert(&r.answer);
    }
    let reserved = [PAD, PLACEHOLDER, UNKNOWN];
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, c)| !reserved.contains(t) && (*c >= min_count || protected.contains(t)))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tokens = reserved
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
        .collect();
    Vocabulary::from_tokens(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(doc: &str, query: &str, answer: &str, cands: &[&str]) -> ClozeRecord {
        let split = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
        ClozeRecord {
            sentences: vec![split(doc)],
            query: split(query),
            answer: answer.into(),
            candidates: cands.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn ids_follow_frequency_then_lexicographic_order() {
        let v = build_vocab(&[rec("a b a c", "XXXXX a", "b", &["b", "c"])], 1).unwrap();
        // a:3, b:2, c:2
        assert_eq!(&v.tokens()[3..], ["a", "b", "c"]);
        assert_eq!(v.id("a"), 3);
        assert_eq!(v.id("zzz"), Vocabulary::UNKNOWN_ID);
        assert_eq!(v.id(PLACEHOLDER), Vocabulary::PLACEHOLDER_ID);
    }

    #[test]
    fn rare_tokens_become_unknown_but_candidates_survive() {
        let v = build_vocab(&[rec("x x y Tom", "XXXXX x", "Tom", &["Tom", "Ann"])], 2).unwrap();
        assert_eq!(v.id("y"), Vocabulary::UNKNOWN_ID);
        assert_ne!(v.id("Ann"), Vocabulary::UNKNOWN_ID);
        assert_ne!(v.id("Tom"), Vocabulary::UNKNOWN_ID);
        assert_ne!(v.id("x"), Vocabulary::UNKNOWN_ID);
    }

    #[test]
    fn encoding_maps_tokens_and_validates() {
        let r = rec("Tom saw Ann", "XXXXX ran", "Tom", &["Tom", "Ann"]);
        let v = build_vocab(std::slice::from_ref(&r), 1).unwrap();
        let e = v.encode(&r, "t:0").unwrap();
        assert_eq!(e.document.len(), 3);
        assert_eq!(e.query[0], Vocabulary::PLACEHOLDER_ID);
        assert_eq!(e.candidates[e.answer_index()], v.id("Tom"));
        assert!(e.absent_candidates().is_empty());
    }

    #[test]
    fn persistence_round_trips() {
        let v = build_vocab(&[rec("a b c d", "XXXXX", "a", &["a"])], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.tsv");
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
        assert!(Vocabulary::from_text("a\t0\n").is_err());
        assert!(Vocabulary::from_text("<pad>\t0\nXXXXX\t2\n").is_err());
    }
}
