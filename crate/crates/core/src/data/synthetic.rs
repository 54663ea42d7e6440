use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ClozeRecord, Example, CBT_CANDIDATES, PLACEHOLDER};
use crate::error::{NseError, Result};
use crate::numerics::{derive_seed, seeded_rng};

/// Parameters of the entity-slot cloze task.
///
/// Documents are `subject relation object .` sentences over sampled entities.
/// Each (subject, relation) pair occurs at most once per document and every
/// object is distinct, so the copied query sentence has a unique answer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub entities: usize,
    /// Number of relation words.
    pub relations: usize,
    /// Maximum sentences per document; each document has between
    /// `max(candidates, doc_sentences / 2)` and this many.
    pub doc_sentences: usize,
    pub candidates: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            entities: 20,
            relations: 8,
            doc_sentences: 12,
            candidates: CBT_CANDIDATES,
            train: 2000,
            dev: 200,
            test: 200,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(NseError::invalid(m));
        if self.candidates == 0 {
            return fail("need at least one candidate".into());
        }
        if self.candidates > self.entities {
            return fail(format!(
                "infeasible spec: {} candidates but only {} entities",
                self.candidates, self.entities
            ));
        }
        if self.doc_sentences < self.candidates {
            return fail(format!(
                "infeasible spec: documents of {} sentences cannot hold {} distinct candidates",
                self.doc_sentences, self.candidates
            ));
        }
        if self.doc_sentences > self.entities {
            return fail(format!(
                "infeasible spec: {} sentences need as many distinct objects but only {} entities exist",
                self.doc_sentences, self.entities
            ));
        }
        if self.entities < 2 || self.relations == 0 {
            return fail("need at least two entities and one relation".into());
        }
        if self.doc_sentences > (self.entities - 1) * self.relations {
            return fail("too few (subject, relation) pairs for the document length".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticSplits {
    pub train: Vec<ClozeRecord>,
    pub dev: Vec<ClozeRecord>,
    pub test: Vec<ClozeRecord>,
}

const RELATIONS: [&str; 16] = [
    "likes", "sees", "helps", "calls", "follows", "trusts", "visits", "teaches", "fears", "meets",
    "thanks", "greets", "warns", "finds", "feeds", "joins",
];

fn entity_name(i: usize) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let (c, v) = (C.len(), V.len());
    let mut name = String::new();
    let mut r = i;
    for _ in 0..2 {
        name.push(C[r % c] as char);
        r /= c;
        name.push(V[r % v] as char);
        r /= v;
    }
    if r > 0 {
        name.push_str(&r.to_string());
    }
    let mut chars = name.chars();
    let first = chars.next().unwrap().to_ascii_uppercase();
    std::iter::once(first).chain(chars).collect()
}

fn relation_name(i: usize) -> String {
    match RELATIONS.get(i) {
        Some(r) => r.to_string(),
        None => format!("{}{}", RELATIONS[i % RELATIONS.len()], i / RELATIONS.len()),
    }
}

fn one_record(spec: &SyntheticSpec, entities: &[String], relations: &[String], rng: &mut impl Rng) -> Result<ClozeRecord> {
    let lo = spec.candidates.max(spec.doc_sentences / 2);
    let n = rng.gen_range(lo..=spec.doc_sentences);
    let objects: Vec<usize> = rand::seq::index::sample(rng, spec.entities, n).into_vec();
    let mut used = HashSet::new();
    let mut sentences = Vec::with_capacity(n);
    for &obj in &objects {
        let mut tries = 0;
        let (subj, rel) = loop {
            let s = rng.gen_range(0..spec.entities);
            let r = rng.gen_range(0..spec.relations);
            if s != obj && used.insert((s, r)) {
                break (s, r);
            }
            tries += 1;
            if tries > 10_000 {
                return Err(NseError::invalid("could not sample distinct (subject, relation) pairs"));
            }
        };
        sentences.push(vec![entities[subj].clone(), relations[rel].clone(), entities[obj].clone(), ".".into()]);
    }
    let q = rng.gen_range(0..n);
    let mut query = sentences[q].clone();
    query[2] = PLACEHOLDER.to_string();
    let answer = entities[objects[q]].clone();
    let mut others: Vec<usize> = objects.iter().copied().filter(|&o| o != objects[q]).collect();
    others.shuffle(rng);
    let mut candidates: Vec<String> = others[..spec.candidates - 1].iter().map(|&o| entities[o].clone()).collect();
    candidates.push(answer.clone());
    candidates.shuffle(rng);
    Ok(ClozeRecord { sentences, query, answer, candidates })
}

/// Generates train/dev/test splits; a pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticSplits> {
    spec.validate()?;
    let entities: Vec<String> = (0..spec.entities).map(entity_name).collect();
    let relations: Vec<String> = (0..spec.relations).map(relation_name).collect();
    let split = |tag: u64, count: usize| -> Result<Vec<ClozeRecord>> {
        let mut rng = seeded_rng(derive_seed(spec.seed, &[tag]));
        (0..count).map(|_| one_record(spec, &entities, &relations, &mut rng)).collect()
    };
    Ok(SyntheticSplits {
        train: split(0, spec.train)?,
        dev: split(1, spec.dev)?,
        test: split(2, spec.test)?,
    })
}

/// Accuracy of picking the candidate that occurs most often in the document,
/// ties going to the earliest candidate.
pub fn frequency_baseline(examples: &[Example]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let correct = examples
        .iter()
        .filter(|e| {
            let count = |c: usize| e.document.iter().filter(|&&t| t == c).count();
            let mut best = 0;
            for (i, &c) in e.candidates.iter().enumerate() {
                if count(c) > count(e.candidates[best]) {
                    best = i;
                }
            }
            best == e.answer_index()
        })
        .count();
    correct as f64 / examples.len() as f64
}
