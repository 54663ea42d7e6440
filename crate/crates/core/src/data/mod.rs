//! Cloze examples: CBT-layout parsing, vocabulary, a synthetic task
//! generator, and length-sorted batching.

mod batching;
mod cbt;
mod synthetic;
mod vocab;

pub use batching::{make_epoch_batches, make_eval_batches, Batch};
pub use cbt::{parse_cbt_file, parse_cbt_str, to_cbt_string, write_cbt_file, ClozeRecord, CBT_CANDIDATES};
pub use synthetic::{frequency_baseline, generate_synthetic, SyntheticSpec, SyntheticSplits};
pub use vocab::{build_vocab, Vocabulary};

use serde::{Deserialize, Serialize};

use crate::error::{NseError, Result};
use crate::model::ReaderInput;

pub const PLACEHOLDER: &str = "XXXXX";
pub const PAD: &str = "<pad>";
pub const UNKNOWN: &str = "<unk>";

/// A `(document, query, candidates, answer)` tuple in token ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub document: Vec<usize>,
    pub query: Vec<usize>,
    pub candidates: Vec<usize>,
    pub answer: usize,
    pub source: String,
}

impl Example {
    pub fn answer_index(&self) -> usize {
        self.candidates
            .iter()
            .position(|&c| c == self.answer)
            .expect("answer is validated to be a candidate")
    }

    pub fn to_input(&self) -> Result<ReaderInput> {
        ReaderInput::new(
            self.document.clone(),
            self.query.clone(),
            self.candidates.clone(),
            self.answer_index(),
        )
    }

    /// Candidates that never occur in the document.
    pub fn absent_candidates(&self) -> Vec<usize> {
        self.candidates
            .iter()
            .copied()
            .filter(|c| !self.document.contains(c))
            .collect()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.document.is_empty() || self.query.is_empty() {
            return Err(NseError::invalid(format!("{}: empty document or query", self.source)));
        }
        if !self.candidates.contains(&self.answer) {
            return Err(NseError::invalid(format!("{}: answer is not a candidate", self.source)));
        }
        if self.candidates.contains(&Vocabulary::PAD_ID) {
            return Err(NseError::invalid(format!("{}: padding symbol used as a candidate", self.source)));
        }
        let holes = self.query.iter().filter(|&&t| t == Vocabulary::PLACEHOLDER_ID).count();
        if holes != 1 {
            return Err(NseError::invalid(format!(
                "{}: query has {holes} placeholders, expected exactly one",
                self.source
            )));
        }
        Ok(())
    }
}
