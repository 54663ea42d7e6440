use rand::seq::SliceRandom;

use super::{Example, Vocabulary};
use crate::error::{NseError, Result};
use crate::model::ReaderInput;
use crate::numerics::{derive_seed, seeded_rng};

/// Examples padded to a shared document length and a shared query length.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Indices into the example list the batch was drawn from.
    pub examples: Vec<usize>,
    pub rows: Vec<ReaderInput>,
}

fn pad(seq: &[usize], len: usize) -> (Vec<usize>, Vec<bool>) {
    let mut ids = seq.to_vec();
    ids.resize(len, Vocabulary::PAD_ID);
    let mut keep = vec![true; seq.len()];
    keep.resize(len, false);
    (ids, keep)
}

impl Batch {
    pub fn new(examples: &[Example], indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(NseError::invalid("empty batch"));
        }
        let dl = indices.iter().map(|&i| examples[i].document.len()).max().unwrap_or(0);
        let ql = indices.iter().map(|&i| examples[i].query.len()).max().unwrap_or(0);
        let rows = indices
            .iter()
            .map(|&i| {
                let e = &examples[i];
                let (doc, doc_keep) = pad(&e.document, dl);
                let (query, query_keep) = pad(&e.query, ql);
                ReaderInput::padded(doc, doc_keep, query, query_keep, e.candidates.clone(), e.answer_index())
            })
            .collect::<Result<_>>()?;
        Ok(Batch { examples: indices.to_vec(), rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn doc_len(&self) -> usize {
        self.rows[0].document.len()
    }

    pub fn query_len(&self) -> usize {
        self.rows[0].query.len()
    }
}

/// Training batches for one epoch.
///
/// A pool of `pool_size` examples is drawn without replacement from those not
/// yet used this epoch, sorted by document length, and its `n` shortest
/// examples form a batch; the rest go back. Once fewer than `pool_size`
/// remain the pool shrinks to what is left, and fewer than `n` leftovers are
/// dropped.
pub fn make_epoch_batches(examples: &[Example], n: usize, pool_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if n == 0 || pool_size < n {
        return Err(NseError::invalid(format!("need 1 <= n <= pool_size, got n={n}, pool_size={pool_size}")));
    }
    let mut rng = seeded_rng(derive_seed(seed, &[epoch]));
    let mut remaining: Vec<usize> = (0..examples.len()).collect();
    let mut batches = Vec::new();
    while remaining.len() >= n {
        remaining.shuffle(&mut rng);
        let take = pool_size.min(remaining.len());
        let mut pool: Vec<usize> = remaining.split_off(remaining.len() - take);
        pool.sort_by_key(|&i| examples[i].document.len());
        let rest = pool.split_off(n);
        remaining.extend(rest);
        batches.push(Batch::new(examples, &pool)?);
    }
    Ok(batches)
}

/// Deterministic evaluation batches: examples sorted by document length
/// (stable), cut into runs of `n`; the last batch may be short.
pub fn make_eval_batches(examples: &[Example], n: usize) -> Result<Vec<Batch>> {
    if n == 0 {
        return Err(NseError::invalid("batch size must be positive"));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by_key(|&i| examples[i].document.len());
    order.chunks(n).map(|c| Batch::new(examples, c)).collect()
}
