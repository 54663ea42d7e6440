//! The full reader: shared embeddings, query and document encoders, the
//! controller weights, and per-example forward/backward.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NseError, Result};
use crate::hypothesis::{forward_pass, init_states, BoundController, HaltingMode, LoopOutput, MemoryPair, StepTrace};
use crate::layers::{bilstm_encode, BiLstmEncoder, DropoutSpec, EmbeddingTable, LstmParams, MlpParams, INIT_RANGE};
use crate::numerics::{seeded_rng, uniform_tensor, Gradients, ParamId, ParamStore, Tape, Tensor, Var};
use crate::prediction::{cross_entropy_loss, mixture_prediction, pointer_sum, AnswerMask, PredictionDistribution};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Controller width; each encoder direction has `k / 2` units.
    pub k: usize,
    /// Seed `s_q` from the document encoder and `s_d` from the query encoder
    /// instead of the other way round.
    #[serde(default)]
    pub crossed_state_init: bool,
}

/// One example as the reader sees it: token ids, unpadded-position masks,
/// per-candidate answer masks and the gold candidate index.
#[derive(Clone, Debug, PartialEq)]
pub struct ReaderInput {
    pub document: Vec<usize>,
    pub doc_keep: Vec<bool>,
    pub query: Vec<usize>,
    pub query_keep: Vec<bool>,
    pub candidates: Vec<usize>,
    pub answer_masks: Vec<AnswerMask>,
    pub gold: usize,
}

impl ReaderInput {
    pub fn new(document: Vec<usize>, query: Vec<usize>, candidates: Vec<usize>, gold: usize) -> Result<Self> {
        let (dl, ql) = (document.len(), query.len());
        Self::padded(document, vec![true; dl], query, vec![true; ql], candidates, gold)
    }

    pub fn padded(
        document: Vec<usize>,
        doc_keep: Vec<bool>,
        query: Vec<usize>,
        query_keep: Vec<bool>,
        candidates: Vec<usize>,
        gold: usize,
    ) -> Result<Self> {
        if candidates.is_empty() || gold >= candidates.len() {
            return Err(NseError::invalid(format!(
                "gold index {gold} not among {} candidates",
                candidates.len()
            )));
        }
        if doc_keep.len() != document.len() || query_keep.len() != query.len() {
            return Err(NseError::invalid("padding mask lengths differ from sequences"));
        }
        let masked_doc: Vec<usize> = document
            .iter()
            .zip(&doc_keep)
            .map(|(&t, &k)| if k { t } else { usize::MAX })
            .collect();
        let answer_masks = candidates.iter().map(|&c| AnswerMask::new(&masked_doc, c)).collect();
        Ok(ReaderInput {
            document,
            doc_keep,
            query,
            query_keep,
            candidates,
            answer_masks,
            gold,
        })
    }
}

/// Tape handles produced by one example's forward pass.
#[derive(Clone, Debug)]
pub struct ExampleForward {
    pub memory: MemoryPair,
    pub looped: LoopOutput,
    /// `P_t(a)` for every step `t` and candidate `a`.
    pub per_step_probs: Vec<Vec<Var>>,
    pub candidate_probs: Vec<Var>,
    pub loss: Var,
}

/// Plain-valued result of an evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub distribution: PredictionDistribution,
    pub loss: f64,
    pub steps: Vec<StepTrace>,
    pub halting: Option<Vec<f64>>,
    /// `softmax(l_d)` per step, padding excluded.
    pub doc_attention: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NseModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embedding: EmbeddingTable,
    pub query_encoder: BiLstmEncoder,
    pub doc_encoder: BiLstmEncoder,
    pub read: LstmParams,
    pub compose: MlpParams,
    pub write: LstmParams,
    pub termination: ParamId,
}

impl NseModel {
    /// Fresh parameters, uniform in `[-0.1, 0.1)`, in a fixed creation order.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.vocab_size == 0 || config.embed_dim == 0 {
            return Err(NseError::invalid("vocabulary and embedding sizes must be positive"));
        }
        let k = config.k;
        let mut rng = seeded_rng(seed);
        let mut store = ParamStore::new();
        let embedding = EmbeddingTable::new(&mut store, "embedding", config.vocab_size, config.embed_dim, &mut rng);
        let query_encoder = BiLstmEncoder::new(&mut store, "query_encoder", config.embed_dim, k, &mut rng)?;
        let doc_encoder = BiLstmEncoder::new(&mut store, "doc_encoder", config.embed_dim, k, &mut rng)?;
        let read = LstmParams::new(&mut store, "read", 2 * k, k, &mut rng);
        let compose = MlpParams::new(&mut store, "compose", k, &mut rng);
        let write = LstmParams::new(&mut store, "write", k, k, &mut rng);
        let termination = store.add("termination", uniform_tensor(&[k], -INIT_RANGE, INIT_RANGE, &mut rng));
        Ok(NseModel {
            config,
            store,
            embedding,
            query_encoder,
            doc_encoder,
            read,
            compose,
            write,
            termination,
        })
    }

    /// Rebuilds the layout for `config` and adopts `store`, which must carry
    /// the same parameter names and shapes in the same order.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if model.store.len() != store.len() {
            return Err(NseError::invalid(format!(
                "expected {} parameter tensors, found {}",
                model.store.len(),
                store.len()
            )));
        }
        for ((_, name_a, a), (_, name_b, b)) in model.store.iter().zip(store.iter()) {
            if name_a != name_b || a.shape() != b.shape() {
                return Err(NseError::invalid(format!(
                    "parameter {name_b} {:?} does not match expected {name_a} {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        model.store = store;
        Ok(model)
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    fn bind_controller(&self, tape: &mut Tape) -> BoundController {
        BoundController {
            read: self.read.bind(tape, &self.store),
            compose: self.compose.bind(tape, &self.store),
            write: self.write.bind(tape, &self.store),
            termination: tape.param(&self.store, self.termination),
            k: self.config.k,
        }
    }

    /// Encodes a right-padded sequence. Padded columns of the memory are zero.
    fn encode_side(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        keep: &[bool],
        encoder: &BiLstmEncoder,
        drop: DropoutSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Var)> {
        let real = keep.iter().take_while(|&&k| k).count();
        if keep[real..].iter().any(|&k| k) {
            return Err(NseError::invalid("padding must be a suffix of the sequence"));
        }
        let (memory, last) = bilstm_encode(tape, &self.store, &tokens[..real], encoder, &self.embedding, drop, rng)?;
        if real == tokens.len() {
            return Ok((memory, last));
        }
        let mut cols: Vec<Var> = (0..real).map(|j| tape.column(memory, j)).collect::<Result<_>>()?;
        let zero = tape.leaf(Tensor::zeros(&[self.config.k]));
        cols.resize(tokens.len(), zero);
        Ok((tape.stack_columns(&cols)?, last))
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        input: &ReaderInput,
        drop: DropoutSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<(MemoryPair, Var, Var)> {
        let (query, query_last) = self.encode_side(tape, &input.query, &input.query_keep, &self.query_encoder, drop, rng)?;
        let (doc, doc_last) = self.encode_side(tape, &input.document, &input.doc_keep, &self.doc_encoder, drop, rng)?;
        let mem = MemoryPair {
            query,
            doc,
            query_keep: input.query_keep.clone(),
            doc_keep: input.doc_keep.clone(),
        };
        Ok((mem, query_last, doc_last))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        input: &ReaderInput,
        mode: HaltingMode,
        drop: DropoutSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<ExampleForward> {
        let (memory, q_last, d_last) = self.encode(tape, input, drop, rng)?;
        let controller = self.bind_controller(tape);
        let (s_q0, s_d0) = if self.config.crossed_state_init {
            (d_last, q_last)
        } else {
            (q_last, d_last)
        };
        let init = init_states(tape, s_q0, s_d0, self.config.k)?;
        let looped = forward_pass(tape, &memory, init, mode, &controller)?;

        let mut per_step_probs = Vec::with_capacity(looped.steps.len());
        for step in &looped.steps {
            let probs = input
                .answer_masks
                .iter()
                .map(|m| pointer_sum(tape, step.read.l_d, m, &input.doc_keep))
                .collect::<Result<Vec<_>>>()?;
            per_step_probs.push(probs);
        }
        let candidate_probs = match &looped.halting {
            None => per_step_probs.last().expect("at least one step").clone(),
            Some(halting) => (0..input.candidates.len())
                .map(|a| {
                    let column: Vec<Var> = per_step_probs.iter().map(|p| p[a]).collect();
                    mixture_prediction(tape, &column, halting)
                })
                .collect::<Result<_>>()?,
        };
        let loss = cross_entropy_loss(tape, candidate_probs[input.gold])?;
        Ok(ExampleForward {
            memory,
            looped,
            per_step_probs,
            candidate_probs,
            loss,
        })
    }

    /// Evaluation pass with dropout off.
    pub fn predict(&self, input: &ReaderInput, mode: HaltingMode) -> Result<Prediction> {
        let mut tape = Tape::new();
        let mut rng = seeded_rng(0);
        let fwd = self.forward(&mut tape, input, mode, DropoutSpec::eval(), &mut rng)?;
        let probs: Vec<f64> = fwd.candidate_probs.iter().map(|&v| tape.value(v).item()).collect();
        let halting: Option<Vec<f64>> = fwd
            .looped
            .halting
            .as_ref()
            .map(|h| h.iter().map(|&v| tape.value(v).item()).collect());
        let steps = fwd
            .looped
            .steps
            .iter()
            .enumerate()
            .map(|(t, s)| StepTrace::capture(&tape, s, halting.as_ref().map(|h| h[t])))
            .collect();
        let doc_attention = fwd
            .looped
            .steps
            .iter()
            .map(|s| -> Result<Vec<f64>> {
                let a = tape.softmax(s.read.l_d, Some(&input.doc_keep))?;
                Ok(tape.value(a).data().to_vec())
            })
            .collect::<Result<_>>()?;
        Ok(Prediction {
            distribution: PredictionDistribution::new(probs)?,
            loss: tape.value(fwd.loss).item(),
            steps,
            halting,
            doc_attention,
        })
    }

    /// Loss and parameter gradients for one example.
    pub fn example_gradients(
        &self,
        input: &ReaderInput,
        mode: HaltingMode,
        drop: DropoutSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, input, mode, drop, rng)?;
        tape.backward(fwd.loss)?;
        let mut grads = Gradients::for_store(&self.store);
        tape.collect_param_grads(&mut grads);
        Ok((tape.value(fwd.loss).item(), grads))
    }

    /// Loss only, dropout off. Used by finite-difference checks.
    pub fn loss(&self, input: &ReaderInput, mode: HaltingMode) -> Result<f64> {
        let mut tape = Tape::new();
        let mut rng = seeded_rng(0);
        let fwd = self.forward(&mut tape, input, mode, DropoutSpec::eval(), &mut rng)?;
        Ok(tape.value(fwd.loss).item())
    }
}
