//! The hypothesis-test loop.
//!
//! Each step reads from both memories, composes a feature vector, writes
//! retrieved document content into the query memory, and then either gates
//! the update (query gating) or emits a termination score (adaptive
//! computation). The document memory is never modified.

use serde::{Deserialize, Serialize};

use crate::error::{NseError, Result};
use crate::layers::{lstm_step, mlp_forward, BoundLstm, BoundMlp, LstmState};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HaltingMode {
    QueryGating { steps: usize },
    AdaptiveComputation { steps: usize },
}

impl HaltingMode {
    pub fn gating(steps: usize) -> Result<Self> {
        Self::check(steps)?;
        Ok(HaltingMode::QueryGating { steps })
    }

    pub fn adaptive(steps: usize) -> Result<Self> {
        Self::check(steps)?;
        Ok(HaltingMode::AdaptiveComputation { steps })
    }

    fn check(steps: usize) -> Result<()> {
        if steps == 0 {
            return Err(NseError::invalid("the loop needs at least one step"));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        match *self {
            HaltingMode::QueryGating { steps } | HaltingMode::AdaptiveComputation { steps } => steps,
        }
    }

    pub fn is_adaptive(&self) -> bool {
        matches!(self, HaltingMode::AdaptiveComputation { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            HaltingMode::QueryGating { .. } => "gating",
            HaltingMode::AdaptiveComputation { .. } => "adaptive",
        }
    }
}

/// Query memory `[k, |Q|]` (evolves) and document memory `[k, |D|]` (fixed),
/// with the unpadded positions of each.
#[derive(Clone, Debug)]
pub struct MemoryPair {
    pub query: Var,
    pub doc: Var,
    pub query_keep: Vec<bool>,
    pub doc_keep: Vec<bool>,
}

#[derive(Clone, Copy, Debug)]
pub struct ControllerState {
    pub s_q: Var,
    pub s_d: Var,
    pub read: LstmState,
    pub write: LstmState,
}

/// Controller weights bound onto one tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundController {
    pub read: BoundLstm,
    pub compose: BoundMlp,
    pub write: BoundLstm,
    /// Termination projection `o: [k]`.
    pub termination: Var,
    pub k: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ReadOutput {
    pub r: Var,
    pub l_q: Var,
    pub s_q: Var,
    pub z_q: Var,
    pub l_d: Var,
    pub s_d: Var,
    pub read: LstmState,
}

/// Tape handles for everything one loop step produced.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub read: ReadOutput,
    pub c: Var,
    /// Query memory handed to the next step.
    pub query_memory: Var,
    pub g_q: Option<Var>,
    pub e: Option<Var>,
}

/// Plain-valued copy of one step for inspection and export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub l_q: Vec<f64>,
    pub l_d: Vec<f64>,
    pub z_q: Vec<f64>,
    pub c: Vec<f64>,
    pub g_q: Option<Vec<f64>>,
    pub e: Option<f64>,
    pub p: Option<f64>,
}

impl StepTrace {
    pub fn capture(tape: &Tape, step: &StepVars, p: Option<f64>) -> Self {
        let v = |x: Var| tape.value(x).data().to_vec();
        StepTrace {
            l_q: v(step.read.l_q),
            l_d: v(step.read.l_d),
            z_q: v(step.read.z_q),
            c: v(step.c),
            g_q: step.g_q.map(v),
            e: step.e.map(|e| tape.value(e).item()),
            p,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LoopOutput {
    pub steps: Vec<StepVars>,
    /// Halting distribution over steps (adaptive mode only).
    pub halting: Option<Vec<Var>>,
}

fn width(tape: &Tape, v: Var) -> usize {
    tape.value(v).len()
}

/// Seeds the controller: `s_q` from the query encoder's last state and `s_d`
/// from the document encoder's; both LSTM controllers start at zero.
pub fn init_states(tape: &mut Tape, query_last: Var, doc_last: Var, k: usize) -> Result<ControllerState> {
    if width(tape, query_last) != k || width(tape, doc_last) != k {
        return Err(NseError::invalid(format!(
            "initial states must have width {k}, got {} and {}",
            width(tape, query_last),
            width(tape, doc_last)
        )));
    }
    Ok(ControllerState {
        s_q: query_last,
        s_d: doc_last,
        read: LstmState::zeros(tape, k),
        write: LstmState::zeros(tape, k),
    })
}

fn check_memories(tape: &Tape, mem: &MemoryPair, k: usize) -> Result<()> {
    let (q, d) = (tape.value(mem.query).shape(), tape.value(mem.doc).shape());
    if q.len() != 2 || d.len() != 2 || q[0] != k || d[0] != k {
        return Err(NseError::invalid(format!("memories {q:?}, {d:?} do not have {k} rows")));
    }
    if q[1] != mem.query_keep.len() || d[1] != mem.doc_keep.len() {
        return Err(NseError::invalid("padding masks do not match memory lengths"));
    }
    Ok(())
}

pub fn read_step(tape: &mut Tape, state: &ControllerState, mem: &MemoryPair, p: &BoundController) -> Result<ReadOutput> {
    check_memories(tape, mem, p.k)?;
    let input = tape.concat(&[state.s_q, state.s_d])?;
    let read = lstm_step(tape, input, state.read, &p.read)?;
    let r = read.h;
    let l_q = tape.vecmat(r, mem.query)?;
    let a_q = tape.softmax(l_q, Some(&mem.query_keep))?;
    let s_q = tape.matvec(mem.query, a_q)?;
    let z_q = tape.sigmoid(l_q);
    // Padded query slots always keep their (zero) column.
    let z_q = tape.fill_masked(z_q, &mem.query_keep, 1.0)?;
    let l_d = tape.vecmat(s_q, mem.doc)?;
    let a_d = tape.softmax(l_d, Some(&mem.doc_keep))?;
    let s_d = tape.matvec(mem.doc, a_d)?;
    Ok(ReadOutput {
        r,
        l_q,
        s_q,
        z_q,
        l_d,
        s_d,
        read,
    })
}

pub fn compose_step(tape: &mut Tape, s_q: Var, s_d: Var, r: Var, p: &BoundMlp) -> Result<Var> {
    mlp_forward(tape, s_q, s_d, r, p)
}

/// Column `j` of the result is `m_prev[:, j] * z[j] + s_d * (1 - z[j])`.
pub fn write_memory(tape: &mut Tape, m_prev: Var, z: Var, s_d: Var) -> Result<Var> {
    if let Some(bad) = tape.value(z).data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(NseError::invalid(format!("memory key entry {bad} outside [0, 1]")));
    }
    let kept = tape.scale_columns(m_prev, z)?;
    let one_minus = tape.one_minus(z);
    let written = tape.outer(s_d, one_minus)?;
    tape.add(kept, written)
}

/// Query gating: `g = sigmoid(wᵀ m_prev)` from one write-LSTM step on `c`,
/// then column `j` becomes `m_new[:, j] (1 - g[j]) + m_prev[:, j] g[j]`.
///
/// The blend is evaluated as `m_prev + (m_new - m_prev) (1 - g)`, which makes
/// `g = 1` and `m_new = m_prev` exact identities.
pub fn gate_memory(
    tape: &mut Tape,
    m_new: Var,
    m_prev: Var,
    c: Var,
    write: LstmState,
    query_keep: &[bool],
    p: &BoundController,
) -> Result<(Var, Var, LstmState)> {
    let state = lstm_step(tape, c, write, &p.write)?;
    let scores = tape.vecmat(state.h, m_prev)?;
    let g = tape.sigmoid(scores);
    let g = tape.fill_masked(g, query_keep, 1.0)?;
    let gated = gate_blend(tape, m_new, m_prev, g)?;
    Ok((gated, g, state))
}

pub fn gate_blend(tape: &mut Tape, m_new: Var, m_prev: Var, g: Var) -> Result<Var> {
    let delta = tape.sub(m_new, m_prev)?;
    let open = tape.one_minus(g);
    let accepted = tape.scale_columns(delta, open)?;
    tape.add(m_prev, accepted)
}

/// `e = sigmoid(oᵀ w)` from one write-LSTM step on `c`.
pub fn termination_score(tape: &mut Tape, c: Var, o: Var, write: LstmState, p: &BoundController) -> Result<(Var, LstmState)> {
    if width(tape, o) != p.k || width(tape, c) != p.k {
        return Err(NseError::invalid("termination inputs must have width k"));
    }
    let state = lstm_step(tape, c, write, &p.write)?;
    let score = tape.dot(o, state.h)?;
    Ok((tape.sigmoid(score), state))
}

/// Halting probabilities over `steps`: `p_t = e_t ∏_{i<t} (1 - e_i)` for
/// `t < steps`, with the remainder assigned to the final step. Extra scores
/// beyond `steps - 1` are ignored.
pub fn halting_distribution(scores: &[f64], steps: usize) -> Result<Vec<f64>> {
    validate_scores(scores.iter().copied(), scores.len(), steps)?;
    let mut p = Vec::with_capacity(steps);
    let mut survive = 1.0;
    for &e in &scores[..steps - 1] {
        p.push(e * survive);
        survive *= 1.0 - e;
    }
    let used: f64 = p.iter().sum();
    p.push(1.0 - used);
    Ok(p)
}

fn validate_scores(scores: impl Iterator<Item = f64>, len: usize, steps: usize) -> Result<()> {
    if steps == 0 {
        return Err(NseError::invalid("halting distribution needs at least one step"));
    }
    if len + 1 < steps {
        return Err(NseError::invalid(format!("{len} termination scores cannot cover {steps} steps")));
    }
    for e in scores.take(steps - 1) {
        if !(0.0..=1.0).contains(&e) {
            return Err(NseError::invalid(format!("termination score {e} outside [0, 1]")));
        }
    }
    Ok(())
}

/// Taped version of [`halting_distribution`].
pub fn halting_distribution_taped(tape: &mut Tape, scores: &[Var], steps: usize) -> Result<Vec<Var>> {
    let values: Vec<f64> = scores.iter().map(|&e| tape.value(e).item()).collect();
    validate_scores(values.into_iter(), scores.len(), steps)?;
    let mut p = Vec::with_capacity(steps);
    let mut survive: Option<Var> = None;
    for &e in &scores[..steps - 1] {
        let pt = match survive {
            None => e,
            Some(s) => tape.mul(e, s)?,
        };
        p.push(pt);
        let stay = tape.one_minus(e);
        survive = Some(match survive {
            None => stay,
            Some(s) => tape.mul(s, stay)?,
        });
    }
    let last = match p.as_slice() {
        [] => tape.leaf(Tensor::scalar(1.0)),
        [first, rest @ ..] => {
            let mut used = *first;
            for &q in rest {
                used = tape.add(used, q)?;
            }
            tape.one_minus(used)
        }
    };
    p.push(last);
    Ok(p)
}

/// Runs the full loop for `mode.steps()` steps.
///
/// Gating mode: read → compose → write → gate each step. Adaptive mode:
/// read → compose → write with no gating, plus a termination score on every
/// step but the last, which receives the leftover halting mass.
pub fn forward_pass(
    tape: &mut Tape,
    mem: &MemoryPair,
    init: ControllerState,
    mode: HaltingMode,
    p: &BoundController,
) -> Result<LoopOutput> {
    let steps = mode.steps();
    let mut state = init;
    let mut query = mem.query;
    let mut out = Vec::with_capacity(steps);
    let mut scores = Vec::new();

    for t in 1..=steps {
        let current = MemoryPair {
            query,
            ..mem.clone()
        };
        let read = read_step(tape, &state, &current, p)?;
        let c = compose_step(tape, read.s_q, read.s_d, read.r, &p.compose)?;
        let written = write_memory(tape, query, read.z_q, read.s_d)?;
        let (next, g_q, e, write) = match mode {
            HaltingMode::QueryGating { .. } => {
                let (gated, g, w) = gate_memory(tape, written, query, c, state.write, &mem.query_keep, p)?;
                (gated, Some(g), None, w)
            }
            HaltingMode::AdaptiveComputation { .. } if t < steps => {
                let (e, w) = termination_score(tape, c, p.termination, state.write, p)?;
                scores.push(e);
                (written, None, Some(e), w)
            }
            HaltingMode::AdaptiveComputation { .. } => (written, None, None, state.write),
        };
        out.push(StepVars {
            read,
            c,
            query_memory: next,
            g_q,
            e,
        });
        state = ControllerState {
            s_q: read.s_q,
            s_d: read.s_d,
            read: read.read,
            write,
        };
        query = next;
    }

    let halting = if mode.is_adaptive() {
        Some(halting_distribution_taped(tape, &scores, steps)?)
    } else {
        None
    };
    Ok(LoopOutput { steps: out, halting })
}
