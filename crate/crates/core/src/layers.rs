//! Trainable building blocks: embedding table, LSTM cell, bidirectional
//! encoder, single-layer tanh MLP, inverted dropout.
//!
//! Parameters live in a [`ParamStore`]; each block keeps only [`ParamId`]s and
//! is bound onto a [`Tape`] once per forward pass.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{NseError, Result};
use crate::numerics::{uniform_tensor, ParamId, ParamStore, Tape, Tensor, Var};

/// Every parameter is drawn from uniform `[-INIT_RANGE, INIT_RANGE)`.
pub const INIT_RANGE: f64 = 0.1;

fn init(store: &mut ParamStore, name: String, shape: &[usize], rng: &mut ChaCha8Rng) -> ParamId {
    store.add(name, uniform_tensor(shape, -INIT_RANGE, INIT_RANGE, rng))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingTable {
    pub param: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new(store: &mut ParamStore, name: &str, rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let param = init(store, name.to_string(), &[rows, dim], rng);
        EmbeddingTable { param, rows, dim }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutSpec {
    pub rate: f64,
    pub training: bool,
}

impl DropoutSpec {
    pub fn eval() -> Self {
        DropoutSpec {
            rate: 0.0,
            training: false,
        }
    }

    pub fn train(rate: f64) -> Self {
        DropoutSpec { rate, training: true }
    }

    pub fn is_identity(&self) -> bool {
        !self.training || self.rate == 0.0
    }
}

/// Applies inverted dropout to `x`: survivors are scaled by `1 / (1 - rate)`.
pub fn dropout(tape: &mut Tape, x: Var, spec: DropoutSpec, rng: &mut ChaCha8Rng) -> Result<Var> {
    if spec.is_identity() {
        return Ok(x);
    }
    if !(0.0..1.0).contains(&spec.rate) {
        return Err(NseError::invalid(format!("dropout rate {} outside [0, 1)", spec.rate)));
    }
    let keep = 1.0 - spec.rate;
    let mask: Vec<f64> = (0..tape.value(x).len())
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    tape.mul_const(x, &mask)
}

/// Embeds `tokens` as a `[dim, len]` matrix, one column per token.
pub fn embed_sequence(
    tape: &mut Tape,
    store: &ParamStore,
    tokens: &[usize],
    table: &EmbeddingTable,
    drop: DropoutSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let e = tape.embed(store, table.param, tokens)?;
    dropout(tape, e, drop, rng)
}

/// Weights of one LSTM cell. Gate rows are stacked input, forget, output,
/// candidate, each `hidden` tall, acting on `[x; h_prev]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLstm {
    weight: Var,
    bias: Var,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(tape: &mut Tape, hidden: usize) -> Self {
        LstmState {
            h: tape.leaf(Tensor::zeros(&[hidden])),
            c: tape.leaf(Tensor::zeros(&[hidden])),
        }
    }
}

impl LstmParams {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = init(store, format!("{name}.weight"), &[4 * hidden, input + hidden], rng);
        let bias = init(store, format!("{name}.bias"), &[4 * hidden], rng);
        LstmParams {
            weight,
            bias,
            input,
            hidden,
        }
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BoundLstm {
        BoundLstm {
            weight: tape.param(store, self.weight),
            bias: tape.param(store, self.bias),
            input: self.input,
            hidden: self.hidden,
        }
    }
}

pub fn lstm_step(tape: &mut Tape, x: Var, prev: LstmState, p: &BoundLstm) -> Result<LstmState> {
    let (xi, hi, ci) = (tape.value(x).len(), tape.value(prev.h).len(), tape.value(prev.c).len());
    if xi != p.input || hi != p.hidden || ci != p.hidden {
        return Err(NseError::invalid(format!(
            "lstm widths x={xi} h={hi} c={ci}, expected x={} h={}",
            p.input, p.hidden
        )));
    }
    let h = p.hidden;
    let xh = tape.concat(&[x, prev.h])?;
    let pre = tape.matvec(p.weight, xh)?;
    let pre = tape.add(pre, p.bias)?;
    let gi = tape.slice(pre, 0, h)?;
    let gf = tape.slice(pre, h, h)?;
    let go = tape.slice(pre, 2 * h, h)?;
    let gc = tape.slice(pre, 3 * h, h)?;
    let i = tape.sigmoid(gi);
    let f = tape.sigmoid(gf);
    let o = tape.sigmoid(go);
    let cand = tape.tanh(gc);
    let keep = tape.mul(f, prev.c)?;
    let write = tape.mul(i, cand)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok(LstmState { h, c })
}

/// Forward and backward LSTMs of width `k / 2` each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BiLstmEncoder {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundBiLstm {
    pub forward: BoundLstm,
    pub backward: BoundLstm,
}

impl BiLstmEncoder {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if k == 0 || k % 2 != 0 {
            return Err(NseError::invalid(format!("encoder width k={k} must be even and positive")));
        }
        Ok(BiLstmEncoder {
            forward: LstmParams::new(store, &format!("{name}.fwd"), input, k / 2, rng),
            backward: LstmParams::new(store, &format!("{name}.bwd"), input, k / 2, rng),
        })
    }

    pub fn width(&self) -> usize {
        self.forward.hidden + self.backward.hidden
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BoundBiLstm {
        BoundBiLstm {
            forward: self.forward.bind(tape, store),
            backward: self.backward.bind(tape, store),
        }
    }
}

/// Runs both directions over the columns of `embedded: [dim, len]`.
///
/// Returns `(memory: [k, len], last_state: [k])` where column `j` of the
/// memory is `[h_fwd(j); h_bwd(j)]` and the last state is
/// `[h_fwd(len - 1); h_bwd(0)]`.
pub fn bilstm_over(tape: &mut Tape, embedded: Var, enc: &BoundBiLstm) -> Result<(Var, Var)> {
    let len = tape.value(embedded).cols();
    let cols: Vec<Var> = (0..len).map(|j| tape.column(embedded, j)).collect::<Result<_>>()?;

    let mut fwd = Vec::with_capacity(len);
    let mut state = LstmState::zeros(tape, enc.forward.hidden);
    for &x in &cols {
        state = lstm_step(tape, x, state, &enc.forward)?;
        fwd.push(state.h);
    }
    let mut bwd = vec![fwd[0]; len];
    let mut state = LstmState::zeros(tape, enc.backward.hidden);
    for j in (0..len).rev() {
        state = lstm_step(tape, cols[j], state, &enc.backward)?;
        bwd[j] = state.h;
    }
    let per_token: Vec<Var> = (0..len)
        .map(|j| tape.concat(&[fwd[j], bwd[j]]))
        .collect::<Result<_>>()?;
    let memory = tape.stack_columns(&per_token)?;
    let last = tape.concat(&[fwd[len - 1], bwd[0]])?;
    Ok((memory, last))
}

pub fn bilstm_encode(
    tape: &mut Tape,
    store: &ParamStore,
    tokens: &[usize],
    enc: &BiLstmEncoder,
    table: &EmbeddingTable,
    drop: DropoutSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, Var)> {
    if tokens.is_empty() {
        return Err(NseError::invalid("cannot encode an empty sequence"));
    }
    let embedded = embed_sequence(tape, store, tokens, table, drop, rng)?;
    let bound = enc.bind(tape, store);
    bilstm_over(tape, embedded, &bound)
}

/// `tanh(W [s_q; s_d; r] + b)` with `W: [k, 3k]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub width: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundMlp {
    weight: Var,
    bias: Var,
    pub width: usize,
}

impl MlpParams {
    pub fn new(store: &mut ParamStore, name: &str, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = init(store, format!("{name}.weight"), &[k, 3 * k], rng);
        let bias = init(store, format!("{name}.bias"), &[k], rng);
        MlpParams { weight, bias, width: k }
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BoundMlp {
        BoundMlp {
            weight: tape.param(store, self.weight),
            bias: tape.param(store, self.bias),
            width: self.width,
        }
    }
}

pub fn mlp_forward(tape: &mut Tape, s_q: Var, s_d: Var, r: Var, p: &BoundMlp) -> Result<Var> {
    for v in [s_q, s_d, r] {
        let n = tape.value(v).len();
        if n != p.width {
            return Err(NseError::invalid(format!("mlp input width {n}, expected {}", p.width)));
        }
    }
    let x = tape.concat(&[s_q, s_d, r])?;
    let y = tape.matvec(p.weight, x)?;
    let y = tape.add(y, p.bias)?;
    Ok(tape.tanh(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, seeded_rng, Gradients};

    fn zero_all(store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn embedding_lookup_without_dropout_is_exact_row() {
        let mut rng = seeded_rng(1);
        let mut store = ParamStore::new();
        let table = EmbeddingTable::new(&mut store, "emb", 10, 6, &mut rng);
        let mut tape = Tape::new();
        let e = embed_sequence(&mut tape, &store, &[7, 3], &table, DropoutSpec::train(0.0), &mut rng).unwrap();
        assert_eq!(tape.value(e).column(0), store.get(table.param).row(7).to_vec());
        assert_eq!(tape.value(e).column(1), store.get(table.param).row(3).to_vec());
        assert!(embed_sequence(&mut tape, &store, &[], &table, DropoutSpec::eval(), &mut rng).is_err());
        assert!(embed_sequence(&mut tape, &store, &[10], &table, DropoutSpec::eval(), &mut rng).is_err());
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let mut rng = seeded_rng(2);
        let mut store = ParamStore::new();
        store.add("emb", Tensor::matrix(1, 1, vec![0.37]).unwrap());
        let table = EmbeddingTable {
            param: store.id_of("emb").unwrap(),
            rows: 1,
            dim: 1,
        };
        let trials = 100_000;
        let mut total = 0.0;
        let mut seen_scaled = false;
        for _ in 0..trials {
            let mut tape = Tape::new();
            let e = embed_sequence(&mut tape, &store, &[0], &table, DropoutSpec::train(0.2), &mut rng).unwrap();
            let v = tape.value(e).item();
            assert!(v == 0.0 || (v - 0.37 / 0.8).abs() < 1e-15);
            seen_scaled |= v != 0.0;
            total += v;
        }
        let mean = total / trials as f64;
        assert!(seen_scaled);
        assert!((mean - 0.37).abs() / 0.37 < 0.01, "mean {mean}");
    }

    #[test]
    fn lstm_zero_params() {
        let mut rng = seeded_rng(3);
        let mut store = ParamStore::new();
        let p = LstmParams::new(&mut store, "cell", 3, 2, &mut rng);
        zero_all(&mut store);
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, &store);
        let x = tape.leaf(Tensor::vector(vec![0.4, -1.0, 2.0]));
        let s0 = LstmState::zeros(&mut tape, 2);
        let s1 = lstm_step(&mut tape, x, s0, &bound).unwrap();
        assert_eq!(tape.value(s1.h).data(), &[0.0, 0.0]);
        assert_eq!(tape.value(s1.c).data(), &[0.0, 0.0]);

        let prev = LstmState {
            h: tape.leaf(Tensor::vector(vec![0.3, 0.1])),
            c: tape.leaf(Tensor::vector(vec![1.5, -0.8])),
        };
        let s2 = lstm_step(&mut tape, x, prev, &bound).unwrap();
        assert_eq!(tape.value(s2.c).data(), &[0.75, -0.4]);
    }

    #[test]
    fn lstm_rejects_width_mismatch() {
        let mut rng = seeded_rng(3);
        let mut store = ParamStore::new();
        let p = LstmParams::new(&mut store, "cell", 3, 2, &mut rng);
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, &store);
        let x = tape.leaf(Tensor::vector(vec![0.4, -1.0]));
        let s0 = LstmState::zeros(&mut tape, 2);
        assert!(lstm_step(&mut tape, x, s0, &bound).is_err());
    }

    /// Finite-difference check of the cell output against every parameter
    /// entry, perturbing the store directly.
    #[test]
    fn lstm_parameter_gradients_match_finite_differences() {
        let mut rng = seeded_rng(4);
        let mut store = ParamStore::new();
        let p = LstmParams::new(&mut store, "cell", 3, 2, &mut rng);
        for id in [p.weight, p.bias] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= 5.0);
        }
        let x = Tensor::vector(vec![0.4, -1.0, 0.6]);
        let h0 = Tensor::vector(vec![0.2, -0.3]);
        let c0 = Tensor::vector(vec![0.5, 0.9]);
        let objective = |store: &ParamStore, grads: Option<&mut Gradients>| {
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape, store);
            let xv = tape.leaf(x.clone());
            let prev = LstmState {
                h: tape.leaf(h0.clone()),
                c: tape.leaf(c0.clone()),
            };
            let s = lstm_step(&mut tape, xv, prev, &bound).unwrap();
            let w = tape.leaf(Tensor::vector(vec![1.0, -2.0]));
            let loss = tape.dot(s.h, w).unwrap();
            if let Some(g) = grads {
                tape.backward(loss).unwrap();
                tape.collect_param_grads(g);
            }
            tape.value(loss).item()
        };
        let mut grads = Gradients::for_store(&store);
        objective(&store, Some(&mut grads));
        let eps = 1e-5;
        for id in [p.weight, p.bias] {
            let n = store.get(id).len();
            let analytic = grads.dense(id, n);
            for i in 0..n {
                let mut s = store.clone();
                s.get_mut(id).data_mut()[i] += eps;
                let up = objective(&s, None);
                s.get_mut(id).data_mut()[i] -= 2.0 * eps;
                let down = objective(&s, None);
                let numeric = (up - down) / (2.0 * eps);
                let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
                assert!((analytic[i] - numeric).abs() / denom < 1e-6, "{} [{i}]", store.name(id));
            }
        }
    }

    #[test]
    fn bilstm_shapes_and_single_token() {
        let mut rng = seeded_rng(5);
        let mut store = ParamStore::new();
        let table = EmbeddingTable::new(&mut store, "emb", 20, 5, &mut rng);
        let enc = BiLstmEncoder::new(&mut store, "enc", 5, 8, &mut rng).unwrap();
        let mut tape = Tape::new();
        let tokens = [1, 4, 2, 9, 9, 0, 13];
        let (m, last) = bilstm_encode(&mut tape, &store, &tokens, &enc, &table, DropoutSpec::eval(), &mut rng).unwrap();
        assert_eq!(tape.value(m).shape(), &[8, 7]);
        assert_eq!(tape.value(last).shape(), &[8]);

        let (m1, last1) = bilstm_encode(&mut tape, &store, &[3], &enc, &table, DropoutSpec::eval(), &mut rng).unwrap();
        assert_eq!(tape.value(m1).column(0), tape.value(last1).data().to_vec());

        assert!(bilstm_encode(&mut tape, &store, &[], &enc, &table, DropoutSpec::eval(), &mut rng).is_err());
        assert!(BiLstmEncoder::new(&mut store, "odd", 5, 7, &mut rng).is_err());
    }

    #[test]
    fn reversed_input_with_swapped_directions_mirrors_output() {
        let mut rng = seeded_rng(6);
        let mut store = ParamStore::new();
        let table = EmbeddingTable::new(&mut store, "emb", 12, 4, &mut rng);
        let enc = BiLstmEncoder::new(&mut store, "enc", 4, 6, &mut rng).unwrap();
        let swapped = BiLstmEncoder {
            forward: enc.backward,
            backward: enc.forward,
        };
        let tokens = vec![3, 1, 7, 7, 0, 11];
        let rev: Vec<usize> = tokens.iter().rev().copied().collect();
        let mut tape = Tape::new();
        let (a, _) = bilstm_encode(&mut tape, &store, &tokens, &enc, &table, DropoutSpec::eval(), &mut rng).unwrap();
        let (b, _) = bilstm_encode(&mut tape, &store, &rev, &swapped, &table, DropoutSpec::eval(), &mut rng).unwrap();
        let (a, b) = (tape.value(a).clone(), tape.value(b).clone());
        let len = tokens.len();
        for j in 0..len {
            let ca = a.column(j);
            let cb = b.column(len - 1 - j);
            assert_eq!(&ca[..3], &cb[3..]);
            assert_eq!(&ca[3..], &cb[..3]);
        }
    }

    #[test]
    fn every_column_sees_the_whole_sequence() {
        let mut rng = seeded_rng(7);
        let mut store = ParamStore::new();
        let table = EmbeddingTable::new(&mut store, "emb", 30, 4, &mut rng);
        let enc = BiLstmEncoder::new(&mut store, "enc", 4, 6, &mut rng).unwrap();
        for trial in 0..10 {
            let tokens: Vec<usize> = (0..6).map(|_| rng.gen_range(0..29)).collect();
            let pos = trial % tokens.len();
            let mut perturbed = tokens.clone();
            perturbed[pos] = 29;
            let mut tape = Tape::new();
            let (a, _) = bilstm_encode(&mut tape, &store, &tokens, &enc, &table, DropoutSpec::eval(), &mut rng).unwrap();
            let (b, _) = bilstm_encode(&mut tape, &store, &perturbed, &enc, &table, DropoutSpec::eval(), &mut rng).unwrap();
            for j in 0..tokens.len() {
                assert_ne!(tape.value(a).column(j), tape.value(b).column(j), "column {j} ignores token {pos}");
            }
        }
    }

    #[test]
    fn mlp_examples_and_gradients() {
        let mut rng = seeded_rng(8);
        let mut store = ParamStore::new();
        let mlp = MlpParams::new(&mut store, "mlp", 3, &mut rng);

        let mut zeroed = store.clone();
        zero_all(&mut zeroed);
        let mut tape = Tape::new();
        let bound = mlp.bind(&mut tape, &zeroed);
        let v = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let out = mlp_forward(&mut tape, v, v, v, &bound).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0; 3]);

        let bad = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(mlp_forward(&mut tape, v, bad, v, &bound).is_err());

        for id in [mlp.weight, mlp.bias] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= 20.0);
        }
        let x = Tensor::vector(vec![0.5, -1.0, 0.3, 0.9, -0.2, 0.4, -0.7, 0.1, 0.8]);
        let mut tape = Tape::new();
        let bound = mlp.bind(&mut tape, &store);
        let xv = tape.leaf(x.clone());
        let parts: Vec<Var> = (0..3).map(|i| tape.slice(xv, 3 * i, 3).unwrap()).collect();
        let out = mlp_forward(&mut tape, parts[0], parts[1], parts[2], &bound).unwrap();
        assert!(tape.value(out).data().iter().all(|v| v.abs() < 1.0));

        let report = grad_check(
            "mlp",
            |t, xv| {
                let bound = mlp.bind(t, &store);
                let parts: Vec<Var> = (0..3).map(|i| t.slice(xv, 3 * i, 3)).collect::<Result<_>>()?;
                let y = mlp_forward(t, parts[0], parts[1], parts[2], &bound)?;
                let w = t.leaf(Tensor::vector(vec![1.0, -0.5, 2.0]));
                t.dot(y, w)
            },
            &x,
            1e-5,
            usize::MAX,
            0,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn same_seed_same_parameters() {
        let build = || {
            let mut rng = seeded_rng(99);
            let mut store = ParamStore::new();
            EmbeddingTable::new(&mut store, "emb", 5, 3, &mut rng);
            BiLstmEncoder::new(&mut store, "enc", 3, 4, &mut rng).unwrap();
            MlpParams::new(&mut store, "mlp", 4, &mut rng);
            store
        };
        let (a, b) = (build(), build());
        assert_eq!(a, b);
        for (_, _, t) in a.iter() {
            assert!(t.data().iter().all(|&v| (-INIT_RANGE..INIT_RANGE).contains(&v)));
        }
    }
}
