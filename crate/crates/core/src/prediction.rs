//! Pointer-sum answer scoring, the halting-weighted mixture, answer
//! selection and the training loss.

use serde::{Deserialize, Serialize};

use crate::error::{NseError, Result};
use crate::numerics::{Tape, Var};

/// Floor inside the log of the cross-entropy.
pub const LOSS_EPS: f64 = 1e-12;

/// Marks every document position holding one candidate token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerMask {
    pub positions: Vec<bool>,
}

impl AnswerMask {
    pub fn new(document: &[usize], candidate: usize) -> Self {
        AnswerMask {
            positions: document.iter().map(|&t| t == candidate).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        !self.positions.iter().any(|&b| b)
    }
}

/// `vᵀ softmax(l_d)` with padded positions excluded from the softmax.
/// A candidate absent from the document scores exactly zero.
pub fn pointer_sum(tape: &mut Tape, l_d: Var, mask: &AnswerMask, doc_keep: &[bool]) -> Result<Var> {
    let n = tape.value(l_d).len();
    if mask.positions.len() != n || doc_keep.len() != n {
        return Err(NseError::invalid(format!(
            "answer mask length {} / padding mask {} vs {n} document positions",
            mask.positions.len(),
            doc_keep.len()
        )));
    }
    let attention = tape.softmax(l_d, Some(doc_keep))?;
    let v: Vec<f64> = mask
        .positions
        .iter()
        .zip(doc_keep)
        .map(|(&m, &k)| if m && k { 1.0 } else { 0.0 })
        .collect();
    let selected = tape.mul_const(attention, &v)?;
    Ok(tape.sum(selected))
}

/// `Σ_t p_t · P_t(a)`.
pub fn mixture_prediction(tape: &mut Tape, per_step: &[Var], halting: &[Var]) -> Result<Var> {
    if per_step.len() != halting.len() || per_step.is_empty() {
        return Err(NseError::invalid(format!(
            "{} step probabilities vs {} halting weights",
            per_step.len(),
            halting.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&prob, &p) in per_step.iter().zip(halting) {
        let term = tape.mul(prob, p)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.expect("non-empty"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionDistribution {
    pub probs: Vec<f64>,
    pub chosen: usize,
}

impl PredictionDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let chosen = select_answer(&probs)?;
        Ok(PredictionDistribution { probs, chosen })
    }
}

/// Index of the most probable candidate; ties go to the lowest index.
pub fn select_answer(probs: &[f64]) -> Result<usize> {
    if probs.is_empty() {
        return Err(NseError::invalid("empty candidate set"));
    }
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    Ok(best)
}

/// `-ln(P_true + ε)` on the tape.
pub fn cross_entropy_loss(tape: &mut Tape, p_true: Var) -> Result<Var> {
    tape.neg_log(p_true, LOSS_EPS)
}

/// Plain-value cross-entropy, for reporting.
pub fn cross_entropy(p_true: f64) -> f64 {
    -(p_true + LOSS_EPS).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use proptest::prelude::*;

    fn scalar(tape: &mut Tape, x: f64) -> Var {
        tape.leaf(Tensor::scalar(x))
    }

    fn score(l_d: &[f64], mask: &[bool], keep: &[bool]) -> f64 {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::vector(l_d.to_vec()));
        let m = AnswerMask {
            positions: mask.to_vec(),
        };
        let p = pointer_sum(&mut tape, l, &m, keep).unwrap();
        tape.value(p).item()
    }

    #[test]
    fn pointer_sum_examples() {
        assert_eq!(score(&[0.0; 4], &[true, false, true, false], &[true; 4]), 0.5);
        assert!((score(&[0.3, -1.0, 2.0], &[true; 3], &[true; 3]) - 1.0).abs() < 1e-15);
        assert!((score(&[2f64.ln(), 0.0, 0.0], &[true, false, false], &[true; 3]) - 0.5).abs() < 1e-15);
        assert_eq!(score(&[1.0, 2.0], &[false, false], &[true; 2]), 0.0);
        // Padding absorbs no mass even if the mask marks it.
        assert_eq!(score(&[0.0, 0.0, 9.0], &[true, false, true], &[true, true, false]), 0.5);
    }

    fn mix(probs: &[f64], halting: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let a: Vec<Var> = probs.iter().map(|&x| scalar(&mut tape, x)).collect();
        let b: Vec<Var> = halting.iter().map(|&x| scalar(&mut tape, x)).collect();
        let m = mixture_prediction(&mut tape, &a, &b)?;
        Ok(tape.value(m).item())
    }

    #[test]
    fn mixture_examples() {
        assert_eq!(mix(&[0.7, 0.2], &[1.0, 0.0]).unwrap(), 0.7);
        assert!((mix(&[0.4, 0.8], &[0.5, 0.5]).unwrap() - 0.6).abs() < 1e-15);
        assert!((mix(&[0.3; 3], &[0.2, 0.5, 0.3]).unwrap() - 0.3).abs() < 1e-15);
        assert!(mix(&[0.3, 0.1], &[1.0]).is_err());
    }

    #[test]
    fn select_answer_examples() {
        assert_eq!(select_answer(&[0.1, 0.7, 0.2]).unwrap(), 1);
        assert_eq!(select_answer(&[0.5, 0.5]).unwrap(), 0);
        assert_eq!(select_answer(&[0.01]).unwrap(), 0);
        assert!(select_answer(&[]).is_err());
    }

    #[test]
    fn loss_examples() {
        assert!(cross_entropy(1.0).abs() < 1e-11);
        assert!((cross_entropy((-1f64).exp()) - 1.0).abs() < 1e-11);
        let floor = cross_entropy(0.0);
        assert!(floor.is_finite() && (floor - 12.0 * 10f64.ln()).abs() < 1e-9);

        let mut tape = Tape::new();
        let p = scalar(&mut tape, (-1f64).exp());
        let l = cross_entropy_loss(&mut tape, p).unwrap();
        assert!((tape.value(l).item() - 1.0).abs() < 1e-11);
    }

    proptest! {
        #[test]
        fn disjoint_masks_partition_the_mass(
            logits in proptest::collection::vec(-5.0f64..5.0, 2..12),
            labels in proptest::collection::vec(0usize..3, 12),
        ) {
            let n = logits.len();
            let keep = vec![true; n];
            let total: f64 = (0..3)
                .map(|c| {
                    let mask: Vec<bool> = (0..n).map(|i| labels[i] == c).collect();
                    score(&logits, &mask, &keep)
                })
                .sum();
            prop_assert!((total - 1.0).abs() <= 1e-10);
        }

        #[test]
        fn mixture_stays_within_step_range(
            probs in proptest::collection::vec(0.0f64..1.0, 1..8),
            raw in proptest::collection::vec(0.01f64..1.0, 8),
        ) {
            let w: Vec<f64> = raw[..probs.len()].to_vec();
            let z: f64 = w.iter().sum();
            let w: Vec<f64> = w.iter().map(|x| x / z).collect();
            let m = mix(&probs, &w).unwrap();
            let lo = probs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
        }

        #[test]
        fn selection_ignores_positive_rescaling(
            probs in proptest::collection::vec(0.0f64..1.0, 1..10),
            factor in 0.01f64..100.0,
        ) {
            let scaled: Vec<f64> = probs.iter().map(|p| p * factor).collect();
            prop_assert_eq!(select_answer(&probs).unwrap(), select_answer(&scaled).unwrap());
        }

        #[test]
        fn loss_is_non_increasing(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(cross_entropy(hi) <= cross_entropy(lo));
        }
    }
}
