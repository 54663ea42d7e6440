use rand::seq::index::sample;

use super::{seeded_rng, Tape, Tensor, Var};
use crate::error::{NseError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub probes: usize,
}

/// Compares the taped gradient of scalar `f` at `x` with central differences
/// on up to `probes` randomly chosen coordinates (all of them if `probes`
/// exceeds the tensor size). Relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(op: &str, f: F, x: &Tensor, eps: f64, probes: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&mut tape, xv)?;
    if !tape.value(y).is_scalar() {
        return Err(NseError::invalid(format!("grad_check of {op}: function is not scalar-valued")));
    }
    tape.backward(y)?;
    let analytic = tape.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |point: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(point);
        let out = f(&mut t, v)?;
        Ok(t.value(out).item())
    };

    let n = x.len();
    let coords: Vec<usize> = if probes >= n {
        (0..n).collect()
    } else {
        sample(&mut seeded_rng(seed), n, probes).into_vec()
    };

    let mut worst = 0.0f64;
    for &i in &coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(GradCheckReport {
        op: op.to_string(),
        max_rel_error: worst,
        probes: coords.len(),
    })
}
