//! Dense tensors and a reverse-mode tape.
//!
//! Every value is `f64`. Vectors have shape `[n]`, matrices `[rows, cols]`
//! (row-major), scalars shape `[]`. A [`Tape`] records one forward pass; it is
//! never shared across threads, but independent tapes run fine in parallel.

mod gradcheck;
mod params;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{GradBuf, Gradients, ParamId, ParamStore};
pub use rng::{derive_seed, seeded_rng, uniform_tensor};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
