//! Memory-augmented hypothesis-test reader for cloze-style comprehension.
//!
//! A query memory is repeatedly regressed toward the answer by read, compose
//! and write controllers attending over a fixed document memory. Two halting
//! strategies are provided: word-level query gating and an adaptive
//! termination head. Answers are scored by pointer-sum attention.

pub mod cli;
pub mod data;
pub mod error;
pub mod hypothesis;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod prediction;
pub mod trace;
pub mod training;

pub use error::{NseError, Result};
