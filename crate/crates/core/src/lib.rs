//! Desk-scale news classification toolkit.

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod diagnostics;
pub mod ensemble;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod seed;
pub mod text;
pub mod tokenizer;
pub mod trainer;
