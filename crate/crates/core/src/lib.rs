// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calculus;
pub mod cli;
pub mod error;
pub mod model;
pub mod otmap;
pub mod sks;
pub mod snmatch;
pub mod specialfn;
pub mod univariate;
pub mod verify;
