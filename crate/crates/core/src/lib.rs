// `!(x > 0.0)` is used on purpose: it rejects NaN together with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod case_studies;
pub mod certificates;
pub mod dynamics;
pub mod error;
pub mod rates;
pub mod scenario;
