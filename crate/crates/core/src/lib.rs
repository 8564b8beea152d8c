//! Context-driven object insertion: given the objects already detected in a
//! scene, recommend which new object to insert and where.

// NaN-rejecting comparisons and index loops are deliberate in the numeric code.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli_io;
pub mod corpus_stats;
pub mod gmm;
pub mod rank_eval;
pub mod scene_model;
pub mod scorer;
