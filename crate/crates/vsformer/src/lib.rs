//! Value- and shape-aware transformer for multivariate time series
//! classification.
//!
//! The pipeline: discover per-class prototype shapes with matrix-profile
//! motif search and match every instance against them (shape tokens),
//! extract interval statistics at multiple granularities (value tokens),
//! learn class-specific priors for both token kinds, encode token metadata
//! with binary variable codes and normalized timestamps, run each token set
//! through a transformer encoder with prior-enhanced self-attention, and
//! fuse the two branch representations with a learned per-instance gate.

pub mod dataset;
pub mod model;
pub mod priors;
pub mod shape;
pub mod trainer;
pub mod value;
